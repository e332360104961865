//! Multi-scale patch forecasting engine.
//!
//! The model stacks adaptive patch decomposition ([`empd`]) and triad
//! interaction blocks ([`tib`]) into a coarse-to-fine [`cascade`], whose
//! per-scale features feed a sparse mixture-of-experts head ([`moe`]).
//! Everything runs on the small reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod empd;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod moe;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod tib;
pub mod train;

pub use autodiff::{Conv1dSpec, Tape, Var};
pub use config::{ModelConfig, Variant};
pub use data::{SeriesFrame, Split, SplitRows, SplitSpec, SynthSpec, WindowedDataset};
pub use empd::{ScaleEntry, ScaleSchedule};
pub use error::{Error, Result};
pub use model::{Dmsc, ForwardOptions, ModelOutput, RoutingSnapshot};
pub use params::{ParamId, ParamStore, Rng};
pub use tensor::Tensor;
pub use train::{EpochLog, Metrics, TrainConfig, TrainReport};
