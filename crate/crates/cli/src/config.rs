//! Run configuration files.
//!
//! TOML with one table per concern; every key is optional:
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! path = "ETTh1.csv"        # omit to use [data.synth]
//! dataset = "ETTh1"         # named split table
//! train_frac = 0.7          # or fractions
//! test_frac = 0.2
//! rows = [8640, 2880, 2880] # or explicit row counts
//!
//! [data.synth]
//! n_vars = 3
//! length = 4000
//!
//! [model]
//! lookback = 96
//! horizon = 96
//! variant = "full"
//!
//! [train]
//! epochs = 10
//! ```
//!
//! Relative data paths resolve against the config file's directory. The
//! model's `n_vars` is taken from the data.

use std::path::{Path, PathBuf};

use dmsc_core::data::{load_csv, named_split, synth_series};
use dmsc_core::{ModelConfig, SeriesFrame, SplitRows, SplitSpec, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub dataset: Option<String>,
    pub train_frac: Option<f64>,
    pub test_frac: Option<f64>,
    pub rows: Option<[usize; 3]>,
    pub synth: SynthSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Where the series came from, for manifests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataIdentity {
    pub source: String,
    pub rows: usize,
    pub n_vars: usize,
    pub split: SplitRows,
    pub fingerprint: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Input { path: path.into(), source })?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config { path: path.into(), msg: e.to_string() })?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.path = Some(base.join(p));
            }
        }
        cfg.train.validate().map_err(|e| CliError::Config { path: path.into(), msg: e.to_string() })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Load or generate the series and decide its split.
    pub fn load_data(&self) -> Result<(SeriesFrame, SplitSpec, String)> {
        let d = &self.data;
        let (frame, source) = match &d.path {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::Input {
                        path: p.clone(),
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
                    });
                }
                (load_csv(p)?, p.display().to_string())
            }
            None => (synth_series(&d.synth)?, "synthetic".to_string()),
        };
        let split = if let Some([train, val, test]) = d.rows {
            SplitSpec::Rows(SplitRows { train, val, test })
        } else if d.train_frac.is_some() || d.test_frac.is_some() {
            SplitSpec::Fractions { train: d.train_frac.unwrap_or(0.7), test: d.test_frac.unwrap_or(0.2) }
        } else if let Some(name) = &d.dataset {
            SplitSpec::Named(name.clone())
        } else if let Some(stem) = d.path.as_ref().and_then(|p| p.file_stem()).and_then(|s| s.to_str()) {
            if named_split(stem, frame.len()).is_none() {
                return Err(CliError::Usage(format!(
                    "no split table for `{stem}`; set data.dataset, data.train_frac/test_frac or data.rows"
                )));
            }
            SplitSpec::Named(stem.to_string())
        } else {
            SplitSpec::Fractions { train: 0.7, test: 0.2 }
        };
        Ok((frame, split, source))
    }

    /// Model config with the data's variable count filled in.
    pub fn model_for(&self, frame: &SeriesFrame) -> Result<ModelConfig> {
        let cfg = ModelConfig { n_vars: frame.n_vars(), ..self.model.clone() };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn identity(frame: &SeriesFrame, split: SplitRows, source: &str) -> DataIdentity {
    DataIdentity {
        source: source.to_string(),
        rows: frame.len(),
        n_vars: frame.n_vars(),
        split,
        fingerprint: format!("{:016x}", frame.fingerprint()),
    }
}
