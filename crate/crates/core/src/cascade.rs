//! Coarse-to-fine stack of patch decomposition and triad blocks.
//!
//! Layer 0 decomposes the input directly. Every later layer first adds a
//! gated projection of the previous layer's pooled feature back onto the
//! input series, then decomposes at its own (finer) patch length.

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, Variant};
use crate::empd::{self, PatchController, PatchEmbedding, ScaleSchedule};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamStore, Rng};
use crate::tensor::Tensor;
use crate::tib::{Tib, TibMode};

/// `sigmoid(gate(F)) * value(F)`, mapping `[B, C, D]` to `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct GuidePath {
    pub gate: Linear,
    pub value: Linear,
}

impl GuidePath {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, lookback: usize) -> Self {
        Self {
            gate: Linear::new(store, rng, &format!("{name}.gate"), d, lookback),
            value: Linear::new(store, rng, &format!("{name}.value"), d, lookback),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let g = self.gate.forward(tape, store, f)?;
        let g = tape.sigmoid(g);
        let v = self.value.forward(tape, store, f)?;
        tape.mul(g, v)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.gate.zero(store);
        self.value.zero(store);
    }
}

#[derive(Clone, Debug)]
pub struct Cascade {
    pub controller: PatchController,
    pub embeds: Vec<PatchEmbedding>,
    pub blocks: Vec<Tib>,
    /// One per layer after the first.
    pub guides: Vec<GuidePath>,
    pub lookback: usize,
    pub variant: Variant,
    pub static_patch_len: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    /// Pooled `[B, C, D]` feature of every layer, coarse first.
    pub features: Vec<Var>,
    pub branch_gates: Vec<Option<Var>>,
}

impl Cascade {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let p_max = cfg.effective_p_max();
        let controller = PatchController::new(store, rng, cfg.n_vars, cfg.p_min, p_max, cfg.decay);
        let mode = match cfg.variant {
            Variant::IntraOnly => TibMode::IntraOnly,
            Variant::NoFusedGate => TibMode::UngatedSum,
            Variant::NoTib => TibMode::Passthrough,
            _ => TibMode::Full,
        };
        let mut embeds = Vec::with_capacity(cfg.n_layers);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        let mut guides = Vec::with_capacity(cfg.n_layers.saturating_sub(1));
        for l in 0..cfg.n_layers {
            let cap = match cfg.variant {
                Variant::NoEmpd => cfg.p_min,
                Variant::StaticDecomp => {
                    let base = static_base(cfg);
                    (base / cfg.decay.saturating_pow(l as u32)).max(cfg.p_min).min(cfg.lookback)
                }
                _ => empd::layer_capacity(l, cfg.lookback, cfg.p_min, p_max, cfg.decay),
            };
            embeds.push(PatchEmbedding::new(store, rng, &format!("layer{l}.embed"), cap, cfg.d_model));
            blocks.push(Tib::new(
                store,
                rng,
                &format!("layer{l}.tib"),
                cfg.n_vars,
                cfg.d_model,
                cfg.kernel_intra,
                cfg.kernel_inter,
                cfg.dilation_inter,
                cfg.ln_eps,
                mode,
            ));
            if l > 0 {
                guides.push(GuidePath::new(store, rng, &format!("layer{l}.guide"), cfg.d_model, cfg.lookback));
            }
        }
        Self {
            controller,
            embeds,
            blocks,
            guides,
            lookback: cfg.lookback,
            variant: cfg.variant,
            static_patch_len: cfg.static_patch_len,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// The schedule a forward pass on `x: [B, C, L]` would use. `x` is the
    /// series as fed to the controller.
    pub fn describe_schedule(&self, store: &ParamStore, x: &Tensor) -> Result<ScaleSchedule> {
        let c = &self.controller;
        let n = self.n_layers();
        match self.variant {
            Variant::NoEmpd => Ok(empd::uniform_schedule(c.p_min, self.lookback, n)),
            Variant::StaticDecomp => {
                let base = self.static_patch_len.unwrap_or_else(|| empd::base_patch_len(0.5, c.p_min, c.p_max));
                Ok(empd::schedule_from_base(f64::NAN, base, self.lookback, n, c.p_min, c.decay, vec![]))
            }
            _ => {
                let alpha = c.compute_alpha(store, x)?;
                empd::build_schedule(alpha, self.lookback, n, c.p_min, c.p_max, c.decay)
            }
        }
    }

    /// Run every layer on `x: [B, C, L]` with a precomputed schedule.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, schedule: &ScaleSchedule) -> Result<CascadeOutput> {
        if schedule.entries.len() != self.n_layers() {
            return Err(Error::Config(format!(
                "schedule has {} layers, model has {}",
                schedule.entries.len(),
                self.n_layers()
            )));
        }
        let mut features: Vec<Var> = Vec::with_capacity(self.n_layers());
        let mut branch_gates = Vec::with_capacity(self.n_layers());
        for (l, entry) in schedule.entries.iter().enumerate() {
            let input = match features.last() {
                None => x,
                Some(&prev) => {
                    let guide = self.guides[l - 1].forward(tape, store, prev)?;
                    tape.add(guide, x)?
                }
            };
            let patches = empd::decompose(tape, input, entry)?;
            let z = self.embeds[l].embed(tape, store, patches)?;
            let out = self.blocks[l].forward(tape, store, z)?;
            features.push(out.pooled);
            branch_gates.push(out.gates);
        }
        Ok(CascadeOutput { features, branch_gates })
    }
}

fn static_base(cfg: &ModelConfig) -> usize {
    cfg.static_patch_len
        .unwrap_or_else(|| empd::base_patch_len(0.5, cfg.p_min, cfg.effective_p_max()))
}
