//! Model hyperparameters and ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural switches reproducing the ablation rows of the model study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Base patch length fixed by config instead of the input controller.
    StaticDecomp,
    /// Triad block keeps only the intra-patch branch.
    IntraOnly,
    /// Branches summed without learned gates.
    NoFusedGate,
    /// Head replaced by one linear projector per scale, outputs summed.
    AggHeads,
    NoGlobal,
    NoLocal,
    /// Fixed single-scale patching at `p_min` for every layer.
    NoEmpd,
    /// Triad block reduced to `LayerNorm(Z)`.
    NoTib,
    /// Head replaced by one linear projector on the scale-averaged feature.
    NoAsrmoe,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::StaticDecomp,
        Variant::IntraOnly,
        Variant::NoFusedGate,
        Variant::AggHeads,
        Variant::NoGlobal,
        Variant::NoLocal,
        Variant::NoEmpd,
        Variant::NoTib,
        Variant::NoAsrmoe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::StaticDecomp => "static_decomp",
            Variant::IntraOnly => "intra_only",
            Variant::NoFusedGate => "no_fused_gate",
            Variant::AggHeads => "agg_heads",
            Variant::NoGlobal => "no_global",
            Variant::NoLocal => "no_local",
            Variant::NoEmpd => "no_empd",
            Variant::NoTib => "no_tib",
            Variant::NoAsrmoe => "no_asrmoe",
        }
    }

    /// Whether this variant uses the routed expert head.
    pub fn has_router(self) -> bool {
        !matches!(self, Variant::AggHeads | Variant::NoAsrmoe)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().skip(1).map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{}`; expected one of {}", s, names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of variables `C`.
    pub n_vars: usize,
    /// Look-back length `L`.
    pub lookback: usize,
    /// Forecast horizon.
    pub horizon: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub p_min: usize,
    pub p_max: usize,
    /// Patch length decay rate between consecutive layers.
    pub decay: usize,
    /// Reserved: patch bounds are fixed hyperparameters today.
    pub learn_patch_bounds: bool,
    /// Base patch length used by the `static_decomp` variant.
    pub static_patch_len: Option<usize>,
    pub kernel_intra: usize,
    pub kernel_inter: usize,
    pub dilation_inter: usize,
    pub n_global: usize,
    pub n_local: usize,
    pub top_k: usize,
    pub balance_lambda: f64,
    pub balance_sign_flip: bool,
    pub w_hist_momentum: f64,
    /// Per-window mean/std normalization of the input, undone on output.
    pub instance_norm: bool,
    pub ln_eps: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_vars: 1,
            lookback: 96,
            horizon: 96,
            d_model: 128,
            n_layers: 3,
            p_min: 8,
            p_max: 48,
            decay: 2,
            learn_patch_bounds: false,
            static_patch_len: None,
            kernel_intra: 3,
            kernel_inter: 3,
            dilation_inter: 2,
            n_global: 2,
            n_local: 4,
            top_k: 2,
            balance_lambda: 0.01,
            balance_sign_flip: false,
            w_hist_momentum: 0.9,
            instance_norm: true,
            ln_eps: 1e-5,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_vars", self.n_vars),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("p_min", self.p_min),
            ("p_max", self.p_max),
            ("kernel_intra", self.kernel_intra),
            ("kernel_inter", self.kernel_inter),
            ("dilation_inter", self.dilation_inter),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.decay < 2 {
            return Err(Error::Config(format!("decay must be >= 2, got {}", self.decay)));
        }
        if self.p_min > self.p_max {
            return Err(Error::Config(format!("p_min {} exceeds p_max {}", self.p_min, self.p_max)));
        }
        if self.p_min > self.lookback {
            return Err(Error::Config(format!("p_min {} exceeds lookback {}", self.p_min, self.lookback)));
        }
        if self.kernel_intra.is_multiple_of(2) || self.kernel_inter.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        if let Some(p) = self.static_patch_len {
            if p < self.p_min || p > self.lookback {
                return Err(Error::Config(format!(
                    "static_patch_len {} must be in {}..={}",
                    p, self.p_min, self.lookback
                )));
            }
        }
        if self.learn_patch_bounds {
            return Err(Error::Config("learn_patch_bounds is reserved and not supported".into()));
        }
        if self.variant.has_router() {
            let (g, l) = self.expert_counts();
            if g + l == 0 {
                return Err(Error::Config("expert head needs at least one expert".into()));
            }
            if l > 0 && (self.top_k == 0 || self.top_k > l) {
                return Err(Error::Config(format!("top_k must be in 1..={}, got {}", l, self.top_k)));
            }
        }
        if !(0.0..1.0).contains(&self.w_hist_momentum) {
            return Err(Error::Config("w_hist_momentum must be in [0, 1)".into()));
        }
        if self.balance_lambda < 0.0 || !self.balance_lambda.is_finite() {
            return Err(Error::Config("balance_lambda must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Global and local expert counts after the variant is applied.
    pub fn expert_counts(&self) -> (usize, usize) {
        match self.variant {
            Variant::NoGlobal => (0, self.n_local),
            Variant::NoLocal => (self.n_global, 0),
            _ => (self.n_global, self.n_local),
        }
    }

    /// Upper bound on the look-back after clamping `p_max`.
    pub fn effective_p_max(&self) -> usize {
        self.p_max.min(self.lookback)
    }
}
