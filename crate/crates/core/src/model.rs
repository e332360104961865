//! The full forecaster: instance normalization, cascade, prediction head.

use crate::autodiff::{Tape, Var};
use crate::cascade::Cascade;
use crate::config::{ModelConfig, Variant};
use crate::empd::ScaleSchedule;
use crate::error::{Error, Result};
use crate::moe::{self, AsrMoe};
use crate::nn::Linear;
use crate::params::{ParamStore, Rng};
use crate::tensor::Tensor;

const INSTANCE_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub enum Head {
    Moe(AsrMoe),
    /// One projector per scale, outputs summed.
    Summed(Vec<Linear>),
    /// One projector on the scale-averaged feature.
    Single(Linear),
}

#[derive(Clone, Debug)]
pub struct Dmsc {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub cascade: Cascade,
    pub head: Head,
    /// Running memory of scale weights; updated by training only.
    pub w_hist: Vec<f64>,
}

/// Overrides for the discrete choices of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub schedule: Option<ScaleSchedule>,
    /// Local expert selection per scale, per batch row.
    pub selection: Option<Vec<Vec<Vec<usize>>>>,
}

/// Value-level routing record of one scale.
#[derive(Clone, Debug)]
pub struct RoutingSnapshot {
    pub omega: Tensor,
    pub selected: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, C, horizon]`, in the scale of the input.
    pub prediction: Var,
    pub balance: Var,
    pub schedule: ScaleSchedule,
    pub routing: Vec<RoutingSnapshot>,
    /// Scale weights `[B, n_layers]` when the routed head is used.
    pub scale_weights: Option<Var>,
    pub features: Vec<Var>,
}

impl Dmsc {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let cascade = Cascade::new(&mut store, &mut rng, &cfg);
        let (d, h, n) = (cfg.d_model, cfg.horizon, cfg.n_layers);
        let head = match cfg.variant {
            Variant::AggHeads => {
                Head::Summed((0..n).map(|l| Linear::new(&mut store, &mut rng, &format!("head{l}"), d, h)).collect())
            }
            Variant::NoAsrmoe => Head::Single(Linear::new(&mut store, &mut rng, "head", d, h)),
            _ => {
                let (g, l) = cfg.expert_counts();
                Head::Moe(AsrMoe::new(&mut store, &mut rng, d, h, g, l, cfg.top_k, n))
            }
        };
        Ok(Self { w_hist: vec![1.0; n], cfg, store, cascade, head })
    }

    pub fn n_params(&self) -> usize {
        self.store.numel()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match *x.shape() {
            [_, c, l] if c == self.cfg.n_vars && l == self.cfg.lookback => Ok(()),
            _ => Err(Error::Shape(format!(
                "model expects [B, {}, {}], got {:?}",
                self.cfg.n_vars,
                self.cfg.lookback,
                x.shape()
            ))),
        }
    }

    pub fn schedule(&self, x: &Tensor) -> Result<ScaleSchedule> {
        self.check_input(x)?;
        self.cascade.describe_schedule(&self.store, x)
    }

    /// Forward with the model's own parameters.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, opts: &ForwardOptions) -> Result<ModelOutput> {
        self.forward_with(tape, &self.store, x, opts)
    }

    /// Forward with an explicit parameter store of the same layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, opts: &ForwardOptions) -> Result<ModelOutput> {
        self.check_input(x)?;
        let schedule = match &opts.schedule {
            Some(s) => s.clone(),
            None => self.cascade.describe_schedule(store, x)?,
        };
        let xv = tape.constant(x.clone());
        let (xn, stats) = if self.cfg.instance_norm {
            let mean = tape.mean_axes(xv, &[2])?;
            let centered = tape.sub(xv, mean)?;
            let sq = tape.square(centered);
            let var = tape.mean_axes(sq, &[2])?;
            let var = tape.add_scalar(var, INSTANCE_EPS);
            let std = tape.sqrt(var);
            (tape.div(centered, std)?, Some((mean, std)))
        } else {
            (xv, None)
        };
        let cas = self.cascade.forward(tape, store, xn, &schedule)?;
        let features = cas.features;
        let (mut prediction, balance, routing, scale_weights) = match &self.head {
            Head::Moe(moe) => {
                let out = moe.forward(
                    tape,
                    store,
                    &features,
                    &self.w_hist,
                    opts.selection.as_deref(),
                    self.cfg.balance_lambda,
                    self.cfg.balance_sign_flip,
                )?;
                let routing = out
                    .routes
                    .iter()
                    .map(|r| RoutingSnapshot { omega: tape.value(r.omega).clone(), selected: r.selected.clone() })
                    .collect();
                (out.prediction, out.balance, routing, Some(out.weights))
            }
            Head::Summed(heads) => {
                let mut acc: Option<Var> = None;
                for (h, &f) in heads.iter().zip(&features) {
                    let y = h.forward(tape, store, f)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => tape.add(a, y)?,
                    });
                }
                let zero = tape.constant(Tensor::scalar(0.0));
                (acc.expect("at least one layer"), zero, vec![], None)
            }
            Head::Single(h) => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    acc = tape.add(acc, f)?;
                }
                let avg = tape.scale(acc, 1.0 / features.len() as f64);
                let y = h.forward(tape, store, avg)?;
                let zero = tape.constant(Tensor::scalar(0.0));
                (y, zero, vec![], None)
            }
        };
        if let Some((mean, std)) = stats {
            prediction = tape.mul(prediction, std)?;
            prediction = tape.add(prediction, mean)?;
        }
        Ok(ModelOutput { prediction, balance, schedule, routing, scale_weights, features })
    }

    /// Value-only prediction `[B, C, horizon]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, &ForwardOptions::default())?;
        Ok(tape.value(out.prediction).clone())
    }

    /// Fold a batch of scale weights into the history memory.
    pub fn update_history(&mut self, weights: &Tensor) {
        moe::update_history(&mut self.w_hist, weights, self.cfg.w_hist_momentum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_vars: 2,
            lookback: 16,
            horizon: 4,
            d_model: 8,
            n_layers: 2,
            p_min: 4,
            p_max: 8,
            n_global: 1,
            n_local: 2,
            top_k: 1,
            variant,
            ..Default::default()
        }
    }

    #[test]
    fn every_variant_runs() {
        let mut rng = Rng::new(0);
        let x = rng.tensor_uniform(&[3, 2, 16], 1.0);
        for v in Variant::ALL {
            let model = Dmsc::new(micro(v), 1).unwrap();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &x, &ForwardOptions::default()).unwrap();
            assert_eq!(tape.shape(out.prediction), &[3, 2, 4], "{v}");
            assert_eq!(out.routing.is_empty(), !v.has_router(), "{v}");
            assert!(tape.value(out.prediction).is_finite());
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = Dmsc::new(micro(Variant::Full), 1).unwrap();
        assert!(matches!(model.predict(&Tensor::zeros(&[1, 3, 16])), Err(Error::Shape(_))));
    }

    #[test]
    fn instance_norm_makes_prediction_shift_equivariant() {
        let model = Dmsc::new(micro(Variant::NoEmpd), 1).unwrap();
        let mut rng = Rng::new(2);
        let x = rng.tensor_uniform(&[2, 2, 16], 1.0);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x.map(|v| v + 5.0)).unwrap();
        assert!(a.map(|v| v + 5.0).max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn prediction_does_not_touch_history() {
        let model = Dmsc::new(micro(Variant::Full), 1).unwrap();
        let before = model.w_hist.clone();
        model.predict(&Tensor::ones(&[1, 2, 16])).unwrap();
        assert_eq!(model.w_hist, before);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Dmsc::new(micro(Variant::Full), 9).unwrap();
        let b = Dmsc::new(micro(Variant::Full), 9).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.value(id).data(), b.store.value(id).data());
        }
    }
}
