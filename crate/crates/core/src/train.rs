//! Optimizer, loss, evaluation and the training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Split, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{Dmsc, ForwardOptions, RoutingSnapshot};
use crate::params::{ParamId, ParamStore, Rng};
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    /// First and second moments of a parameter, once it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    /// Apply one update. Parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(*id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `mean((pred - target)^2) + balance`, and the MSE term alone.
pub fn total_loss(tape: &mut Tape, pred: Var, target: &Tensor, balance: Var) -> Result<(Var, Var)> {
    let y = tape.constant(target.clone());
    let d = tape.sub(pred, y)?;
    let sq = tape.square(d);
    let mse = tape.mean_all(sq);
    Ok((tape.add(mse, balance)?, mse))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Halve the learning rate after every epoch.
    pub lr_halving: bool,
    pub grad_clip: Option<f64>,
    /// Report metrics in the original units instead of z-scores.
    pub raw_metrics: bool,
    /// Cap on evaluation worker threads; 0 means one.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            patience: 3,
            seed: 0,
            lr_halving: false,
            grad_clip: None,
            raw_metrics: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size and patience must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Number of scored elements.
    pub count: usize,
}

/// Squared and absolute error sums of one batch.
fn error_sums(pred: &Tensor, target: &Tensor) -> (f64, f64) {
    pred.data().iter().zip(target.data()).fold((0.0, 0.0), |(s, a), (p, y)| {
        let d = p - y;
        (s + d * d, a + d.abs())
    })
}

pub fn metrics(pred: &Tensor, target: &Tensor) -> Metrics {
    let (s, a) = error_sums(pred, target);
    let n = pred.len();
    Metrics { mse: s / n as f64, mae: a / n as f64, count: n }
}

fn eval_batch(model: &Dmsc, ds: &WindowedDataset, starts: &[usize], raw: bool) -> Result<(f64, f64, usize)> {
    let (x, y) = ds.batch(starts);
    let pred = model.predict(&x)?;
    let (pred, y) = if raw { (ds.normalizer.denormalize(&pred), ds.normalizer.denormalize(&y)) } else { (pred, y) };
    let (s, a) = error_sums(&pred, &y);
    Ok((s, a, pred.len()))
}

/// MSE and MAE over every window of `split`. Batches may be scored on
/// several threads; their sums are combined in batch order so the result
/// does not depend on the thread count.
pub fn evaluate(model: &Dmsc, ds: &WindowedDataset, split: Split, batch_size: usize, threads: usize, raw: bool) -> Result<Metrics> {
    let starts: Vec<usize> = ds.window_starts(split).collect();
    if starts.is_empty() {
        return Err(Error::EmptySplit(format!("{split:?}")));
    }
    let batches: Vec<&[usize]> = starts.chunks(batch_size.max(1)).collect();
    let threads = threads.clamp(1, batches.len());
    let mut sums: Vec<Option<Result<(f64, f64, usize)>>> = (0..batches.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, b) in sums.iter_mut().zip(&batches) {
            *slot = Some(eval_batch(model, ds, b, raw));
        }
    } else {
        let per = batches.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (slots, group) in sums.chunks_mut(per).zip(batches.chunks(per)) {
                scope.spawn(move || {
                    for (slot, b) in slots.iter_mut().zip(group) {
                        *slot = Some(eval_batch(model, ds, b, raw));
                    }
                });
            }
        });
    }
    let (mut s, mut a, mut n) = (0.0, 0.0, 0usize);
    for r in sums {
        let (bs, ba, bn) = r.expect("every batch scored")?;
        s += bs;
        a += ba;
        n += bn;
    }
    Ok(Metrics { mse: s / n as f64, mae: a / n as f64, count: n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
    pub stopped_early: bool,
    /// MSE of the first training batch, before any update.
    pub first_batch_mse: Option<f64>,
}

/// Per-step information handed to an observer.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub routing: &'a [RoutingSnapshot],
}

/// Run one optimization step on `(x, y)`; returns `(loss, mse)`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Dmsc,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    grad_clip: Option<f64>,
    epoch: usize,
    step: usize,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, x, &ForwardOptions::default())?;
    let (loss, mse) = total_loss(&mut tape, out.prediction, y, out.balance)?;
    let (lv, mv) = (tape.value(loss).item(), tape.value(mse).item());
    if !lv.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, step });
    }
    tape.backward(loss)?;
    let mut grads = tape.param_grads();
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    opt.update(&mut model.store, &grads)?;
    if let Some(w) = out.scale_weights {
        let w = tape.value(w).clone();
        model.update_history(&w);
    }
    observer(&StepEvent { epoch, step, loss: lv, mse: mv, routing: &out.routing });
    Ok((lv, mv))
}

pub fn train(model: &mut Dmsc, ds: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, ds, cfg, &mut |_| {}, &mut |_| {})
}

/// Training with observers for every step and every finished epoch.
pub fn train_with(
    model: &mut Dmsc,
    ds: &WindowedDataset,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepEvent),
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.n_vars != model.cfg.n_vars || ds.lookback != model.cfg.lookback || ds.horizon != model.cfg.horizon {
        return Err(Error::Shape(format!(
            "dataset (C={}, L={}, H={}) does not match model (C={}, L={}, H={})",
            ds.n_vars, ds.lookback, ds.horizon, model.cfg.n_vars, model.cfg.lookback, model.cfg.horizon
        )));
    }
    let mut starts: Vec<usize> = ds.window_starts(Split::Train).collect();
    if starts.is_empty() {
        return Err(Error::EmptySplit("Train".into()));
    }
    let mut rng = Rng::new(cfg.seed ^ 0x7261_696e);
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParamStore, Vec<f64>)> = None;
    let mut bad = 0;
    let clock = Instant::now();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut starts);
        let (mut sse, mut n) = (0.0, 0usize);
        for (step, chunk) in starts.chunks(cfg.batch_size).enumerate() {
            let (x, y) = ds.batch(chunk);
            let (_, mse) = train_step(model, &mut opt, &x, &y, cfg.grad_clip, epoch, step, on_step)?;
            if report.first_batch_mse.is_none() {
                report.first_batch_mse = Some(mse);
            }
            sse += mse * y.len() as f64;
            n += y.len();
        }
        let val = evaluate(model, ds, Split::Val, cfg.batch_size, cfg.threads, cfg.raw_metrics)?;
        let log = EpochLog {
            epoch: epoch + 1,
            train_mse: sse / n as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            lr: opt.lr,
            elapsed_s: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        report.epochs.push(log);
        if best.as_ref().is_none_or(|(b, _, _)| val.mse < *b) {
            best = Some((val.mse, model.store.clone(), model.w_hist.clone()));
            report.best_epoch = Some(epoch + 1);
            report.best_val = Some(val);
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
        if cfg.lr_halving {
            opt.lr *= 0.5;
        }
    }
    if let Some((_, store, w_hist)) = best {
        model.store = store;
        model.w_hist = w_hist;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(0.0));
        let mut opt = Adam::new(1e-3);
        opt.update(&mut store, &[(id, Tensor::scalar(1.0))]).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_decays_moments() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(2.0));
        let mut opt = Adam::new(1e-3);
        opt.update(&mut store, &[(id, Tensor::scalar(1.0))]).unwrap();
        let p = store.value(id).item();
        let (m0, v0) = opt.moments(id).cloned().unwrap();
        let mut zeros_run = store.clone();
        let mut fresh = Adam::new(1e-3);
        fresh.update(&mut zeros_run, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(zeros_run.value(id).item(), p);
        opt.update(&mut store, &[(id, Tensor::scalar(0.0))]).unwrap();
        let (m1, v1) = opt.moments(id).unwrap();
        assert_eq!(m1.item(), 0.9 * m0.item());
        assert_eq!(v1.item(), 0.999 * v0.item());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("layer.w", Tensor::scalar(0.0));
        let mut opt = Adam::new(1e-3);
        let err = opt.update(&mut store, &[(id, Tensor::scalar(f64::NAN))]).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
        assert_eq!(store.value(id).item(), 0.0);
    }

    #[test]
    fn quadratic_descends() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0));
        let mut opt = Adam::new(0.01);
        let mut prev = 1.0f64;
        for _ in 0..50 {
            let x = store.value(id).item();
            opt.update(&mut store, &[(id, Tensor::scalar(2.0 * x))]).unwrap();
            let now = store.value(id).item().abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn loss_closed_forms() {
        let mut tape = Tape::new();
        let y = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = tape.constant(y.clone());
        let zero = tape.constant(Tensor::scalar(0.0));
        let (l, m) = total_loss(&mut tape, p, &y, zero).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert_eq!(tape.value(m).item(), 0.0);
        let shifted = tape.constant(y.map(|v| v + 1.0));
        let got = metrics(tape.value(shifted), &y);
        assert_eq!((got.mse, got.mae), (1.0, 1.0));
    }

    #[test]
    fn clip_limits_norm() {
        let mut store = ParamStore::new();
        let id = store.add("g", Tensor::zeros(&[2]));
        let mut g = vec![(id, Tensor::vector(&[3.0, 4.0]))];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15);
    }
}
