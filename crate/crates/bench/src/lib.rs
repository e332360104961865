//! Wall-clock scaling of one training step against look-back length and
//! variable count.

use std::io::Write;
use std::time::Instant;

use dmsc_core::empd::{decompose, layer_capacity, PatchEmbedding};
use dmsc_core::train::total_loss;
use dmsc_core::{Dmsc, ForwardOptions, ModelConfig, ParamStore, Result, Rng, Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Samples shorter than this are repeated inside one timed rep.
const MIN_SAMPLE_S: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub lookbacks: Vec<usize>,
    pub n_vars: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub horizon: usize,
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            lookbacks: vec![96, 192, 384, 768],
            n_vars: 8,
            d_model: 64,
            n_layers: 3,
            horizon: 96,
            batch: 8,
            reps: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub x: usize,
    /// Mean seconds per step.
    pub mean_s: f64,
    pub min_s: f64,
    pub reps: usize,
    /// Steps per timed rep after auto-calibration.
    pub inner: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub note: String,
}

impl ScalingReport {
    fn from_points(points: Vec<ScalingPoint>) -> Self {
        let xs: Vec<f64> = points.iter().map(|p| p.x as f64).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.mean_s).collect();
        let (slope, intercept, r2) = fit_loglog(&xs, &ys);
        let note = if r2 < 0.95 {
            format!("poor fit (r2 {r2:.3}); timings noisy, rerun on an idle machine")
        } else {
            format!("r2 {r2:.3}")
        };
        Self { points, slope, intercept, r2, note }
    }

    /// One row per size plus a summary row.
    pub fn write_csv(&self, w: &mut impl Write, x_name: &str) -> std::io::Result<()> {
        writeln!(w, "{x_name},mean_s,min_s,reps,inner")?;
        for p in &self.points {
            writeln!(w, "{},{:.9},{:.9},{},{}", p.x, p.mean_s, p.min_s, p.reps, p.inner)?;
        }
        writeln!(w, "slope,{:.6},{:.6},{:.6},\"{}\"", self.slope, self.intercept, self.r2, self.note.replace('"', "'"))
    }
}

/// Least-squares line through `(ln x, ln y)`: `(slope, intercept, r2)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

/// Time `f` `reps` times after `warmup` runs. A single call shorter than
/// the sampling floor is batched so each rep lasts at least that long.
pub fn time_reps(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64, usize)> {
    for _ in 0..warmup {
        f()?;
    }
    let probe = Instant::now();
    f()?;
    let once = probe.elapsed().as_secs_f64();
    let inner = if once >= MIN_SAMPLE_S { 1 } else { (MIN_SAMPLE_S / once.max(1e-9)).ceil() as usize };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(t.elapsed().as_secs_f64() / inner as f64);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((mean, min, inner))
}

pub fn bench_config(spec: &ScalingSpec, lookback: usize) -> ModelConfig {
    ModelConfig {
        n_vars: spec.n_vars,
        lookback,
        horizon: spec.horizon,
        d_model: spec.d_model,
        n_layers: spec.n_layers,
        ..Default::default()
    }
}

/// One forward and backward pass of the training loss.
pub fn train_step(model: &Dmsc, x: &Tensor, y: &Tensor) -> Result<()> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, x, &ForwardOptions::default())?;
    let (loss, _) = total_loss(&mut tape, out.prediction, y, out.balance)?;
    tape.backward(loss)
}

/// Forward+backward step time for every look-back in `spec`.
pub fn scaling_in_lookback(spec: &ScalingSpec) -> Result<ScalingReport> {
    let mut points = Vec::new();
    for &l in &spec.lookbacks {
        let model = Dmsc::new(bench_config(spec, l), spec.seed)?;
        let mut rng = Rng::new(spec.seed + l as u64);
        let x = rng.tensor_normal(&[spec.batch, spec.n_vars, l], 1.0);
        let y = rng.tensor_normal(&[spec.batch, spec.n_vars, spec.horizon], 1.0);
        let (mean_s, min_s, inner) = time_reps(spec.reps, spec.warmup, || train_step(&model, &x, &y))?;
        points.push(ScalingPoint { x: l, mean_s, min_s, reps: spec.reps, inner });
    }
    Ok(ScalingReport::from_points(points))
}

/// Patch decomposition plus embedding (forward and backward) against the
/// variable count, at a fixed look-back and schedule.
pub fn empd_scaling_in_vars(spec: &ScalingSpec, lookback: usize, n_vars: &[usize]) -> Result<ScalingReport> {
    let cfg = bench_config(spec, lookback);
    let schedule = dmsc_core::empd::build_schedule(0.5, lookback, cfg.n_layers, cfg.p_min, cfg.p_max, cfg.decay)?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(spec.seed);
    let embeds: Vec<PatchEmbedding> = (0..cfg.n_layers)
        .map(|l| {
            let cap = layer_capacity(l, lookback, cfg.p_min, cfg.p_max, cfg.decay);
            PatchEmbedding::new(&mut store, &mut rng, &format!("embed.{l}"), cap, cfg.d_model)
        })
        .collect();
    let mut points = Vec::new();
    for &c in n_vars {
        let x = rng.tensor_normal(&[spec.batch, c, lookback], 1.0);
        let (mean_s, min_s, inner) = time_reps(spec.reps, spec.warmup, || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut total = None;
            for (entry, emb) in schedule.entries.iter().zip(&embeds) {
                let p = decompose(&mut tape, xv, entry)?;
                let z = emb.embed(&mut tape, &store, p)?;
                let s = tape.sum_all(z);
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            tape.backward(total.expect("at least one layer"))
        })?;
        points.push(ScalingPoint { x: c, mean_s, min_s, reps: spec.reps, inner });
    }
    Ok(ScalingReport::from_points(points))
}
