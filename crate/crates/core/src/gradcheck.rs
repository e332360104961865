//! Central finite-difference checks for tape gradients.
//!
//! The function under test may return a tensor of any shape; it is reduced
//! to a scalar by a fixed pseudo-random projection so that structural
//! cancellations (for example `sum(softmax(x)) == 1`) do not hide errors.

use crate::autodiff::{AdjointFault, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many elements per tensor (evenly strided).
    pub max_per_tensor: Option<usize>,
    pub projection_seed: u64,
    #[doc(hidden)]
    pub fault: Option<AdjointFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6, max_per_tensor: None, projection_seed: 0x5eed, fault: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub label: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Location of the worst element, e.g. `input1[7]`.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.max_rel_err.is_finite()
    }

    fn record(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || rel.is_nan() {
            self.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst = at();
        }
    }

    /// Fold another report into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    rng.tensor_uniform(shape, 1.0).map(|v| v + 0.1f64.copysign(v))
}

fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(projection(tape.shape(out), seed));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum_all(prod))
}

fn scalar_of<E>(xs: &[Tensor], eval: &E) -> Result<f64>
where
    E: Fn(&[Tensor], &mut Tape) -> Result<(Var, Vec<Var>)>,
{
    let mut t = Tape::new();
    let (v, _) = eval(xs, &mut t)?;
    Ok(t.value(v).item())
}

fn analytic_tape(cfg: &GradCheckConfig) -> Tape {
    match cfg.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    }
}

fn indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap < len => {
            let stride = len as f64 / cap as f64;
            (0..cap).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Check gradients of `f` with respect to each of `inputs`.
pub fn check_inputs<F>(label: &str, inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], tape: &mut Tape| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(tape, &vars)?;
        Ok((project(tape, out, cfg.projection_seed)?, vars))
    };
    let mut tape = analytic_tape(cfg);
    let (loss, vars) = eval(inputs, &mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut report = GradCheckReport { label: label.to_string(), ..Default::default() };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in indices(grad.len(), cfg.max_per_tensor) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let plus = scalar_of(&work, &eval)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let minus = scalar_of(&work, &eval)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(|| format!("input{i}[{j}]"), grad.data()[j], numeric, cfg.floor);
        }
    }
    Ok(report)
}

/// Check gradients of `f` with respect to the parameters in `ids` (every
/// trainable parameter when `ids` is `None`). Returns one report per
/// parameter.
pub fn check_params<F>(
    store: &ParamStore,
    ids: Option<&[ParamId]>,
    cfg: &GradCheckConfig,
    f: F,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let out = f(tape, s)?;
        project(tape, out, cfg.projection_seed)
    };
    let mut tape = analytic_tape(cfg);
    let loss = eval(store, &mut tape)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let targets: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().filter(|&id| store.is_trainable(id)).collect(),
    };
    let mut work = store.clone();
    let mut reports = Vec::with_capacity(targets.len());
    for id in targets {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let name = store.name(id).to_string();
        let mut report = GradCheckReport { label: name.clone(), ..Default::default() };
        for j in indices(analytic.len(), cfg.max_per_tensor) {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + cfg.step;
            let plus = {
                let mut t = Tape::new();
                let v = eval(&work, &mut t)?;
                t.value(v).item()
            };
            work.value_mut(id).data_mut()[j] = orig - cfg.step;
            let minus = {
                let mut t = Tape::new();
                let v = eval(&work, &mut t)?;
                t.value(v).item()
            };
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(|| format!("{name}[{j}]"), analytic.data()[j], numeric, cfg.floor);
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Collapse per-parameter reports into one.
pub fn summarize(label: &str, reports: &[GradCheckReport]) -> GradCheckReport {
    let mut total = GradCheckReport { label: label.to_string(), ..Default::default() };
    for r in reports {
        total.merge(r);
    }
    total
}
