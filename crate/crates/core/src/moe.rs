//! Adaptive scale-routing mixture of experts.
//!
//! Each scale's pooled feature `F_l: [B, C, D]` is routed by a shared
//! router (fed the variable-mean of `F_l`) to a joint softmax over the
//! global and local experts. Global experts always run; only the top-K
//! local experts of each batch row run, and their weights are rescaled so
//! that the total local mass is unchanged. Scale predictions are combined
//! with temporal weights computed from simple feature statistics and a
//! slowly moving history of past weights.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::{ParamStore, Rng};
use crate::tensor::Tensor;

/// Small constant inside the descriptor standard deviation.
const STD_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct AsrMoe {
    pub router: Mlp,
    pub globals: Vec<Mlp>,
    pub locals: Vec<Mlp>,
    pub temporal: Mlp,
    pub top_k: usize,
    pub n_scales: usize,
    pub horizon: usize,
}

/// Routing result for one scale.
#[derive(Clone, Debug)]
pub struct Route {
    /// Joint distribution `[B, M + N_loc]`.
    pub omega: Var,
    /// Chosen local experts per batch row, ascending.
    pub selected: Vec<Vec<usize>>,
    /// Rescaled local weights `[B, N_loc]`, zero off the selection.
    pub local_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MoeOutput {
    /// `[B, C, horizon]`
    pub prediction: Var,
    pub routes: Vec<Route>,
    /// Scale weights `[B, n_scales]`.
    pub weights: Var,
    pub balance: Var,
}

/// Top-`k` indices of `row`, largest first by value, ties to the lower
/// index; returned in ascending index order.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Value-level top-k with local-mass-preserving rescale, on rows of
/// `omega_local: [B, N_loc]`.
pub fn topk_local(omega_local: &Tensor, k: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let [b, n] = match *omega_local.shape() {
        [b, n] => [b, n],
        _ => return Err(Error::Shape(format!("expected [B, N_loc], got {:?}", omega_local.shape()))),
    };
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k must be in 1..={n}, got {k}")));
    }
    let mut out = Tensor::zeros(&[b, n]);
    let mut selected = Vec::with_capacity(b);
    for (r, row) in omega_local.data().chunks(n).enumerate() {
        let keep = topk_indices(row, k);
        let total: f64 = row.iter().sum();
        let kept: f64 = keep.iter().map(|&i| row[i]).sum();
        for &i in &keep {
            out.data_mut()[r * n + i] = row[i] * (total / kept);
        }
        selected.push(keep);
    }
    Ok((out, selected))
}

fn column(tape: &mut Tape, x: Var, j: usize) -> Result<Var> {
    let b = tape.shape(x)[0];
    let c = tape.slice(x, 1, j, 1)?;
    tape.reshape(c, &[b, 1, 1])
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        None => term,
        Some(a) => tape.add(a, term)?,
    }))
}

impl AsrMoe {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        d: usize,
        horizon: usize,
        n_global: usize,
        n_local: usize,
        top_k: usize,
        n_scales: usize,
    ) -> Self {
        let router = Mlp::new(store, rng, "moe.router", &[d, d, n_global + n_local], Activation::Relu);
        let globals = (0..n_global)
            .map(|m| Mlp::new(store, rng, &format!("moe.global{m}"), &[d, 2 * d, 2 * d, horizon], Activation::Gelu))
            .collect();
        let locals = (0..n_local)
            .map(|m| Mlp::new(store, rng, &format!("moe.local{m}"), &[d, 2 * d, horizon], Activation::Gelu))
            .collect();
        let hidden = (3 * n_scales).max(16);
        let temporal = Mlp::new(store, rng, "moe.temporal", &[3 * n_scales, hidden, n_scales], Activation::Relu);
        Self { router, globals, locals, temporal, top_k, n_scales, horizon }
    }

    pub fn n_experts(&self) -> usize {
        self.globals.len() + self.locals.len()
    }

    /// Joint routing distribution and local top-k for one scale. `fixed`
    /// overrides the selection (it must hold `top_k` indices per row).
    pub fn route(&self, tape: &mut Tape, store: &ParamStore, f: Var, fixed: Option<&[Vec<usize>]>) -> Result<Route> {
        let shape = tape.shape(f).to_vec();
        let [b, _, d] = match shape[..] {
            [b, c, d] => [b, c, d],
            _ => return Err(Error::Shape(format!("expected [B, C, D], got {:?}", shape))),
        };
        let pooled = tape.mean_axes(f, &[1])?;
        let pooled = tape.reshape(pooled, &[b, d])?;
        let logits = self.router.forward(tape, store, pooled)?;
        let omega = tape.softmax(logits, 1)?;
        let (m, n) = (self.globals.len(), self.locals.len());
        if n == 0 {
            return Ok(Route { omega, selected: vec![vec![]; b], local_weights: None });
        }
        let local = tape.slice(omega, 1, m, n)?;
        let selected = match fixed {
            Some(sel) => {
                if sel.len() != b || sel.iter().any(|s| s.len() != self.top_k || s.iter().any(|&i| i >= n)) {
                    return Err(Error::Config("fixed expert selection does not match batch and top_k".into()));
                }
                sel.to_vec()
            }
            None => topk_local(tape.value(local), self.top_k)?.1,
        };
        let mut mask = Tensor::zeros(&[b, n]);
        for (r, s) in selected.iter().enumerate() {
            for &i in s {
                mask.data_mut()[r * n + i] = 1.0;
            }
        }
        let mask = tape.constant(mask);
        let masked = tape.mul(local, mask)?;
        let total = tape.sum_axes(local, &[1])?;
        let kept = tape.sum_axes(masked, &[1])?;
        let ratio = tape.div(total, kept)?;
        let hat = tape.mul(masked, ratio)?;
        Ok(Route { omega, selected, local_weights: Some(hat) })
    }

    /// `sum_m omega_m G_m(F) + sum_{n in I} hat_n L_n(F)`; unselected local
    /// experts are never evaluated.
    pub fn mix(&self, tape: &mut Tape, store: &ParamStore, f: Var, route: &Route) -> Result<Var> {
        let b = tape.shape(f)[0];
        let mut acc = None;
        for (m, expert) in self.globals.iter().enumerate() {
            let y = expert.forward(tape, store, f)?;
            let w = column(tape, route.omega, m)?;
            let term = tape.mul(w, y)?;
            acc = accumulate(tape, acc, term)?;
        }
        if let Some(hat) = route.local_weights {
            for (n, expert) in self.locals.iter().enumerate() {
                let rows: Vec<usize> = (0..b).filter(|&r| route.selected[r].contains(&n)).collect();
                if rows.is_empty() {
                    continue;
                }
                let sub = tape.index_select(f, &rows)?;
                let y = expert.forward(tape, store, sub)?;
                let w = column(tape, hat, n)?;
                let w = tape.index_select(w, &rows)?;
                let term = tape.mul(w, y)?;
                let term = tape.scatter_rows(term, &rows, b)?;
                acc = accumulate(tape, acc, term)?;
            }
        }
        acc.ok_or_else(|| Error::Config("expert head has no experts".into()))
    }

    /// `(mean, std, max)` over `(C, D)` of each feature, concatenated:
    /// `[B, 3 * n_scales]`.
    pub fn descriptors(&self, tape: &mut Tape, features: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(features.len());
        for &f in features {
            let shape = tape.shape(f).to_vec();
            let b = shape[0];
            let flat = tape.reshape(f, &[b, shape[1] * shape[2]])?;
            let mean = tape.mean_axes(flat, &[1])?;
            let dev = tape.sub(flat, mean)?;
            let sq = tape.square(dev);
            let var = tape.mean_axes(sq, &[1])?;
            let var = tape.add_scalar(var, STD_EPS);
            let std = tape.sqrt(var);
            let max = tape.max_axis(flat, 1)?;
            parts.push(tape.concat(&[mean, std, max], 1)?);
        }
        tape.concat(&parts, 1)
    }

    /// Softmax scale weights `[B, n_scales]`.
    pub fn temporal_weights(&self, tape: &mut Tape, store: &ParamStore, features: &[Var], w_hist: &[f64]) -> Result<Var> {
        if features.len() != self.n_scales || w_hist.len() != self.n_scales {
            return Err(Error::Shape(format!(
                "temporal weighting built for {} scales, got {} features and {} history entries",
                self.n_scales,
                features.len(),
                w_hist.len()
            )));
        }
        let phi = self.descriptors(tape, features)?;
        let scale: Vec<f64> = w_hist.iter().flat_map(|&w| [w; 3]).collect();
        let scale = tape.constant(Tensor::vector(&scale));
        let phi = tape.mul(phi, scale)?;
        let logits = self.temporal.forward(tape, store, phi)?;
        tape.softmax(logits, 1)
    }

    /// `-lambda * mean_{b,l} sum_j omega log omega`, negated when `flip`.
    pub fn balance_loss(tape: &mut Tape, omegas: &[Var], lambda: f64, flip: bool) -> Result<Var> {
        let mut acc = None;
        let mut rows = 0;
        for &o in omegas {
            rows += tape.shape(o)[0];
            let lg = tape.log(o);
            let p = tape.mul(o, lg)?;
            let s = tape.sum_all(p);
            acc = accumulate(tape, acc, s)?;
        }
        let Some(total) = acc else {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        };
        let sign = if flip { 1.0 } else { -1.0 };
        Ok(tape.scale(total, sign * lambda / rows as f64))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &[Var],
        w_hist: &[f64],
        fixed: Option<&[Vec<Vec<usize>>]>,
        lambda: f64,
        flip: bool,
    ) -> Result<MoeOutput> {
        let weights = self.temporal_weights(tape, store, features, w_hist)?;
        let mut routes = Vec::with_capacity(features.len());
        let mut acc = None;
        for (l, &f) in features.iter().enumerate() {
            let route = self.route(tape, store, f, fixed.map(|s| &s[l][..]))?;
            let y = self.mix(tape, store, f, &route)?;
            let w = column(tape, weights, l)?;
            let term = tape.mul(w, y)?;
            acc = accumulate(tape, acc, term)?;
            routes.push(route);
        }
        let prediction = acc.ok_or_else(|| Error::Config("no scales".into()))?;
        let omegas: Vec<Var> = routes.iter().map(|r| r.omega).collect();
        let balance = Self::balance_loss(tape, &omegas, lambda, flip)?;
        Ok(MoeOutput { prediction, routes, weights, balance })
    }
}

/// `w_hist <- m * w_hist + (1 - m) * mean_B(w)`.
pub fn update_history(w_hist: &mut [f64], weights: &Tensor, momentum: f64) {
    let n = w_hist.len();
    let rows = weights.len() / n.max(1);
    for (j, h) in w_hist.iter_mut().enumerate() {
        let mean = (0..rows).map(|r| weights.data()[r * n + j]).sum::<f64>() / rows as f64;
        *h = momentum * *h + (1.0 - momentum) * mean;
    }
}
