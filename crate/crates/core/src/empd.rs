//! Embedded multi-scale patch decomposition.
//!
//! A micro-MLP reads the time-averaged input and emits a scale factor
//! `alpha` in `[0, 1]`. The factor picks a base patch length between
//! `p_min` and `p_max`; each cascade layer then divides it by `decay^l`
//! (floored at `p_min`), so early layers see coarse patches and later
//! layers fine ones. Patches overlap by half (`stride = max(1, P/2)`), the
//! series is replication-padded on the right until the last patch ends
//! exactly on the final time step, and each patch is projected to the
//! model width by a per-layer linear map.
//!
//! Patch lengths are integers, so `alpha` does not carry gradient: the
//! controller is evaluated on values only.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{ParamStore, Rng};
use crate::tensor::Tensor;

/// The micro-MLP `C -> H -> 1` with sigmoid output, plus the patch bounds.
#[derive(Clone, Debug)]
pub struct PatchController {
    pub mlp: Mlp,
    pub p_min: usize,
    pub p_max: usize,
    pub decay: usize,
}

impl PatchController {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, n_vars: usize, p_min: usize, p_max: usize, decay: usize) -> Self {
        let hidden = n_vars.max(8);
        let mlp = Mlp::new(store, rng, "controller", &[n_vars, hidden, 1], Activation::Relu);
        Self { mlp, p_min, p_max, decay }
    }

    /// Per-sample `alpha` for `x: [B, C, L]`.
    pub fn sample_alphas(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        if x.ndim() != 3 || x.shape()[2] == 0 {
            return Err(Error::Shape(format!("controller expects [B, C, L] with L >= 1, got {:?}", x.shape())));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pooled = tape.mean_axes(xv, &[2])?;
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let pooled = tape.reshape(pooled, &[b, c])?;
        let logit = self.mlp.forward(&mut tape, store, pooled)?;
        let alpha = tape.sigmoid(logit);
        Ok(tape.value(alpha).data().to_vec())
    }

    /// Batch-shared `alpha`: the mean of the per-sample values.
    pub fn compute_alpha(&self, store: &ParamStore, x: &Tensor) -> Result<f64> {
        let alphas = self.sample_alphas(store, x)?;
        Ok(alphas.iter().sum::<f64>() / alphas.len() as f64)
    }
}

/// Patch geometry for one cascade layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleEntry {
    pub layer: usize,
    pub patch_len: usize,
    pub stride: usize,
    /// Replicated steps appended on the right.
    pub pad: usize,
    pub n_patches: usize,
}

impl ScaleEntry {
    fn new(layer: usize, patch_len: usize, lookback: usize) -> Self {
        let stride = (patch_len / 2).max(1);
        let n_patches = (lookback - patch_len).div_ceil(stride) + 1;
        let pad = (n_patches - 1) * stride + patch_len - lookback;
        Self { layer, patch_len, stride, pad, n_patches }
    }

    /// Time indices `[start, end)` of patch `i` in the padded series.
    pub fn patch_span(&self, i: usize) -> (usize, usize) {
        (i * self.stride, i * self.stride + self.patch_len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSchedule {
    pub lookback: usize,
    pub alpha: f64,
    pub p_base: usize,
    pub entries: Vec<ScaleEntry>,
    pub warnings: Vec<String>,
}

impl ScaleSchedule {
    pub fn patch_lens(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.patch_len).collect()
    }
}

/// Round half up.
fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Base patch length for a given `alpha`, after clamping `p_max` to `L`.
pub fn base_patch_len(alpha: f64, p_min: usize, p_max: usize) -> usize {
    let alpha = alpha.clamp(0.0, 1.0);
    round_half_up(p_min as f64 + alpha * (p_max - p_min) as f64)
}

/// Per-layer patch schedule: `P_l = max(p_min, floor(P_base / decay^l))`.
pub fn build_schedule(
    alpha: f64,
    lookback: usize,
    n_layers: usize,
    p_min: usize,
    p_max: usize,
    decay: usize,
) -> Result<ScaleSchedule> {
    if n_layers == 0 {
        return Err(Error::Config("schedule needs at least one layer".into()));
    }
    if p_min == 0 || p_min > lookback {
        return Err(Error::Config(format!("p_min {} must be in 1..={}", p_min, lookback)));
    }
    if decay < 2 {
        return Err(Error::Config(format!("decay must be >= 2, got {decay}")));
    }
    let mut warnings = Vec::new();
    let mut p_max_eff = p_max;
    if p_max > lookback {
        warnings.push(format!("p_max {} clamped to look-back length {}", p_max, lookback));
        p_max_eff = lookback;
    }
    if p_max_eff < p_min {
        return Err(Error::Config(format!("p_max {} below p_min {}", p_max_eff, p_min)));
    }
    let p_base = base_patch_len(alpha, p_min, p_max_eff);
    Ok(schedule_from_base(alpha, p_base, lookback, n_layers, p_min, decay, warnings))
}

/// Schedule from an explicit base patch length (used by the static
/// decomposition ablation).
pub fn schedule_from_base(
    alpha: f64,
    p_base: usize,
    lookback: usize,
    n_layers: usize,
    p_min: usize,
    decay: usize,
    warnings: Vec<String>,
) -> ScaleSchedule {
    let mut entries = Vec::with_capacity(n_layers);
    let mut div = 1usize;
    for layer in 0..n_layers {
        let p = (p_base / div).max(p_min).min(lookback);
        entries.push(ScaleEntry::new(layer, p, lookback));
        div = div.saturating_mul(decay);
    }
    ScaleSchedule { lookback, alpha, p_base, entries, warnings }
}

/// Single-scale schedule with every layer at `patch_len`.
pub fn uniform_schedule(patch_len: usize, lookback: usize, n_layers: usize) -> ScaleSchedule {
    let entries = (0..n_layers).map(|l| ScaleEntry::new(l, patch_len, lookback)).collect();
    ScaleSchedule { lookback, alpha: f64::NAN, p_base: patch_len, entries, warnings: vec![] }
}

/// Pad and unfold `x: [B, C, L]` into `[B, C, N, P]`.
pub fn decompose(tape: &mut Tape, x: Var, entry: &ScaleEntry) -> Result<Var> {
    let len = *tape.shape(x).last().unwrap_or(&0);
    if entry.n_patches == 0 || (entry.n_patches - 1) * entry.stride + entry.patch_len != len + entry.pad {
        return Err(Error::Config(format!("schedule entry {:?} does not match length {}", entry, len)));
    }
    let padded = tape.pad_replicate_right(x, entry.pad)?;
    tape.unfold(padded, entry.patch_len, entry.stride)
}

/// Linear projector from patches to the model width. The weight has room
/// for the longest patch this layer can ever see; shorter patches use the
/// leading rows.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub proj: Linear,
    pub capacity: usize,
}

impl PatchEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, capacity: usize, d_model: usize) -> Self {
        Self { proj: Linear::new(store, rng, name, capacity, d_model), capacity }
    }

    /// `[B, C, N, P] -> [B, C, N, D]`, mixing only within each patch.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        let p = *tape.shape(patches).last().unwrap_or(&0);
        if p > self.capacity {
            return Err(Error::Config(format!(
                "patch length {} exceeds projector input width {}",
                p, self.capacity
            )));
        }
        if p == self.capacity {
            return self.proj.forward(tape, store, patches);
        }
        let w = tape.param(store, self.proj.w);
        let w = tape.slice(w, 0, 0, p)?;
        let y = tape.matmul(patches, w)?;
        let b = tape.param(store, self.proj.b.expect("projector bias"));
        tape.add(y, b)
    }
}

/// Largest patch layer `l` can receive for any `alpha`.
pub fn layer_capacity(layer: usize, lookback: usize, p_min: usize, p_max: usize, decay: usize) -> usize {
    let p_max = p_max.min(lookback);
    let div = decay.saturating_pow(layer as u32);
    (p_max / div).max(p_min).min(lookback)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_example_three_layers() {
        let s = build_schedule(0.5, 96, 3, 8, 24, 2).unwrap();
        assert_eq!(s.p_base, 16);
        assert_eq!(s.patch_lens(), vec![16, 8, 8]);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn alpha_zero_gives_p_min_everywhere() {
        let s = build_schedule(0.0, 96, 4, 8, 48, 2).unwrap();
        assert_eq!(s.p_base, 8);
        assert!(s.patch_lens().iter().all(|&p| p == 8));
    }

    #[test]
    fn p_max_is_clamped_with_warning() {
        let s = build_schedule(1.0, 16, 2, 8, 48, 2).unwrap();
        assert_eq!(s.p_base, 16);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn rounding_is_half_up() {
        // 8 + 0.5 * 9 = 12.5 -> 13
        assert_eq!(base_patch_len(0.5, 8, 17), 13);
    }

    #[test]
    fn entry_geometry() {
        let e = ScaleEntry::new(0, 16, 96);
        assert_eq!((e.stride, e.pad, e.n_patches), (8, 0, 11));
        let e = ScaleEntry::new(0, 4, 11);
        assert_eq!((e.stride, e.pad, e.n_patches), (2, 1, 5));
        let e = ScaleEntry::new(0, 1, 5);
        assert_eq!((e.stride, e.pad, e.n_patches), (1, 0, 5));
    }

    #[test]
    fn decompose_repeats_last_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 11], (0..11).map(f64::from).collect()).unwrap());
        let e = ScaleEntry::new(0, 4, 11);
        let p = decompose(&mut tape, x, &e).unwrap();
        assert_eq!(tape.shape(p), &[1, 1, 5, 4]);
        assert_eq!(&tape.value(p).data()[16..], &[8., 9., 10., 10.]);
    }

    #[test]
    fn zero_input_zero_bias_alpha_is_half() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let ctrl = PatchController::new(&mut store, &mut rng, 3, 8, 48, 2);
        let alpha = ctrl.compute_alpha(&store, &Tensor::zeros(&[2, 3, 20])).unwrap();
        assert_eq!(alpha, 0.5);
    }

    #[test]
    fn batch_alpha_is_mean_of_samples() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let ctrl = PatchController::new(&mut store, &mut rng, 1, 8, 48, 2);
        // route the input straight to the output logit: alpha = sigmoid(mean(x))
        let first = &ctrl.mlp.layers[0];
        let second = &ctrl.mlp.layers[1];
        let mut w1 = Tensor::zeros(&[1, 8]);
        w1.data_mut()[0] = 1.0;
        store.set(first.w, w1).unwrap();
        let mut w2 = Tensor::zeros(&[8, 1]);
        w2.data_mut()[0] = 1.0;
        store.set(second.w, w2).unwrap();
        let logit = |a: f64| (a / (1.0 - a)).ln();
        let (l1, l2) = (logit(0.2), logit(0.6));
        // relu passes positive logits only, so shift through the bias
        let shift = 5.0;
        let mut b1 = Tensor::zeros(&[8]);
        b1.data_mut()[0] = shift;
        store.set(first.b.unwrap(), b1).unwrap();
        store.set(second.b.unwrap(), Tensor::vector(&[-shift])).unwrap();
        let x = Tensor::new(&[2, 1, 2], vec![l1, l1, l2, l2]).unwrap();
        let per = ctrl.sample_alphas(&store, &x).unwrap();
        assert!((per[0] - 0.2).abs() < 1e-12 && (per[1] - 0.6).abs() < 1e-12);
        assert!((ctrl.compute_alpha(&store, &x).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn identity_projector_returns_patches() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let emb = PatchEmbedding::new(&mut store, &mut rng, "emb", 4, 4);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        store.set(emb.proj.w, eye).unwrap();
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64 * 0.1).collect();
        let x = tape.constant(Tensor::new(&[1, 2, 3, 4], data.clone()).unwrap());
        let z = emb.embed(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn zero_weight_projector_returns_bias() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let emb = PatchEmbedding::new(&mut store, &mut rng, "emb", 5, 3);
        store.set(emb.proj.w, Tensor::zeros(&[5, 3])).unwrap();
        store.set(emb.proj.b.unwrap(), Tensor::vector(&[1., 2., 3.])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 1, 4, 5]));
        let z = emb.embed(&mut tape, &store, x).unwrap();
        for row in tape.value(z).data().chunks(3) {
            assert_eq!(row, &[1., 2., 3.]);
        }
    }

    #[test]
    fn oversized_patch_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let emb = PatchEmbedding::new(&mut store, &mut rng, "emb", 4, 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 6]));
        assert!(matches!(emb.embed(&mut tape, &store, x), Err(Error::Config(_))));
    }
}
