//! Triad interaction block.
//!
//! Three feature extractors over the patch tokens `[B, C, N, D]`:
//!
//! * intra: depthwise conv along `N` then a pointwise `D -> D` map;
//! * inter: dilated depthwise conv on the intra features, pointwise map,
//!   plus a pooled context vector broadcast over `N`;
//! * cross: the inter features scaled by one sigmoid gate per variable,
//!   computed from their global average.
//!
//! The branches are mixed by per-(batch, variable) softmax gates, added to
//! the block input and layer-normalized over `D`. The pooled feature is the
//! mean of the normalized output over `N`.

use crate::autodiff::{Conv1dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{fan_in_uniform, ParamId, ParamStore, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TibMode {
    #[default]
    Full,
    /// Only the intra branch is fused.
    IntraOnly,
    /// The three branches are summed without gates.
    UngatedSum,
    /// `LayerNorm(Z)` only.
    Passthrough,
}

/// Depthwise conv over the token axis followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: Linear,
    pub kernel: usize,
    pub dilation: usize,
}

impl SeparableConv {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, kernel: usize, dilation: usize) -> Self {
        let depthwise = store.add(format!("{name}.dw.w"), fan_in_uniform(rng, &[d, 1, kernel], kernel));
        let depthwise_bias = store.add(format!("{name}.dw.b"), Tensor::zeros(&[d]));
        let pointwise = Linear::new(store, rng, &format!("{name}.pw"), d, d);
        Self { depthwise, depthwise_bias, pointwise, kernel, dilation }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [b, c, n, d] = dims4(&shape)?;
        let t = tape.reshape(x, &[b * c, n, d])?;
        let t = tape.permute(t, &[0, 2, 1])?;
        let w = tape.param(store, self.depthwise);
        let t = tape.conv1d(t, w, Conv1dSpec::same(self.kernel, self.dilation, d))?;
        let bias = tape.param(store, self.depthwise_bias);
        let bias = tape.reshape(bias, &[d, 1])?;
        let t = tape.add(t, bias)?;
        let t = tape.permute(t, &[0, 2, 1])?;
        let t = tape.reshape(t, &[b, c, n, d])?;
        self.pointwise.forward(tape, store, t)
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, c, n, d] if n > 0 => Ok([b, c, n, d]),
        _ => Err(Error::Shape(format!("expected [B, C, N, D] with N >= 1, got {:?}", shape))),
    }
}

#[derive(Clone, Debug)]
pub struct Tib {
    pub intra: SeparableConv,
    pub inter: SeparableConv,
    pub context: Linear,
    pub cross: Mlp,
    pub branch_gate: Linear,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub mode: TibMode,
}

/// Outputs of one block.
#[derive(Clone, Debug)]
pub struct TibOutput {
    /// `[B, C, N, D]`
    pub output: Var,
    /// `[B, C, D]`
    pub pooled: Var,
    /// Branch gate weights `[B, C, 3]` when gated fusion ran.
    pub gates: Option<Var>,
}

impl Tib {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        n_vars: usize,
        d: usize,
        kernel_intra: usize,
        kernel_inter: usize,
        dilation_inter: usize,
        eps: f64,
        mode: TibMode,
    ) -> Self {
        let intra = SeparableConv::new(store, rng, &format!("{name}.intra"), d, kernel_intra, 1);
        let inter = SeparableConv::new(store, rng, &format!("{name}.inter"), d, kernel_inter, dilation_inter);
        let context = Linear::new(store, rng, &format!("{name}.inter.ctx"), d, d);
        let cross = Mlp::new(store, rng, &format!("{name}.cross"), &[d, d, n_vars], Activation::Relu);
        let branch_gate = Linear::new(store, rng, &format!("{name}.gate"), 3 * d, 3);
        let gamma = store.add(format!("{name}.ln.gamma"), Tensor::ones(&[d]));
        let beta = store.add(format!("{name}.ln.beta"), Tensor::zeros(&[d]));
        Self { intra, inter, context, cross, branch_gate, gamma, beta, eps, mode }
    }

    pub fn intra_branch(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        self.intra.forward(tape, store, z)
    }

    pub fn inter_branch(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let conv = self.inter.forward(tape, store, f)?;
        let pooled = tape.mean_axes(f, &[2])?;
        let ctx = self.context.forward(tape, store, pooled)?;
        tape.add(conv, ctx)
    }

    /// Per-variable gates `[B, C, 1, 1]` from the `(C, N)` average of `f`.
    pub fn cross_gates(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let [b, c, _, _] = dims4(tape.shape(f))?;
        let pooled = tape.mean_axes(f, &[1, 2])?;
        let d = tape.shape(f)[3];
        let pooled = tape.reshape(pooled, &[b, d])?;
        let logits = self.cross.forward(tape, store, pooled)?;
        if tape.shape(logits)[1] != c {
            return Err(Error::Shape(format!("cross gate built for {} variables, input has {}", tape.shape(logits)[1], c)));
        }
        let g = tape.sigmoid(logits);
        tape.reshape(g, &[b, c, 1, 1])
    }

    pub fn cross_branch(&self, tape: &mut Tape, store: &ParamStore, f_inter: Var) -> Result<Var> {
        let g = self.cross_gates(tape, store, f_inter)?;
        tape.mul(g, f_inter)
    }

    /// Softmax branch weights `[B, C, 3]` from the token-averaged branches.
    pub fn branch_gates(&self, tape: &mut Tape, store: &ParamStore, branches: [Var; 3]) -> Result<Var> {
        let [b, c, _, d] = dims4(tape.shape(branches[0]))?;
        let mut desc = Vec::with_capacity(3);
        for f in branches {
            let m = tape.mean_axes(f, &[2])?;
            desc.push(tape.reshape(m, &[b, c, d])?);
        }
        let desc = tape.concat(&desc, 2)?;
        let logits = self.branch_gate.forward(tape, store, desc)?;
        tape.softmax(logits, 2)
    }

    /// `LayerNorm(fused + z)` with affine, and its mean over `N`.
    pub fn norm_and_pool(&self, tape: &mut Tape, store: &ParamStore, fused: Var, z: Var) -> Result<(Var, Var)> {
        let s = tape.add(fused, z)?;
        self.norm_only(tape, store, s)
    }

    fn norm_only(&self, tape: &mut Tape, store: &ParamStore, s: Var) -> Result<(Var, Var)> {
        let [b, c, _, d] = dims4(tape.shape(s))?;
        let n = tape.layer_norm(s, self.eps)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let n = tape.mul(n, gamma)?;
        let out = tape.add(n, beta)?;
        let pooled = tape.mean_axes(out, &[2])?;
        let pooled = tape.reshape(pooled, &[b, c, d])?;
        Ok((out, pooled))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<TibOutput> {
        dims4(tape.shape(z))?;
        if self.mode == TibMode::Passthrough {
            let (output, pooled) = self.norm_only(tape, store, z)?;
            return Ok(TibOutput { output, pooled, gates: None });
        }
        let f_intra = self.intra_branch(tape, store, z)?;
        if self.mode == TibMode::IntraOnly {
            let (output, pooled) = self.norm_and_pool(tape, store, f_intra, z)?;
            return Ok(TibOutput { output, pooled, gates: None });
        }
        let f_inter = self.inter_branch(tape, store, f_intra)?;
        let f_cross = self.cross_branch(tape, store, f_inter)?;
        let (fused, gates) = match self.mode {
            TibMode::UngatedSum => {
                let s = tape.add(f_intra, f_inter)?;
                (tape.add(s, f_cross)?, None)
            }
            _ => {
                let gates = self.branch_gates(tape, store, [f_intra, f_inter, f_cross])?;
                let shape = tape.shape(gates).to_vec();
                let mut fused = None;
                for (i, f) in [f_intra, f_inter, f_cross].into_iter().enumerate() {
                    let g = tape.slice(gates, 2, i, 1)?;
                    let g = tape.reshape(g, &[shape[0], shape[1], 1, 1])?;
                    let term = tape.mul(g, f)?;
                    fused = Some(match fused {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                (fused.expect("three branches"), Some(gates))
            }
        };
        let (output, pooled) = self.norm_and_pool(tape, store, fused, z)?;
        Ok(TibOutput { output, pooled, gates })
    }
}
