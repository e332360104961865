//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node in an
//! append-only arena. Nodes are created in topological order by
//! construction, so [`Tape::backward`] replays adjoints by walking the arena
//! back to front. Nothing is shared between tapes; a fresh tape is built
//! for every step.

mod kernels;

use std::collections::HashMap;

pub use kernels::Conv1dSpec;
use kernels::{ConvDims, MatmulDims};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, reduce_to_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var, MatmulDims),
    Conv1d(Var, Var, Conv1dSpec, ConvDims),
    Unfold { x: Var, size: usize, step: usize, count: usize },
    PadReplicateRight(Var, usize),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var, usize),
    LayerNorm(Var, Vec<f64>),
    Sum(Var),
    MaxAxis { x: Var, argmax: Vec<usize> },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Deliberately wrong adjoints, used as negative controls for the gradient
/// checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdjointFault {
    /// Scale the sigmoid adjoint by the given factor.
    Sigmoid(f64),
}

/// Lower clamp applied inside [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<AdjointFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: AdjointFault) -> Self {
        Self { fault: Some(fault), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A leaf that gradients flow into.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Bind a stored parameter to this tape. Repeated calls return the same
    /// node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of every bound parameter, in parameter-id order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.nodes[v.0].grad.clone().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = kernels::broadcast_binary(self.value(a), self.value(b), f)?;
        Ok(self.derived(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.derived(value, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same-shape product")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.derived(value, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        self.derived(value, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.derived(value, Op::Exp(a), &[a])
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`]; the clamped
    /// region has zero gradient.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.derived(value, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.derived(value, Op::Sqrt(a), &[a])
    }

    // ---- structured ops ----------------------------------------------

    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let value = kernels::matmul_forward(self.value(a), self.value(b), &dims);
        Ok(self.derived(value, Op::MatMul(a, b, dims), &[a, b]))
    }

    /// 1-D convolution of `x: [B, Cin, L]` with `w: [Cout, Cin/groups, K]`
    /// using zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Result<Var> {
        let dims = kernels::conv_dims(self.shape(x), self.shape(w), &spec)?;
        let value = kernels::conv1d_forward(self.value(x), self.value(w), &spec, &dims);
        Ok(self.derived(value, Op::Conv1d(x, w, spec, dims), &[x, w]))
    }

    /// Patches of length `size` taken every `step` positions along the last
    /// axis: `[.., L] -> [.., N, size]` with `N = (L - size) / step + 1`.
    /// The input must already be padded so the last patch ends at `L`.
    pub fn unfold(&mut self, x: Var, size: usize, step: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Shape("unfold on a scalar".into()))?;
        if size == 0 || step == 0 {
            return Err(Error::Shape("unfold needs size and step >= 1".into()));
        }
        if size > len {
            return Err(Error::InputTooShort(format!("patch length {} exceeds sequence length {}", size, len)));
        }
        if !(len - size).is_multiple_of(step) {
            return Err(Error::Shape(format!(
                "length {} leaves a partial patch for size {} step {}; pad first",
                len, size, step
            )));
        }
        let count = (len - size) / step + 1;
        let value = kernels::unfold_forward(self.value(x), size, step, count);
        Ok(self.derived(value, Op::Unfold { x, size, step, count }, &[x]))
    }

    /// Repeat the final element of the last axis `n` more times.
    pub fn pad_replicate_right(&mut self, x: Var, n: usize) -> Result<Var> {
        match self.shape(x).last() {
            None | Some(0) => return Err(Error::Shape("replication pad of an empty axis".into())),
            _ => {}
        }
        if n == 0 {
            return Ok(x);
        }
        let value = kernels::pad_replicate_right_forward(self.value(x), n);
        Ok(self.derived(value, Op::PadReplicateRight(x, n), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let value = kernels::softmax_forward(self.value(x), axis);
        Ok(self.derived(value, Op::Softmax(x, axis), &[x]))
    }

    /// Normalize to zero mean and unit variance over the last axis (no
    /// affine transform).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank == 0 {
            return Err(Error::Shape("layer_norm on a scalar".into()));
        }
        self.check_axis(x, rank - 1)?;
        let (value, rstd) = kernels::layer_norm_forward(self.value(x), eps);
        Ok(self.derived(value, Op::LayerNorm(x, rstd), &[x]))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        match self.shape(x).get(axis) {
            None => Err(Error::Shape(format!("axis {} out of range for {:?}", axis, self.shape(x)))),
            Some(0) => Err(Error::Shape(format!("axis {} of {:?} is empty", axis, self.shape(x)))),
            Some(_) => Ok(()),
        }
    }

    // ---- reductions --------------------------------------------------

    fn reduced_shape(&self, x: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let mut shape = self.shape(x).to_vec();
        for &a in axes {
            self.check_axis(x, a)?;
            shape[a] = 1;
        }
        Ok(shape)
    }

    /// Sum over `axes`, keeping them as length-1 axes.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.reduced_shape(x, axes)?;
        let value = reduce_to_shape(self.value(x), &shape);
        Ok(self.derived(value, Op::Sum(x), &[x]))
    }

    /// Mean over `axes`, keeping them as length-1 axes.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x).get(a).copied().unwrap_or(0)).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.derived(value, Op::Sum(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Maximum over one axis, keeping it as a length-1 axis. Ties resolve to
    /// the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.reduced_shape(x, &[axis])?;
        let (outer, len, inner) = kernels::split_axis(self.shape(x), axis);
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for a in 0..outer {
            for i in 0..inner {
                let mut best = (a * len) * inner + i;
                for j in 1..len {
                    let at = (a * len + j) * inner + i;
                    if xs[at] > xs[best] {
                        best = at;
                    }
                }
                data.push(xs[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.derived(value, Op::MaxAxis { x, argmax }, &[x]))
    }

    // ---- layout ------------------------------------------------------

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.derived(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {} out of range for {:?}", axis, base)));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat shapes {:?} and {:?} differ off axis {}", base, s, axis)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = vec![0.0; numel(&shape)];
        let mut start = 0;
        for &v in xs {
            let t = self.value(v);
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * total + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(src);
            }
            start += len;
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.derived(value, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Contiguous range `[start, start + len)` of one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!("slice {}..{} of axis {} in {:?}", start, start + len, axis, shape)));
        }
        let (outer, full, inner) = kernels::split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&xs[from..from + len * inner]);
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.derived(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Rows of the leading axis, in the given order.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.first().ok_or_else(|| Error::Shape("index_select on a scalar".into()))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {} out of range for {:?}", bad, shape)));
        }
        let row = numel(&shape[1..]);
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            data.extend_from_slice(&xs[r * row..(r + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.derived(value, Op::IndexSelect(x, rows.to_vec()), &[x]))
    }

    /// Place the rows of `src` at `rows` of a zero tensor with `total` rows,
    /// adding where indices repeat. Adjoint of [`Tape::index_select`].
    pub fn scatter_rows(&mut self, src: Var, rows: &[usize], total: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if shape.first() != Some(&rows.len()) {
            return Err(Error::Shape(format!("scatter of {:?} with {} indices", shape, rows.len())));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::Shape(format!("row {} out of range for {} rows", bad, total)));
        }
        let row = numel(&shape[1..]);
        let mut out_shape = shape;
        out_shape[0] = total;
        let mut value = Tensor::zeros(&out_shape);
        let xs = self.value(src).data().to_vec();
        for (i, &r) in rows.iter().enumerate() {
            for (d, s) in value.data_mut()[r * row..(r + 1) * row].iter_mut().zip(&xs[i * row..(i + 1) * row]) {
                *d += s;
            }
        }
        Ok(self.derived(value, Op::ScatterRows(src, rows.to_vec()), &[src]))
    }

    // ---- backward ----------------------------------------------------

    /// Populate gradients of every node that `loss` depends on. The seed is
    /// a tensor of ones shaped like `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed = Tensor::ones(self.shape(loss));
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.adjoint(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&c),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    fn adjoint(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let unary = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let xs = val(x).data();
            let ys = node.value.data();
            let data = g.data().iter().zip(xs).zip(ys).map(|((&gv, &xv), &yv)| f(gv, xv, yv)).collect();
            Tensor::new(val(x).shape(), data)
        };
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to_shape(g, val(*a).shape())),
                (*b, reduce_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to_shape(g, val(*a).shape())),
                (*b, reduce_to_shape(&g.map(|x| -x), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let mut out = vec![];
                if rg(*a) {
                    let ga = kernels::broadcast_binary(g, val(*b), |x, y| x * y)?;
                    out.push((*a, reduce_to_shape(&ga, val(*a).shape())));
                }
                if rg(*b) {
                    let gb = kernels::broadcast_binary(g, val(*a), |x, y| x * y)?;
                    out.push((*b, reduce_to_shape(&gb, val(*b).shape())));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = vec![];
                if rg(*a) {
                    let ga = kernels::broadcast_binary(g, val(*b), |x, y| x / y)?;
                    out.push((*a, reduce_to_shape(&ga, val(*a).shape())));
                }
                if rg(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy = kernels::broadcast_binary(g, &node.value, |x, y| x * y)?;
                    let gb = kernels::broadcast_binary(&gy, val(*b), |x, y| -x / y)?;
                    out.push((*b, reduce_to_shape(&gb, val(*b).shape())));
                }
                out
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b, dims) => {
                let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g, dims, rg(*a), rg(*b));
                ga.map(|t| (*a, t)).into_iter().chain(gb.map(|t| (*b, t))).collect()
            }
            Op::Conv1d(x, w, spec, dims) => {
                let (gx, gw) = kernels::conv1d_backward(val(*x), val(*w), g, spec, dims);
                vec![(*x, gx), (*w, gw)]
            }
            Op::Unfold { x, size, step, count } => {
                vec![(*x, kernels::unfold_backward(g, val(*x).shape(), *size, *step, *count))]
            }
            Op::PadReplicateRight(x, n) => {
                vec![(*x, kernels::pad_replicate_right_backward(g, val(*x).shape(), *n))]
            }
            Op::Sigmoid(x) => {
                let k = match self.fault {
                    Some(AdjointFault::Sigmoid(k)) => k,
                    None => 1.0,
                };
                vec![(*x, unary(*x, &|gv, _, y| k * gv * y * (1.0 - y))?)]
            }
            Op::Relu(x) => vec![(*x, unary(*x, &|gv, xv, _| if xv > 0.0 { gv } else { 0.0 })?)],
            Op::Gelu(x) => vec![(*x, unary(*x, &|gv, xv, _| gv * kernels::gelu_grad(xv))?)],
            Op::Exp(x) => vec![(*x, unary(*x, &|gv, _, y| gv * y)?)],
            Op::Log(x) => {
                vec![(*x, unary(*x, &|gv, xv, _| if xv > LOG_FLOOR { gv / xv } else { 0.0 })?)]
            }
            Op::Sqrt(x) => vec![(*x, unary(*x, &|gv, _, y| gv * 0.5 / y)?)],
            Op::Softmax(x, axis) => vec![(*x, kernels::softmax_backward(&node.value, g, *axis))],
            Op::LayerNorm(x, rstd) => vec![(*x, kernels::layer_norm_backward(&node.value, rstd, g))],
            Op::Sum(x) => {
                let shape = val(*x).shape();
                let expanded = kernels::broadcast_binary(&Tensor::zeros(shape), g, |_, y| y)?;
                vec![(*x, expanded)]
            }
            Op::MaxAxis { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&at, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[at] += gv;
                }
                vec![(*x, gx)]
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Concat(xs, axis) => {
                let mut out = Vec::with_capacity(xs.len());
                let total = g.shape()[*axis];
                let (outer, _, inner) = kernels::split_axis(g.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    let mut data = Vec::with_capacity(val(v).len());
                    for o in 0..outer {
                        let from = (o * total + start) * inner;
                        data.extend_from_slice(&g.data()[from..from + len * inner]);
                    }
                    out.push((v, Tensor::new(val(v).shape(), data)?));
                    start += len;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape();
                let (outer, full, inner) = kernels::split_axis(shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    gx.data_mut()[to..to + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::IndexSelect(x, rows) => {
                let shape = val(*x).shape();
                let row = numel(&shape[1..]);
                let mut gx = Tensor::zeros(shape);
                for (i, &r) in rows.iter().enumerate() {
                    for (d, s) in gx.data_mut()[r * row..(r + 1) * row].iter_mut().zip(&g.data()[i * row..(i + 1) * row]) {
                        *d += s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ScatterRows(src, rows) => {
                let shape = val(*src).shape();
                let row = numel(&shape[1..]);
                let mut data = Vec::with_capacity(val(*src).len());
                for &r in rows {
                    data.extend_from_slice(&g.data()[r * row..(r + 1) * row]);
                }
                vec![(*src, Tensor::new(shape, data)?)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let c = tape.constant(t(&[2, 1], &[3., 4.]));
        let d = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(d).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(msg.starts_with("dimension error"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_batch_axes() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.input(t(&[1, 2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1, 1]);
        assert_eq!(tape.value(c).data(), &[3., 7.]);
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[4., 6.]);
    }

    #[test]
    fn conv1d_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4], &[1., 2., 3., 4.]));
        let w = tape.constant(t(&[1, 1, 3], &[1., 1., 1.]));
        let y = tape.conv1d(x, w, Conv1dSpec::same(3, 1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 6., 9., 7.]);
    }

    #[test]
    fn conv1d_dilated_hand_example() {
        // out[t] = x[t-2] + x[t+2] with zero padding 2 on both sides
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 5], &[1., 2., 3., 4., 5.]));
        let w = tape.constant(t(&[1, 1, 3], &[1., 0., 1.]));
        let y = tape.conv1d(x, w, Conv1dSpec::same(3, 2, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 4., 6., 2., 3.]);
    }

    #[test]
    fn conv1d_depthwise_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[2, 2, 3], &data));
        let w = tape.constant(t(&[2, 1, 3], &[0., 1., 0., 0., 1., 0.]));
        let y = tape.conv1d(x, w, Conv1dSpec::same(3, 1, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv1d_too_short_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5]));
        let err = tape.conv1d(x, w, Conv1dSpec::valid()).unwrap_err();
        assert!(matches!(err, Error::InputTooShort(_)));
    }

    #[test]
    fn unfold_counts_and_coverage_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[1, 10], (0..10).map(f64::from).collect()).unwrap());
        let u = tape.unfold(x, 4, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 4, 4]);
        assert_eq!(&tape.value(u).data()[..4], &[0., 1., 2., 3.]);
        let s = tape.sum_all(u);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 2., 2., 2., 2., 2., 2., 1., 1.]);

        let y = tape.input(Tensor::zeros(&[1, 4]));
        let v = tape.unfold(y, 4, 2).unwrap();
        assert_eq!(tape.shape(v), &[1, 1, 4]);
        let z = tape.input(Tensor::zeros(&[1, 3]));
        assert!(tape.unfold(z, 4, 2).is_err());
    }

    #[test]
    fn softmax_uniform_and_pad() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);

        let y = tape.constant(Tensor::vector(&[1., 2., 3.]));
        let p = tape.pad_replicate_right(y, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 3., 3.]);
    }

    #[test]
    fn empty_axis_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(tape.softmax(x, 1).is_err());
        assert!(tape.layer_norm(x, 1e-5).is_err());
        assert!(tape.softmax(x, 3).is_err());
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(&[3.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn scatter_and_select_are_adjoint() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s = tape.index_select(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(s).data(), &[5., 6., 1., 2.]);
        let back = tape.scatter_rows(s, &[2, 0], 3).unwrap();
        assert_eq!(tape.value(back).data(), &[1., 2., 0., 0., 5., 6.]);
        let total = tape.sum_all(back);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 0., 0., 1., 1.]);
    }
}
