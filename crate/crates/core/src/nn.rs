//! Small building blocks shared by the model components.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{fan_in_uniform, ParamId, ParamStore, Rng};
use crate::tensor::Tensor;

/// Affine map along the last axis: `x @ w + b`, with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(rng, &[d_in, d_out], d_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b: Some(b), d_in, d_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b: Some(b), d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Zero the weights and bias in place.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers
/// (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, widths: &[usize], act: Activation) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i < last {
                x = self.act.apply(tape, x);
            }
        }
        Ok(x)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.layers.iter().for_each(|l| l.zero(store));
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("empty mlp")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_applies_along_last_axis() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2);
        store.set(lin.w, Tensor::new(&[3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap()).unwrap();
        store.set(lin.b.unwrap(), Tensor::vector(&[0.5, -0.5])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1, 3], vec![1., 2., 3., 0., 0., 0.]).unwrap());
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 2]);
        assert_eq!(tape.value(y).data(), &[4.5, 4.5, 0.5, -0.5]);
    }

    #[test]
    fn mlp_depth_and_shape() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[4, 8, 8, 3], Activation::Gelu);
        assert_eq!(mlp.depth(), 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[5, 4]));
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[5, 3]);
    }
}
