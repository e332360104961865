//! Expert-head invariants checked against plain-loop reference code.

use dmsc_core::moe::{topk_local, update_history, AsrMoe};
use dmsc_core::nn::{Activation, Mlp};
use dmsc_core::{ParamStore, Rng, Tape, Tensor, Var};
use proptest::prelude::*;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Evaluate an MLP on one row with nested loops.
fn mlp_row(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (i, layer) in mlp.layers.iter().enumerate() {
        let w = store.value(layer.w);
        let b = store.value(layer.b.unwrap());
        let (din, dout) = (layer.d_in, layer.d_out);
        let mut out = b.data().to_vec();
        for o in 0..dout {
            for k in 0..din {
                out[o] += h[k] * w.data()[k * dout + o];
            }
        }
        if i < last {
            out = out
                .into_iter()
                .map(|v| match mlp.act {
                    Activation::Relu => v.max(0.0),
                    Activation::Gelu => gelu(v),
                })
                .collect();
        }
        h = out;
    }
    h
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Brute-force dense prediction for one scale: every expert on every row.
fn dense_reference(store: &ParamStore, moe: &AsrMoe, f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, c, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let h = moe.horizon;
    let e = moe.n_experts();
    let mut omegas = Vec::new();
    let mut pred = vec![0.0; b * c * h];
    for r in 0..b {
        let mut pooled = vec![0.0; d];
        for v in 0..c {
            for k in 0..d {
                pooled[k] += f.data()[(r * c + v) * d + k];
            }
        }
        pooled.iter_mut().for_each(|p| *p /= c as f64);
        let omega = softmax(&mlp_row(store, &moe.router, &pooled));
        assert_eq!(omega.len(), e);
        for v in 0..c {
            let row = &f.data()[(r * c + v) * d..(r * c + v + 1) * d];
            for (j, expert) in moe.globals.iter().chain(&moe.locals).enumerate() {
                let y = mlp_row(store, expert, row);
                for t in 0..h {
                    pred[(r * c + v) * h + t] += omega[j] * y[t];
                }
            }
        }
        omegas.extend(omega);
    }
    (omegas, pred)
}

fn head(seed: u64, m: usize, n: usize, k: usize, scales: usize) -> (ParamStore, AsrMoe) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let moe = AsrMoe::new(&mut store, &mut rng, 5, 3, m, n, k, scales);
    (store, moe)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn routing_distribution_matches_reference(seed in 0u64..1000) {
        let (store, moe) = head(seed, 2, 3, 2, 1);
        let mut rng = Rng::new(seed + 17);
        let ft = rng.tensor_uniform(&[3, 2, 5], 2.0);
        let mut tape = Tape::new();
        let f = tape.constant(ft.clone());
        let r = moe.route(&mut tape, &store, f, None).unwrap();
        let omega = tape.value(r.omega).clone();
        let (reference, _) = dense_reference(&store, &moe, &ft);
        for (a, b) in omega.data().iter().zip(&reference) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for row in omega.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let hat = tape.value(r.local_weights.unwrap()).clone();
        for (i, row) in hat.data().chunks(3).enumerate() {
            let local_mass: f64 = omega.data()[i * 5 + 2..i * 5 + 5].iter().sum();
            prop_assert!(row.iter().filter(|&&v| v != 0.0).count() <= 2);
            prop_assert!((row.iter().sum::<f64>() - local_mass).abs() < 1e-9);
            for (j, &v) in row.iter().enumerate() {
                prop_assert_eq!(v != 0.0, r.selected[i].contains(&j));
            }
        }
    }

    #[test]
    fn sparse_equals_dense_when_all_locals_kept(seed in 0u64..1000) {
        let (store, moe) = head(seed, 2, 3, 3, 1);
        let mut rng = Rng::new(seed + 3);
        let ft = rng.tensor_uniform(&[4, 2, 5], 1.5);
        let mut tape = Tape::new();
        let f = tape.constant(ft.clone());
        let route = moe.route(&mut tape, &store, f, None).unwrap();
        let y = moe.mix(&mut tape, &store, f, &route).unwrap();
        let (_, dense) = dense_reference(&store, &moe, &ft);
        for (a, b) in tape.value(y).data().iter().zip(&dense) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn topk_preserves_local_mass(vals in prop::collection::vec(0.0f64..1.0, 12), k in 1usize..=4) {
        prop_assume!(vals.chunks(4).all(|r| r.iter().sum::<f64>() > 1e-6));
        let t = Tensor::new(&[3, 4], vals.clone()).unwrap();
        let (hat, sel) = topk_local(&t, k).unwrap();
        for (r, row) in hat.data().chunks(4).enumerate() {
            let orig = &vals[r * 4..r * 4 + 4];
            prop_assert_eq!(sel[r].len(), k);
            prop_assert!((row.iter().sum::<f64>() - orig.iter().sum::<f64>()).abs() < 1e-9);
            let min_kept = sel[r].iter().map(|&i| orig[i]).fold(f64::INFINITY, f64::min);
            for j in 0..4 {
                if !sel[r].contains(&j) {
                    prop_assert_eq!(row[j], 0.0);
                    prop_assert!(orig[j] <= min_kept);
                }
            }
        }
    }

    #[test]
    fn scale_weights_form_a_simplex(seed in 0u64..1000) {
        let (store, moe) = head(seed, 1, 2, 1, 3);
        let mut rng = Rng::new(seed);
        let mut tape = Tape::new();
        let fs: Vec<Var> = (0..3).map(|_| tape.constant(rng.tensor_uniform(&[2, 2, 5], 1.0))).collect();
        let w = moe.temporal_weights(&mut tape, &store, &fs, &[1.0, 0.5, 0.25]).unwrap();
        for row in tape.value(w).data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn identical_scales_give_uniform_weights_under_symmetric_head() {
    let (mut store, moe) = head(1, 1, 2, 1, 3);
    moe.temporal.last().zero(&mut store);
    let mut rng = Rng::new(1);
    let ft = rng.tensor_uniform(&[2, 2, 5], 1.0);
    let mut tape = Tape::new();
    let f = tape.constant(ft);
    let w = moe.temporal_weights(&mut tape, &store, &[f, f, f], &[1.0; 3]).unwrap();
    for &v in tape.value(w).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn history_follows_hand_rolled_recurrence() {
    let mut h = vec![1.0; 3];
    let mut reference = [1.0f64; 3];
    let batches = [
        vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        vec![0.2, 0.3, 0.5, 0.4, 0.4, 0.2],
        vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
    ];
    for w in &batches {
        update_history(&mut h, &Tensor::new(&[2, 3], w.clone()).unwrap(), 0.9);
        for j in 0..3 {
            let mean = (w[j] + w[3 + j]) / 2.0;
            reference[j] = 0.9 * reference[j] + 0.1 * mean;
        }
    }
    for j in 0..3 {
        assert!((h[j] - reference[j]).abs() < 1e-15);
        assert!(h[j] > 0.0);
    }
    // first entry: 1 -> 1.0 -> 0.93 -> 0.837
    assert!((h[0] - 0.837).abs() < 1e-12);
}
