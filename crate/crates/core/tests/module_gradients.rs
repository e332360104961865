//! Finite-difference checks on every model component, the end-to-end loss,
//! and a deliberately broken adjoint that the checker must catch.

use dmsc_core::autodiff::AdjointFault;
use dmsc_core::gradcheck::{check_inputs, check_params, summarize, GradCheckConfig};
use dmsc_core::gradsuite::{check_model, micro_config, run};
use dmsc_core::moe::AsrMoe;
use dmsc_core::tib::{Tib, TibMode};
use dmsc_core::{ParamStore, Rng, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

#[test]
fn every_component_passes() {
    let reports = run(&GradCheckConfig::default()).unwrap();
    assert!(reports.len() > 20);
    for r in &reports {
        assert!(r.checked > 0, "{} checked nothing", r.label);
        assert!(r.passes(TOL), "{}: {} at {}", r.label, r.max_rel_err, r.worst);
    }
    for label in ["embed", "tib", "cascade", "moe", "model"] {
        assert!(reports.iter().any(|r| r.label == label), "missing {label}");
    }
}

#[test]
fn triad_block_at_reference_shape() {
    // B=2, C=3, N=4, D=6
    let mut store = ParamStore::new();
    let mut rng = Rng::new(11);
    let tib = Tib::new(&mut store, &mut rng, "tib", 3, 6, 3, 3, 2, 1e-5, TibMode::Full);
    let z = rng.tensor_uniform(&[2, 3, 4, 6], 1.0);
    // cross-gate weights see gradients near 3e-6 here; at h = 1e-5 the
    // difference quotient is dominated by roundoff (error grows as 1/h)
    let cfg = GradCheckConfig { step: 1e-4, ..Default::default() };
    let params = check_params(&store, None, &cfg, |t, s| {
        let zv = t.constant(z.clone());
        Ok(tib.forward(t, s, zv)?.output)
    })
    .unwrap();
    let mut rep = summarize("tib", &params);
    rep.merge(&check_inputs("tib", &[z], &cfg, |t, v| Ok(tib.forward(t, &store, v[0])?.output)).unwrap());
    assert!(rep.passes(TOL), "{} at {}", rep.max_rel_err, rep.worst);
}

#[test]
fn broken_sigmoid_adjoint_is_detected() {
    let bad = GradCheckConfig { fault: Some(AdjointFault::Sigmoid(1.5)), ..Default::default() };
    let model = check_model(&micro_config(), 7, &bad).unwrap();
    assert!(!model.passes(TOL), "fault went unnoticed: {}", model.max_rel_err);

    let mut rng = Rng::new(3);
    let x = rng.tensor_uniform(&[3, 4], 1.0);
    let op = check_inputs("sigmoid", &[x.clone()], &bad, |t, v| Ok(t.sigmoid(v[0]))).unwrap();
    assert!(op.max_rel_err > 0.1);
    let good = check_inputs("sigmoid", &[x], &GradCheckConfig::default(), |t, v| Ok(t.sigmoid(v[0]))).unwrap();
    assert!(good.passes(1e-6));
}

#[test]
fn unselected_local_experts_receive_no_gradient() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(5);
    let moe = AsrMoe::new(&mut store, &mut rng, 4, 3, 1, 4, 1, 1);
    let mut tape = Tape::new();
    let f = tape.constant(rng.tensor_uniform(&[1, 2, 4], 1.0));
    let out = moe.forward(&mut tape, &store, &[f], &[1.0], None, 0.01, false).unwrap();
    let selected = out.routes[0].selected[0].clone();
    assert_eq!(selected.len(), 1);
    let s = tape.sum_all(out.prediction);
    tape.backward(s).unwrap();
    let grads = tape.param_grads();
    let grad_of = |id| grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t.clone());
    for (j, expert) in moe.locals.iter().enumerate() {
        for layer in &expert.layers {
            let g = grad_of(layer.w);
            let nonzero = g.as_ref().is_some_and(|t: &Tensor| t.data().iter().any(|&v| v != 0.0));
            assert_eq!(nonzero, selected.contains(&j), "local expert {j}");
        }
    }
    // the router still learns through the kept weights
    let router_w = grad_of(moe.router.layers[0].w).unwrap();
    assert!(router_w.data().iter().any(|&v| v != 0.0));
}

#[test]
fn balance_term_matches_entropy_by_hand() {
    let rows = [[0.7, 0.2, 0.1], [0.25, 0.25, 0.5]];
    let second = [[1.0 / 3.0; 3]];
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(&[2, 3], rows.concat()).unwrap());
    let b = tape.constant(Tensor::new(&[1, 3], second.concat()).unwrap());
    let omegas: [Var; 2] = [a, b];
    let lambda = 0.05;
    let v = AsrMoe::balance_loss(&mut tape, &omegas, lambda, false).unwrap();
    let entropy = |r: &[f64]| -r.iter().map(|p| p * p.ln()).sum::<f64>();
    let expected = lambda * (entropy(&rows[0]) + entropy(&rows[1]) + entropy(&second[0])) / 3.0;
    assert!((tape.value(v).item() - expected).abs() < 1e-15);
    let flipped = AsrMoe::balance_loss(&mut tape, &omegas, lambda, true).unwrap();
    assert!((tape.value(flipped).item() + expected).abs() < 1e-15);
}
