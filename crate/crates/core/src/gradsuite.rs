//! Finite-difference checks over every tape op and every model component,
//! bundled for the command line and for release gating.

use crate::autodiff::{Conv1dSpec, Tape, Var};
use crate::cascade::Cascade;
use crate::config::ModelConfig;
use crate::empd::PatchEmbedding;
use crate::error::Result;
use crate::gradcheck::{check_inputs, check_params, summarize, GradCheckConfig, GradCheckReport};
use crate::model::{Dmsc, ForwardOptions};
use crate::moe::AsrMoe;
use crate::params::{ParamStore, Rng};
use crate::tensor::Tensor;
use crate::tib::{Tib, TibMode};

/// The small model the end-to-end check runs on.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_vars: 2,
        lookback: 16,
        horizon: 4,
        d_model: 8,
        n_layers: 2,
        p_min: 4,
        p_max: 8,
        n_global: 1,
        n_local: 2,
        top_k: 1,
        ..Default::default()
    }
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn op_cases(rng: &mut Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut u = |s: &[usize]| rng.tensor_uniform(s, 1.0);
    let a = u(&[2, 3, 4]);
    let b = u(&[3, 1]);
    let pos = u(&[4]).map(|v| v.abs() + 0.5);
    let kinkless = u(&[3, 5]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let ppos = u(&[3, 5]).map(|v| v.abs() + 0.5);
    vec![
        ("matmul", vec![u(&[3, 3]), u(&[3, 3])], |t, v| t.matmul(v[0], v[1])),
        ("batched_matmul", vec![u(&[2, 3, 4, 5]), u(&[3, 5, 2])], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        ("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        ("div", vec![a.clone(), pos], |t, v| t.div(v[0], v[1])),
        ("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.5))),
        ("sigmoid", vec![kinkless.clone()], |t, v| Ok(t.sigmoid(v[0]))),
        ("relu", vec![kinkless.clone()], |t, v| Ok(t.relu(v[0]))),
        ("gelu", vec![kinkless.clone()], |t, v| Ok(t.gelu(v[0]))),
        ("exp", vec![kinkless.clone()], |t, v| Ok(t.exp(v[0]))),
        ("log", vec![ppos.clone()], |t, v| Ok(t.log(v[0]))),
        ("sqrt", vec![ppos], |t, v| Ok(t.sqrt(v[0]))),
        ("square", vec![kinkless], |t, v| Ok(t.square(v[0]))),
        ("conv1d", vec![u(&[2, 4, 7]), u(&[3, 4, 3])], |t, v| t.conv1d(v[0], v[1], Conv1dSpec::same(3, 1, 1))),
        ("conv1d_depthwise_dilated", vec![u(&[2, 4, 7]), u(&[4, 1, 3])], |t, v| {
            t.conv1d(v[0], v[1], Conv1dSpec::same(3, 2, 4))
        }),
        ("pad_unfold", vec![u(&[2, 3, 11])], |t, v| {
            let p = t.pad_replicate_right(v[0], 1)?;
            t.unfold(p, 4, 2)
        }),
        ("softmax", vec![a.clone()], |t, v| t.softmax(v[0], 2)),
        ("layer_norm", vec![a.clone()], |t, v| t.layer_norm(v[0], 1e-5)),
        ("mean", vec![a.clone()], |t, v| t.mean_axes(v[0], &[0, 2])),
        ("max", vec![a.clone()], |t, v| t.max_axis(v[0], 1)),
        ("layout", vec![a.clone(), u(&[2, 2, 4])], |t, v| {
            let p = t.permute(v[0], &[0, 2, 1])?;
            let p = t.reshape(p, &[2, 3, 4])?;
            let c = t.concat(&[p, v[1]], 1)?;
            t.slice(c, 1, 1, 3)
        }),
        ("select_scatter", vec![a], |t, v| {
            let s = t.index_select(v[0], &[1, 1, 0])?;
            t.scatter_rows(s, &[0, 2, 2], 3)
        }),
    ]
}

/// Run every check; one report per op or component.
pub fn run(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(2024);
    let mut reports = Vec::new();
    for (name, inputs, f) in op_cases(&mut rng) {
        reports.push(check_inputs(&format!("op/{name}"), &inputs, cfg, f)?);
    }

    // patch embedding with a sliced projector
    {
        let mut store = ParamStore::new();
        let emb = PatchEmbedding::new(&mut store, &mut rng, "embed", 6, 5);
        let x = rng.tensor_uniform(&[2, 3, 4, 4], 1.0);
        let r = check_params(&store, None, cfg, |t, s| {
            let xv = t.constant(x.clone());
            emb.embed(t, s, xv)
        })?;
        let mut rep = summarize("embed", &r);
        rep.merge(&check_inputs("embed", std::slice::from_ref(&x), cfg, |t, v| emb.embed(t, &store, v[0]))?);
        reports.push(rep);
    }

    // triad block branches and the whole block
    {
        let mut store = ParamStore::new();
        let tib = Tib::new(&mut store, &mut rng, "tib", 3, 4, 3, 3, 2, 1e-5, TibMode::Full);
        let z = rng.tensor_uniform(&[2, 3, 5, 4], 1.0);
        reports.push(check_inputs("tib/intra", std::slice::from_ref(&z), cfg, |t, v| tib.intra_branch(t, &store, v[0]))?);
        reports.push(check_inputs("tib/inter", std::slice::from_ref(&z), cfg, |t, v| tib.inter_branch(t, &store, v[0]))?);
        reports.push(check_inputs("tib/cross", &[z], cfg, |t, v| tib.cross_branch(t, &store, v[0]))?);

        let mut store = ParamStore::new();
        let tib = Tib::new(&mut store, &mut rng, "tib", 3, 6, 3, 3, 2, 1e-5, TibMode::Full);
        let z = rng.tensor_uniform(&[2, 3, 4, 6], 1.0);
        let r = check_params(&store, None, cfg, |t, s| {
            let zv = t.constant(z.clone());
            Ok(tib.forward(t, s, zv)?.output)
        })?;
        let mut rep = summarize("tib", &r);
        rep.merge(&check_inputs("tib", &[z], cfg, |t, v| Ok(tib.forward(t, &store, v[0])?.output))?);
        reports.push(rep);
    }

    // cascade, schedule held fixed
    {
        let cc = ModelConfig { n_vars: 2, lookback: 24, horizon: 4, d_model: 8, n_layers: 2, p_min: 4, p_max: 12, ..Default::default() };
        let mut store = ParamStore::new();
        let cas = Cascade::new(&mut store, &mut rng, &cc);
        let x = rng.tensor_uniform(&[2, 2, 24], 1.0);
        let sched = cas.describe_schedule(&store, &x)?;
        let r = check_params(&store, None, cfg, |t, s| {
            let xv = t.constant(x.clone());
            let out = cas.forward(t, s, xv, &sched)?;
            t.concat(&out.features, 2)
        })?;
        let mut rep = summarize("cascade", &r);
        rep.merge(&check_inputs("cascade", &[x], cfg, |t, v| {
            let out = cas.forward(t, &store, v[0], &sched)?;
            t.concat(&out.features, 2)
        })?);
        reports.push(rep);
    }

    // expert head, selection held fixed
    {
        let mut store = ParamStore::new();
        let moe = AsrMoe::new(&mut store, &mut rng, 4, 3, 1, 3, 2, 2);
        let fs = [rng.tensor_uniform(&[2, 2, 4], 1.0), rng.tensor_uniform(&[2, 2, 4], 1.0)];
        let sel = {
            let mut t = Tape::new();
            let vs: Vec<Var> = fs.iter().map(|f| t.constant(f.clone())).collect();
            let out = moe.forward(&mut t, &store, &vs, &[1.0, 0.8], None, 0.01, false)?;
            out.routes.iter().map(|r| r.selected.clone()).collect::<Vec<_>>()
        };
        let head = |t: &mut Tape, s: &ParamStore, vs: &[Var]| -> Result<Var> {
            let out = moe.forward(t, s, vs, &[1.0, 0.8], Some(&sel), 0.01, false)?;
            let b = t.reshape(out.balance, &[1, 1, 1])?;
            t.add(out.prediction, b)
        };
        let r = check_params(&store, None, cfg, |t, s| {
            let vs: Vec<Var> = fs.iter().map(|f| t.constant(f.clone())).collect();
            head(t, s, &vs)
        })?;
        let mut rep = summarize("moe", &r);
        rep.merge(&check_inputs("moe", &fs, cfg, |t, v| head(t, &store, v))?);
        reports.push(rep);
    }

    reports.push(check_model(&micro_config(), 7, cfg)?);
    Ok(reports)
}

/// End-to-end parameter gradients of `loss = mse + balance` for a model
/// built from `mcfg`, with the patch schedule and expert selection fixed
/// to the ones the unperturbed model picks.
pub fn check_model(mcfg: &ModelConfig, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = Dmsc::new(mcfg.clone(), seed)?;
    let mut rng = Rng::new(seed + 1);
    let x = rng.tensor_uniform(&[2, mcfg.n_vars, mcfg.lookback], 1.0);
    let y = rng.tensor_uniform(&[2, mcfg.n_vars, mcfg.horizon], 1.0);
    let opts = {
        let mut t = Tape::new();
        let out = model.forward(&mut t, &x, &ForwardOptions::default())?;
        ForwardOptions {
            schedule: Some(out.schedule),
            selection: Some(out.routing.iter().map(|r| r.selected.clone()).collect()),
        }
    };
    let r = check_params(&model.store, None, cfg, |t, s| {
        let out = model.forward_with(t, s, &x, &opts)?;
        let (loss, _) = crate::train::total_loss(t, out.prediction, &y, out.balance)?;
        Ok(loss)
    })?;
    Ok(summarize("model", &r))
}
