use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dmsc_bench::{empd_scaling_in_vars, scaling_in_lookback, ScalingReport, ScalingSpec};
use dmsc_core::autodiff::AdjointFault;
use dmsc_core::gradcheck::{GradCheckConfig, GradCheckReport};
use dmsc_core::train::{evaluate, train_with, EpochLog, StepEvent};
use dmsc_core::{checkpoint, gradsuite, Dmsc, Error, ModelConfig, Split, Tensor, Variant, WindowedDataset};
use serde_json::json;

use crate::config::{identity, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{build_id, peak_rss_kib, Manifest, Timings};

pub const GRAD_TOL: f64 = 1e-4;
const MICRO_PARAM_LIMIT: usize = 10_000;

fn out_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|source| CliError::Output { path, source })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.into(), source })
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output { path: path.into(), source }
}

/// Worker cap from `DMSC_THREADS`, if set.
pub fn env_threads() -> Result<Option<usize>> {
    match std::env::var("DMSC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("DMSC_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = env_threads()? {
        cfg.train.threads = n;
    }
    Ok(cfg)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub variant: Option<Variant>,
    pub dump_routing: bool,
    /// Write zero for every wall-clock field.
    pub no_timing: bool,
}

pub fn parse_variant(name: &str) -> Result<Variant> {
    name.parse::<Variant>().map_err(|e| match e {
        Error::Config(msg) => CliError::Usage(msg),
        other => CliError::Core(other),
    })
}

const METRICS_HEADER: &str = "epoch,train_mse,val_mse,val_mae,lr,elapsed_s";

fn metrics_row(e: &EpochLog, no_timing: bool) -> String {
    let elapsed = if no_timing { 0.0 } else { e.elapsed_s };
    format!("{},{},{},{},{},{}", e.epoch, e.train_mse, e.val_mse, e.val_mae, e.lr, elapsed)
}

fn routing_rows(w: &mut impl Write, ev: &StepEvent) -> std::io::Result<()> {
    for (scale, snap) in ev.routing.iter().enumerate() {
        let e = snap.omega.shape()[1];
        for (row, omega) in snap.omega.data().chunks(e).enumerate() {
            let sel: Vec<String> = snap.selected.get(row).map(|s| s.iter().map(usize::to_string).collect()).unwrap_or_default();
            let omega: Vec<String> = omega.iter().map(f64::to_string).collect();
            writeln!(w, "{},{},{},{},{},{}", ev.epoch + 1, ev.step, scale, row, omega.join(","), sel.join(";"))?;
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub best_val_mse: f64,
    pub test_mse: f64,
    pub epochs: usize,
}

/// Train from a config file, writing checkpoint, metrics CSV and manifest.
pub fn train(args: &TrainArgs, command: &str) -> Result<TrainOutcome> {
    let clock = Instant::now();
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    let (frame, split, source) = cfg.load_data()?;
    let mcfg = cfg.model_for(&frame)?;
    let ds = WindowedDataset::new(&frame, &split, mcfg.lookback, mcfg.horizon)?;
    let tcfg = dmsc_core::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let mut model = Dmsc::new(mcfg.clone(), cfg.seed)?;

    ensure_dir(&args.out)?;
    let metrics_path = args.out.join("metrics.csv");
    let mut metrics = out_file(&args.out, "metrics.csv")?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(write_err(&metrics_path))?;
    let routing_path = args.out.join("routing.csv");
    let mut routing = if args.dump_routing && mcfg.variant.has_router() {
        let mut w = out_file(&args.out, "routing.csv")?;
        let (g, l) = mcfg.expert_counts();
        let cols: Vec<String> = (0..g + l).map(|j| format!("omega_{j}")).collect();
        writeln!(w, "epoch,step,scale,row,{},selected", cols.join(",")).map_err(write_err(&routing_path))?;
        Some(w)
    } else {
        None
    };

    eprintln!(
        "{command}: {} params, variant {}, {} train / {} val / {} test windows",
        model.n_params(),
        mcfg.variant,
        ds.n_windows(Split::Train),
        ds.n_windows(Split::Val),
        ds.n_windows(Split::Test)
    );
    let (mut step_err, mut epoch_err) = (None, None);
    let train_clock = Instant::now();
    let report = train_with(
        &mut model,
        &ds,
        &tcfg,
        &mut |ev| {
            if let Some(w) = routing.as_mut() {
                if let Err(e) = routing_rows(w, ev) {
                    step_err.get_or_insert(e);
                }
            }
        },
        &mut |e| {
            eprintln!("epoch {:>3}  train {:.6}  val {:.6}  mae {:.6}", e.epoch, e.train_mse, e.val_mse, e.val_mae);
            if let Err(err) = writeln!(metrics, "{}", metrics_row(e, args.no_timing)) {
                epoch_err.get_or_insert(err);
            }
        },
    )?;
    let train_s = train_clock.elapsed().as_secs_f64();
    if let Some(e) = step_err.or(epoch_err) {
        return Err(CliError::Output { path: args.out.clone(), source: e });
    }
    metrics.flush().map_err(write_err(&metrics_path))?;
    if let Some(mut w) = routing {
        w.flush().map_err(write_err(&routing_path))?;
    }

    let ckpt = args.out.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    let test = evaluate(&model, &ds, Split::Test, tcfg.batch_size, tcfg.threads, tcfg.raw_metrics)?;
    let best = report.best_val.unwrap_or_default();

    let mut outputs = vec!["model.ckpt".to_string(), "metrics.csv".to_string(), "manifest.json".to_string()];
    if args.dump_routing && mcfg.variant.has_router() {
        outputs.push("routing.csv".into());
    }
    let zero_if = |v: f64| if args.no_timing { 0.0 } else { v };
    let manifest = Manifest {
        command: command.into(),
        build_id: build_id(),
        seed: cfg.seed,
        variant: mcfg.variant.name().into(),
        config: RunConfig { model: mcfg.clone(), train: tcfg.clone(), ..cfg.clone() },
        data: Some(identity(&frame, ds.rows, &source)),
        timings: Timings { total_s: zero_if(clock.elapsed().as_secs_f64()), train_s: Some(zero_if(train_s)) },
        peak_rss_kib_approx: peak_rss_kib(),
        outputs,
        summary: json!({
            "params": model.n_params(),
            "epochs_run": report.epochs.len(),
            "best_epoch": report.best_epoch,
            "best_val_mse": best.mse,
            "best_val_mae": best.mae,
            "test_mse": test.mse,
            "test_mae": test.mae,
            "stopped_early": report.stopped_early,
            "w_hist": model.w_hist,
            "metrics_scale": if tcfg.raw_metrics { "raw" } else { "normalized" },
        }),
    };
    manifest.write(&args.out.join("manifest.json"))?;
    println!("best val mse {:.6} mae {:.6} (epoch {:?}); test mse {:.6} mae {:.6}", best.mse, best.mae, report.best_epoch, test.mse, test.mae);
    Ok(TrainOutcome { best_val_mse: best.mse, test_mse: test.mse, epochs: report.epochs.len() })
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub split: Split,
    pub horizon: Option<usize>,
    pub out: Option<PathBuf>,
}

fn load_checkpoint(path: &Path) -> Result<Dmsc> {
    if !path.exists() {
        return Err(CliError::Input {
            path: path.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    Ok(checkpoint::load(path)?)
}

fn dataset_for(model: &ModelConfig, cfg: &RunConfig) -> Result<(dmsc_core::SeriesFrame, WindowedDataset)> {
    let (frame, split, _) = cfg.load_data()?;
    if frame.n_vars() != model.n_vars {
        return Err(Error::Shape(format!("dataset has {} variables, checkpoint expects {}", frame.n_vars(), model.n_vars)).into());
    }
    let ds = WindowedDataset::new(&frame, &split, model.lookback, model.horizon)?;
    Ok((frame, ds))
}

pub fn eval(args: &EvalArgs) -> Result<dmsc_core::Metrics> {
    let cfg = load_config(&args.config, None)?;
    let model = load_checkpoint(&args.checkpoint)?;
    if let Some(h) = args.horizon {
        if h != model.cfg.horizon {
            return Err(CliError::Usage(format!("--horizon {h} does not match the checkpoint's horizon {}", model.cfg.horizon)));
        }
    }
    let (_, ds) = dataset_for(&model.cfg, &cfg)?;
    let m = evaluate(&model, &ds, args.split, cfg.train.batch_size, cfg.train.threads, cfg.train.raw_metrics)?;
    let split = format!("{:?}", args.split).to_lowercase();
    println!("split={split} horizon={} mse={} mae={} elements={}", model.cfg.horizon, m.mse, m.mae, m.count);
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        let path = dir.join("eval.csv");
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(write_err(&path))?;
        if fresh {
            writeln!(f, "checkpoint,split,horizon,mse,mae,elements").map_err(write_err(&path))?;
        }
        let name = args.checkpoint.display().to_string().replace('"', "\"\"");
        writeln!(f, "\"{name}\",{split},{},{},{},{}", model.cfg.horizon, m.mse, m.mae, m.count).map_err(write_err(&path))?;
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct ForecastArgs {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub out: PathBuf,
}

/// Forecast the steps after the end of the series, in original units.
pub fn forecast(args: &ForecastArgs) -> Result<Tensor> {
    let cfg = load_config(&args.config, None)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let (frame, ds) = dataset_for(&model.cfg, &cfg)?;
    let (c, l) = (frame.n_vars(), model.cfg.lookback);
    if frame.len() < l {
        return Err(Error::InputTooShort(format!("series has {} rows, lookback is {l}", frame.len())).into());
    }
    let mut x = Vec::with_capacity(c * l);
    for j in 0..c {
        x.extend((frame.len() - l..frame.len()).map(|t| frame.values[t * c + j]));
    }
    let x = ds.normalizer.normalize(&Tensor::new(&[1, c, l], x)?);
    let y = ds.normalizer.denormalize(&model.predict(&x)?);
    ensure_dir(&args.out)?;
    let path = args.out.join("forecast.csv");
    let mut w = out_file(&args.out, "forecast.csv")?;
    let h = model.cfg.horizon;
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "step,{}", frame.names.join(","))?;
        for k in 0..h {
            let row: Vec<String> = (0..c).map(|j| y.data()[j * h + k].to_string()).collect();
            writeln!(w, "{},{}", k + 1, row.join(","))?;
        }
        w.flush()
    };
    write(&mut w).map_err(write_err(&path))?;
    println!("wrote {h} steps for {c} variables to {}", path.display());
    Ok(y)
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub inject_fault: bool,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<Vec<GradCheckReport>> {
    let clock = Instant::now();
    let gc = GradCheckConfig { fault: args.inject_fault.then_some(AdjointFault::Sigmoid(1.5)), ..Default::default() };
    let micro = match &args.config {
        Some(p) => RunConfig::load(p)?.model,
        None => gradsuite::micro_config(),
    };
    micro.validate()?;
    let n = Dmsc::new(micro.clone(), 0)?.n_params();
    if n >= MICRO_PARAM_LIMIT {
        return Err(CliError::Usage(format!("micro config has {n} parameters; finite differences need fewer than {MICRO_PARAM_LIMIT}")));
    }
    let mut reports = gradsuite::run(&gc)?;
    if args.config.is_some() {
        reports.retain(|r| r.label != "model");
        reports.push(gradsuite::check_model(&micro, 7, &gc)?);
    }
    println!("{:<28} {:>8} {:>12}  status  worst", "check", "elements", "max_rel_err");
    for r in &reports {
        let status = if r.passes(GRAD_TOL) { "ok" } else { "FAIL" };
        println!("{:<28} {:>8} {:>12.3e}  {:<6}  {}", r.label, r.checked, r.max_rel_err, status, r.worst);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passes(GRAD_TOL)).map(|r| r.label.as_str()).collect();
    println!("{} checks, {} failed, {:.1}s", reports.len(), failed.len(), clock.elapsed().as_secs_f64());
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        let path = dir.join("gradcheck.csv");
        let mut w = out_file(dir, "gradcheck.csv")?;
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(w, "check,elements,max_rel_err,max_abs_err,passed")?;
            for r in &reports {
                writeln!(w, "{},{},{},{},{}", r.label, r.checked, r.max_rel_err, r.max_abs_err, r.passes(GRAD_TOL))?;
            }
            w.flush()
        };
        write(&mut w).map_err(write_err(&path))?;
    }
    if !failed.is_empty() {
        return Err(CliError::CheckFailed(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(reports)
}

#[derive(Clone, Debug, Default)]
pub struct BenchArgs {
    pub spec: ScalingSpec,
    pub vars: Vec<usize>,
    pub out: Option<PathBuf>,
}

pub fn bench(args: &BenchArgs) -> Result<(ScalingReport, Option<ScalingReport>)> {
    if args.spec.lookbacks.len() < 4 {
        return Err(CliError::Usage("bench needs at least 4 lookback values".into()));
    }
    if args.spec.reps < 5 {
        return Err(CliError::Usage("bench needs at least 5 reps".into()));
    }
    let r = scaling_in_lookback(&args.spec)?;
    for p in &r.points {
        println!("L={:<5} mean {:.4}s  min {:.4}s  ({} reps x {})", p.x, p.mean_s, p.min_s, p.reps, p.inner);
    }
    println!("log-log slope {:.3} ({})", r.slope, r.note);
    let by_vars = if args.vars.len() >= 2 {
        let l = args.spec.lookbacks[0];
        let v = empd_scaling_in_vars(&args.spec, l, &args.vars)?;
        println!("patching vs variables: slope {:.3} ({})", v.slope, v.note);
        Some(v)
    } else {
        None
    };
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        let path = dir.join("scaling.csv");
        let mut w = out_file(dir, "scaling.csv")?;
        r.write_csv(&mut w, "lookback").and_then(|_| w.flush()).map_err(write_err(&path))?;
        if let Some(v) = &by_vars {
            let path = dir.join("scaling_vars.csv");
            let mut w = out_file(dir, "scaling_vars.csv")?;
            v.write_csv(&mut w, "n_vars").and_then(|_| w.flush()).map_err(write_err(&path))?;
        }
    }
    Ok((r, by_vars))
}
