use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmsc_bench::ScalingSpec;
use dmsc_cli::commands::{self, BenchArgs, EvalArgs, ForecastArgs, GradcheckArgs, TrainArgs};
use dmsc_cli::CliError;
use dmsc_core::Split;

#[derive(Parser)]
#[command(name = "dmsc", version, about = "Multi-scale patch forecaster: train, evaluate, forecast, check, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunOpts {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write every step's routing weights to routing.csv.
    #[arg(long)]
    dump_routing: bool,
    /// Write 0 for wall-clock fields so reruns produce identical files.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, metrics.csv and manifest.json.
    Train(RunOpts),
    /// Train one ablation variant.
    Ablate {
        #[command(flatten)]
        run: RunOpts,
        /// Variant name, e.g. intra_only or agg_heads.
        #[arg(long)]
        variant: String,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Expected horizon; rejected if the checkpoint differs.
        #[arg(long)]
        horizon: Option<usize>,
        /// Append a row to eval.csv in this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast past the end of the series.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every op and module.
    Gradcheck {
        /// Config whose [model] table replaces the built-in micro model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Step time against look-back length.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [96usize, 192, 384, 768])]
        lookbacks: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        n_vars: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Also time patching against these variable counts.
        #[arg(long, value_delimiter = ',')]
        vars: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn train_args(run: RunOpts) -> TrainArgs {
    TrainArgs {
        config: run.config,
        seed: run.seed,
        out: run.out,
        variant: None,
        dump_routing: run.dump_routing,
        no_timing: run.no_timing,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(run) => commands::train(&train_args(run), "train").map(drop),
        Command::Ablate { run, variant } => {
            let v = commands::parse_variant(&variant)?;
            let args = TrainArgs { variant: Some(v), ..train_args(run) };
            commands::train(&args, "ablate").map(drop)
        }
        Command::Eval { checkpoint, config, split, horizon, out } => {
            let split: Split = split.parse()?;
            commands::eval(&EvalArgs { checkpoint, config, split, horizon, out }).map(drop)
        }
        Command::Forecast { checkpoint, config, out } => commands::forecast(&ForecastArgs { checkpoint, config, out }).map(drop),
        Command::Gradcheck { config, out, inject_fault } => {
            commands::gradcheck(&GradcheckArgs { config, out, inject_fault }).map(drop)
        }
        Command::Bench { lookbacks, reps, n_vars, d_model, layers, batch, vars, out } => {
            let spec = ScalingSpec { lookbacks, reps, n_vars, d_model, n_layers: layers, batch, ..Default::default() };
            commands::bench(&BenchArgs { spec, vars, out }).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
