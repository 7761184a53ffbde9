//! `afgm`: train, evaluate and inspect the frequency-gated forecaster.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use afgm_core::data_io::SplitName;
use afgm_core::Error;
use clap::{Args, Parser, Subcommand};

use commands::InspectArgs;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "afgm", version, about = "Adaptive frequency-gated state-space forecaster")]
struct Cli {
    /// Root for run directories (overrides AFGM_RUNS_DIR; default ./runs).
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: RunConfig) -> afgm_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => base,
        };
        for o in &self.overrides {
            cfg.set_pair(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to load instead of `<run>/best.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run, or one run per grid point.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid axis `key=v1,v2,...`; patch sets use `/`, e.g. `P=48/24,96/48`. Repeatable.
        #[arg(long, value_name = "KEY=V1,V2")]
        grid: Vec<String>,
    },
    /// Write MSE and MAE of a checkpoint on one split to `<run>/metrics.csv`.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Export raw-scale predictions and targets as CSV.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// Only the first N windows.
        #[arg(long)]
        limit: Option<usize>,
        /// Output path (default `<run>/predictions.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tape gradients with central differences on a small model.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 2)]
        vars: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Time one channel's scan over a grid of M, S, V.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        m: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "16")]
        s: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "16")]
        v: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output path (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train ablation cases and variants with a shared seed; writes summary.csv.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "I,II,IV")]
        cases: Vec<String>,
        /// Extra variants of case I: amp_phase, phase_only, fixed_omega.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Dump per-step transition gates, amplitudes and frequencies for one window.
    InspectFreq {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Output directory (default the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic ETT-like surrogate dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 17420)]
        rows: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Checkpoint(_) | Error::Ingest(_) => 2,
        Error::Numeric(_) | Error::Domain(_) | Error::Contract(_) => 3,
        Error::Io { .. } => 4,
    }
}

fn run(cli: Cli) -> afgm_core::Result<u8> {
    let root = commands::runs_root(cli.runs_dir);
    match cli.command {
        Command::Train { cfg, grid } => {
            commands::cmd_train(cfg.resolve(RunConfig::default())?, &grid, &root)?;
        }
        Command::Eval { run } => {
            commands::cmd_eval(&run.run, run.checkpoint, run.split.parse::<SplitName>()?)?;
        }
        Command::Predict { run, limit, out } => {
            commands::cmd_predict(&run.run, run.checkpoint, run.split.parse::<SplitName>()?, limit, out)?;
        }
        Command::Gradcheck { cfg, vars, h, tol } => {
            if !commands::cmd_gradcheck(cfg.resolve(commands::toy_config())?, vars, h, tol)? {
                return Ok(3);
            }
        }
        Command::Bench { m, s, v, reps, seed, out } => {
            if reps == 0 || m.is_empty() {
                return Err(Error::Config("bench needs reps >= 1 and at least one M".into()));
            }
            commands::cmd_bench(&m, &s, &v, reps, seed, out)?;
        }
        Command::Ablate { cfg, cases, variants } => {
            commands::cmd_ablate(cfg.resolve(RunConfig::default())?, &cases, &variants, &root)?;
        }
        Command::InspectFreq { run, window, channel, block, out } => {
            commands::cmd_inspect_freq(InspectArgs {
                split: run.split.parse()?,
                run: run.run,
                checkpoint: run.checkpoint,
                window,
                channel,
                block,
                out,
            })?;
        }
        Command::Synth { rows, seed, out } => commands::cmd_synth(rows, seed, &out)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
