//! `resnetplus` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 data or format error, 4 numerical
//! failure (training divergence or a failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use resnetplus::data::Split;
use resnetplus::gradcheck::Scope;
use resnetplus::metrics::ReportFormat;

use commands::{CmdResult, EvalArgs, Failure};
use config::{DataConfig, RunArgs, RunConfig, SynthSpec, Weights};

#[derive(Debug, Parser)]
#[command(name = "resnetplus", version, about = "Train and evaluate ResNet+ image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightsArg {
    Raw,
    Ema,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    Primitives,
    Blocks,
    Full,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration; writes best.ckpt, train_report.{csv,txt} and resolved.cfg.
    Train(RunArgs),
    /// Evaluate a checkpoint and export metrics, ROC and decision curves.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Resolved run config; its model section must match the checkpoint.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "KxN")]
        synthetic: Option<SynthSpec>,
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "both")]
        weights: WeightsArg,
        #[arg(long, value_name = "DIR", default_value = "eval")]
        out: PathBuf,
        /// Comma-separated subset of json,csv,svg.
        #[arg(long, value_delimiter = ',', default_value = "json,csv,svg")]
        format: Vec<ReportFormat>,
    },
    /// Train the 16-row CBAM x SCO x RC x MS grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Print the resolved configuration of every row and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Classify images with a checkpoint.
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "ema")]
        weights: Weights,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write a synthetic stripe dataset as PNG files plus a manifest.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "KxN", default_value = "3x60")]
        synthetic: SynthSpec,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare autodiff gradients with central finite differences in f64.
    Gradcheck {
        #[arg(long, value_enum, default_value = "primitives")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale every adjoint by this factor (negative control).
        #[arg(long, value_name = "FACTOR")]
        inject_fault: Option<f64>,
    },
}

fn resolve_run(run: &RunArgs, subcommand: &str) -> Result<RunConfig, Failure> {
    if !run.any_source() {
        let mut cmd = Cli::command();
        let help = cmd
            .find_subcommand_mut(subcommand)
            .map(|c| c.render_help().to_string())
            .unwrap_or_default();
        return Err(Failure::usage(format!(
            "{subcommand} needs --config, --manifest or --synthetic\n\n{help}"
        )));
    }
    let cfg = run.resolve()?;
    if !cfg.has_data() {
        return Err(Failure::usage("no data source in config or flags"));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train(run) => commands::train(&resolve_run(&run, "train")?),
        Command::Ablate { run, dry_run } => commands::ablate(&resolve_run(&run, "ablate")?, dry_run),
        Command::Eval {
            checkpoint,
            config,
            manifest,
            synthetic,
            data_seed,
            split,
            weights,
            out,
            format,
        } => {
            let mut data = match &config {
                Some(path) => RunConfig::load(path)?.data,
                None => DataConfig::default(),
            };
            if manifest.is_some() || synthetic.is_some() {
                data.manifest = manifest;
                data.synthetic = synthetic;
            }
            if let Some(s) = data_seed {
                data.seed = s;
            }
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let weights = match weights {
                WeightsArg::Raw => vec![Weights::Raw],
                WeightsArg::Ema => vec![Weights::Ema],
                WeightsArg::Both => vec![Weights::Raw, Weights::Ema],
            };
            commands::eval(&EvalArgs {
                checkpoint: &checkpoint,
                config: config.as_deref(),
                data,
                split,
                weights,
                out: &out,
                formats: format,
            })
        }
        Command::Predict {
            checkpoint,
            weights,
            images,
        } => commands::predict(&checkpoint, weights, &images),
        Command::Synth {
            out,
            synthetic,
            size,
            seed,
        } => commands::synth(&out, synthetic, size, seed),
        Command::Gradcheck {
            scope,
            seed,
            inject_fault,
        } => {
            let scope = match scope {
                ScopeArg::Primitives => Scope::Primitives,
                ScopeArg::Blocks => Scope::Blocks,
                ScopeArg::Full => Scope::Full,
            };
            commands::gradcheck(scope, seed, inject_fault)
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("RESNETPLUS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("RESNETPLUS_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(u8::try_from(f.code).unwrap_or(1))
        }
    }
}
