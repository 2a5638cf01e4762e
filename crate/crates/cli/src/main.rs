//! `elnet`: synthesize data, train, evaluate, cross-validate, search
//! hyperparameters, audit parameter counts and export saliency maps.
//!
//! Exit codes: 0 success, 2 usage or invalid input, 3 I/O or unreadable
//! file, 4 training divergence, 5 parameter audit failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elnet::data::Orientation;
use elnet::Error;

use crate::commands::{RunDir, SaliencyArgs, SynthArgs};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_AUDIT: u8 = 5;

#[derive(Parser)]
#[command(name = "elnet", version, about = "Multi-slice volume classification with ELNet")]
struct Cli {
    /// Worker threads; 1 makes every run bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with known lesion locations.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        slices: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        lesion_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and report validation metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Stratified k-fold cross-validation.
    Crossval(RunArgs),
    /// Grid search over the `grid` section of the config.
    Grid(RunArgs),
    /// Print the per-layer parameter audit for width factor K.
    Params {
        #[arg(long, short)]
        k: usize,
    },
    /// FullGrad heat-maps of one volume.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `.npy` volume of shape (S, H, W).
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long, default_value = "axial")]
        orientation: Orientation,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field: `--set train.optimizer.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set data.dir=...`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Shorthand for `--set train.epochs=...`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `--set train.seed=...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding run directories (default `$ELNET_RUN_ROOT`, then `runs`).
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Run directory name (default: command and timestamp).
    #[arg(long)]
    name: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> elnet::Result<config::RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.data {
            overrides.push(format!("data.dir={}", serde_json::to_string(d)?));
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("train.epochs={e}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        config::resolve(self.config.as_deref(), &overrides)
    }

    fn run_dir(&self, command: &str) -> elnet::Result<RunDir> {
        RunDir::create(self.run_root.as_deref(), self.name.as_deref(), command)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Csv(_) | Error::Json(_) => EXIT_IO,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn run_with_config(args: &RunArgs, command: &str, f: impl FnOnce(&mut RunDir, &config::RunConfig) -> elnet::Result<()>) -> elnet::Result<()> {
    let cfg = args.resolve().map_err(|e| match e {
        // a malformed config file is a usage problem, not an I/O one
        Error::Json(j) => Error::InvalidArgument(format!("config: {j}")),
        other => other,
    })?;
    let mut run = args.run_dir(command)?;
    run.log(format!("{command}: run directory {}", run.path.display()));
    let result = f(&mut run, &cfg);
    if let Err(e) = &result {
        run.log(format!("error: {e}"));
    }
    result
}

fn run(cli: Cli) -> Result<(), u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return Err(EXIT_USAGE);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| {
            eprintln!("error: {e}");
            EXIT_USAGE
        })?;
    }
    let result = match cli.command {
        Command::Synth {
            n,
            slices,
            size,
            lesion_rate,
            seed,
            out,
        } => commands::synth(SynthArgs {
            n,
            slices,
            size,
            lesion_rate,
            seed,
            out,
        }),
        Command::Train(args) => run_with_config(&args, "train", commands::train),
        Command::Eval { run, checkpoint } => run_with_config(&run, "eval", |r, c| commands::eval(r, c, &checkpoint)),
        Command::Crossval(args) => run_with_config(&args, "crossval", commands::crossval),
        Command::Grid(args) => run_with_config(&args, "grid", commands::grid),
        Command::Params { k } => match commands::params(k) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: enumerated parameters disagree with the closed form");
                return Err(EXIT_AUDIT);
            }
            Err(e) => Err(e),
        },
        Command::Saliency {
            checkpoint,
            volume,
            class,
            orientation,
            out,
        } => commands::saliency(SaliencyArgs {
            checkpoint,
            volume,
            class,
            orientation,
            out,
        }),
    };
    result.map_err(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
