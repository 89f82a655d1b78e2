//! `nubot`: synthetic data, training, prediction, evaluation and self-checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.

// `!(a > b)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::Direction;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Core(nubot_core::Error),
    /// Checks ran but some failed.
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use nubot_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Core(E::Numeric(_) | E::ZeroMass | E::ZeroWeight(_)) => 2,
            CliError::Core(_) => 1,
            CliError::Failed(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<nubot_core::Error> for CliError {
    fn from(e: nubot_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "nubot", version, about = "Neural unbalanced optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run document; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $NUBOT_OUT/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a three-cluster scenario.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        holdout: Option<f64>,
    },
    /// Train potentials and rescalers.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Map points with a trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        direction: Option<Direction>,
    },
    /// Score a prediction against the target and the two baselines.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prediction: Option<PathBuf>,
        #[arg(long)]
        control: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run solver and gradient self-checks.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Collects `(key, value)` pairs for the flags that were given.
struct Flags(Vec<(&'static str, Value)>);

impl Flags {
    fn new(common: &Common) -> Self {
        let mut f = Flags(Vec::new());
        f.add("out", common.out.as_ref().map(|p| json!(p)));
        f
    }

    fn add(&mut self, key: &'static str, v: Option<Value>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, v));
        }
        self
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            common,
            scenario,
            seed,
            n,
            scale,
            holdout,
        } => {
            let mut f = Flags::new(&common);
            f.add("scenario", scenario.map(|s| json!(s.to_ascii_lowercase())))
                .add("seed", seed.map(|v| json!(v)))
                .add("n", n.map(|v| json!(v)))
                .add("scale", scale.map(|v| json!(v)))
                .add("holdout", holdout.map(|v| json!(v)));
            commands::synth(config::resolve(common.config.as_deref(), f.0)?)
        }
        Command::Train {
            common,
            source,
            target,
            steps,
            mode,
            seed,
            batch_size,
            resume,
            checkpoint_every,
        } => {
            let mut f = Flags::new(&common);
            f.add("source", source.map(|p| json!(p)))
                .add("target", target.map(|p| json!(p)))
                .add("train.steps", steps.map(|v| json!(v)))
                .add("train.mode", mode.map(|v| json!(v)))
                .add("train.seed", seed.map(|v| json!(v)))
                .add("train.batch_source", batch_size.map(|v| json!(v)))
                .add("train.batch_target", batch_size.map(|v| json!(v)))
                .add("resume", resume.map(|p| json!(p)))
                .add("checkpoint_every", checkpoint_every.map(|v| json!(v)));
            commands::train(config::resolve(common.config.as_deref(), f.0)?)
        }
        Command::Predict {
            common,
            model,
            input,
            direction,
        } => {
            let mut f = Flags::new(&common);
            f.add("model", model.map(|p| json!(p)))
                .add("input", input.map(|p| json!(p)))
                .add("direction", direction.map(|d| json!(d)));
            commands::predict(config::resolve(common.config.as_deref(), f.0)?)
        }
        Command::Eval {
            common,
            prediction,
            control,
            target,
            method,
            scenario,
            seed,
        } => {
            let mut f = Flags::new(&common);
            f.add("prediction", prediction.map(|p| json!(p)))
                .add("control", control.map(|p| json!(p)))
                .add("target", target.map(|p| json!(p)))
                .add("method", method.map(|v| json!(v)))
                .add("scenario", scenario.map(|v| json!(v)))
                .add("seed", seed.map(|v| json!(v)));
            commands::eval(config::resolve(common.config.as_deref(), f.0)?)
        }
        Command::Oracle { common, seed } => {
            let mut f = Flags::new(&common);
            f.add("seed", seed.map(|v| json!(v)));
            commands::oracle(config::resolve(common.config.as_deref(), f.0)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
