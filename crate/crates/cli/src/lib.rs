//! Command-line front end: argument parsing, run configuration and the
//! command implementations behind the `gintrip` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use gintrip_core::FidelityConvention;

/// Exit status for bad usage, configuration or input files.
pub const EXIT_USAGE: i32 = 2;
/// Exit status when training or evaluation hits a non-finite value.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gintrip", version, about = "Self-explaining spatio-temporal graph forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ConventionArg {
    Standard,
    Paper,
}

impl From<ConventionArg> for FidelityConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Standard => FidelityConvention::Standard,
            ConventionArg::Paper => FidelityConvention::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl From<SplitArg> for commands::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
            SplitArg::All => Self::All,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint.bin, history.csv and config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "lr")]
        learning_rate: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast metrics and the fidelity sparsity sweep.
    Eval {
        /// Run config; `config.json` from a training run works as-is.
        #[arg(long)]
        config: PathBuf,
        /// Defaults to checkpoint.bin next to the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sparsity levels, comma separated. Empty skips fidelity.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value = "standard")]
        fidelity_convention: ConventionArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Overrides the evaluation seed stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        /// Also score the per-node time-of-day historical average.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-window top-k nodes and prototype grounding.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted-subgraph dataset with its ground truth.
    Synth {
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 5)]
        informative: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, default_value_t = 4)]
        horizon: usize,
        #[arg(long, default_value_t = 8000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize an output directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Runs a parsed command and returns its summary line.
pub fn run(cli: Cli) -> anyhow::Result<String> {
    use commands::*;
    match cli.command {
        Command::Train {
            config,
            seed,
            epochs,
            learning_rate,
            out,
        } => cmd_train(
            &config,
            TrainOverrides {
                seed,
                epochs,
                learning_rate,
                out,
            },
        ),
        Command::Eval {
            config,
            checkpoint,
            ks,
            fidelity_convention,
            split,
            seed,
            baseline,
            out,
        } => cmd_eval(EvalArgs {
            config,
            checkpoint,
            ks,
            convention: fidelity_convention.into(),
            split: split.into(),
            seed,
            baseline,
            out,
        }),
        Command::Explain {
            config,
            checkpoint,
            k,
            split,
            seed,
            out,
        } => cmd_explain(ExplainArgs {
            config,
            checkpoint,
            k,
            split: split.into(),
            seed,
            out,
        }),
        Command::Synth {
            nodes,
            informative,
            sigma,
            window,
            horizon,
            steps,
            seed,
            out,
        } => cmd_synth(SynthArgs {
            nodes,
            informative,
            sigma,
            window,
            horizon,
            steps,
            seed,
            out,
        }),
        Command::Report { run } => cmd_report(&run),
    }
}

/// Exit status for a failed command: numeric failures get their own code,
/// everything else is a usage or input problem.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<gintrip_core::Error>())
        .any(|e| e.is_numeric());
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}
