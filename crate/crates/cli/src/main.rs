//! `lugnmt`: corpus-to-evaluation pipeline for Luganda-English
//! translation. Every subcommand reads one JSON config and writes its
//! artifacts into the configured output directory.

mod config;
mod ops;
mod paths;

use std::path::PathBuf;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::ops::RunOverrides;

#[derive(Parser)]
#[command(
    name = "lugnmt",
    version,
    about = "Luganda-English neural machine translation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, merge, and clean the raw corpus files.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition the cleaned corpus into train, valid, and test sets.
    Split {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn subword merges and vocabularies from the training set.
    Bpe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a translation model and save checkpoint plus history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Translation direction, e.g. lu2en or en2lu. Defaults to the
        /// corpus orientation in the config.
        #[arg(long)]
        direction: Option<String>,
        /// Overrides both the initialization and the shuffle seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate lines from a file or stdin to stdout.
    Translate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        direction: Option<String>,
        /// Source text file; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score translations. Either pass --hyp/--ref text files, or let a
    /// trained checkpoint decode the held-out test set.
    Eval {
        #[arg(long, required_unless_present = "hyp")]
        config: Option<PathBuf>,
        #[arg(long)]
        direction: Option<String>,
        /// Hypothesis file, one sentence per line.
        #[arg(long, requires = "reference")]
        hyp: Option<PathBuf>,
        /// Reference file, aligned line by line with --hyp.
        #[arg(long = "ref", requires = "hyp")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search the hyper-parameter grid, appending one JSON line per trial.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        direction: Option<String>,
        /// Total trial budget including already-recorded trials.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate and rank hyper-parameters from a finished sweep.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        direction: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: PathBuf, out: Option<PathBuf>) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&config)?;
    ops::apply_out_override(&mut config, out);
    Ok(config)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { config, out } => ops::cmd_ingest(&load(config, out)?),
        Command::Split { config, out } => ops::cmd_split(&load(config, out)?),
        Command::Bpe { config, out } => ops::cmd_bpe(&load(config, out)?),
        Command::Train {
            config,
            direction,
            seed,
            max_epochs,
            out,
        } => ops::cmd_train(
            &load(config, out)?,
            direction.as_deref(),
            RunOverrides {
                seed,
                max_epochs,
                budget: None,
            },
        ),
        Command::Translate {
            config,
            direction,
            input,
            out,
        } => ops::cmd_translate(&load(config, out)?, direction.as_deref(), input.as_deref()),
        Command::Eval {
            config,
            direction,
            hyp,
            reference,
            out,
        } => match (hyp, reference) {
            (Some(hyp), Some(reference)) => ops::cmd_eval_texts(&hyp, &reference),
            _ => {
                let config = config.expect("clap enforces --config without --hyp");
                ops::cmd_eval_model(&load(config, out)?, direction.as_deref())
            }
        },
        Command::Sweep {
            config,
            direction,
            budget,
            seed,
            max_epochs,
            out,
        } => ops::cmd_sweep(
            &load(config, out)?,
            direction.as_deref(),
            RunOverrides {
                seed,
                max_epochs,
                budget,
            },
        ),
        Command::Report {
            config,
            direction,
            out,
        } => ops::cmd_report(&load(config, out)?, direction.as_deref()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are not failures; everything else
            // is a usage error.
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
