//! Command-line driver: corpus generation, training, decoding, evaluation,
//! latency benchmarking and routing inspection.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, SEED_VAR};
use failure::{classify, one_line};

const AFTER_HELP: &str = "\
Settings are flat `key = value` pairs. They resolve in this order, later \
sources winning: built-in defaults, the --config file, the CAPSROUTE_SEED \
environment variable (seed only), then each -s KEY=VALUE flag in order. \
Every run writes the resolved settings to <out>/config.resolved.

Exit codes: 0 success, 2 usage, 3 configuration, 4 file or format, \
5 runtime, 1 anything else. Errors are printed as one line: \
`error[<class>]: <message>`.";

#[derive(Parser)]
#[command(name = "capsroute", version, about = "Capsule-routing sequence-to-sequence toolkit", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Settings file with `key = value` lines and `#` comments.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides one setting; may be repeated.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Directory for artifacts.
    #[arg(short, long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train a model on `data`/train.{src,tgt}.
    Train,
    /// Translate `input` (one sentence per line) or `sentence`.
    Translate,
    /// Score `model` on `data`/<split> with BLEU and sequence accuracy.
    Eval,
    /// Measure encode and per-token decode latency against source length.
    Bench,
    /// Dump the routing coefficients for one sentence.
    InspectRouting,
    /// Generate a toy corpus with train, valid and test splits.
    GenData,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), std::env::var(SEED_VAR).ok(), &cli.set)?;
    cfg.validate()?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Train => commands::train(&cfg, out),
        Command::Translate => commands::translate(&cfg, out),
        Command::Eval => commands::eval(&cfg, out),
        Command::Bench => commands::bench(&cfg, out),
        Command::InspectRouting => commands::inspect(&cfg, out),
        Command::GenData => commands::gen_data(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = classify(&err);
            let label = kind.map_or("other", |k| k.label());
            eprintln!("error[{label}]: {}", one_line(&err));
            ExitCode::from(kind.map_or(1, |k| k.exit_code()))
        }
    }
}
