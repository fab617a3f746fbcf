//! The `lga` command-line tool.
//!
//! ```text
//! lga [--config FILE] [--set key=value]... [--out-dir DIR] [--seed N] [-v|-q] <command>
//! ```
//!
//! Commands: `dump-graph`, `gradcheck`, `cost [--paper-config PRESET]`,
//! `bench`, `train`, `ablate`. Each writes its outputs and a
//! `resolved_config.txt` snapshot under the output directory. Exit codes are
//! 0 on success, 1 when a check fails or a run aborts, 2 on usage or
//! configuration errors.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::CostPreset;
use crate::config::{parse_assignment, Settings, SEED_ENV};
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "lga",
    version,
    about = "Latent graph attention: graphs, gradient checks, costs, benchmarks and toy training"
)]
pub struct Cli {
    /// Plain-text key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment, global = true)]
    pub sets: Vec<(String, String)>,
    /// Directory for all outputs.
    #[arg(long, default_value = "lga-out", global = true)]
    pub out_dir: PathBuf,
    /// Seed; takes precedence over LGA_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More output (per-epoch metrics for training).
    #[arg(short, long, global = true, conflicts_with = "quiet")]
    pub verbose: bool,
    /// Only errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Build a graph from random or loaded features and write it as JSON.
    DumpGraph,
    /// Compare analytic gradients with central finite differences.
    Gradcheck,
    /// Parameter and FLOP counts for an attention module.
    Cost {
        /// Start from a preset: squeeze-lga, squeeze-lga-small or ccnet.
        #[arg(long)]
        paper_config: Option<CostPreset>,
    },
    /// Scaling benchmark with fitted exponents.
    Bench,
    /// Train the toy segmentation model.
    Train,
    /// One toy training run per value of an ablation axis.
    Ablate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::DumpGraph => "dump-graph",
            Command::Gradcheck => "gradcheck",
            Command::Cost { .. } => "cost",
            Command::Bench => "bench",
            Command::Train => "train",
            Command::Ablate => "ablate",
        }
    }

    fn defaults(&self) -> Vec<(&'static str, String)> {
        match self {
            Command::DumpGraph => commands::dump_graph_defaults(),
            Command::Gradcheck => commands::gradcheck_defaults(),
            Command::Cost { paper_config } => commands::cost_defaults(*paper_config),
            Command::Bench => commands::bench_defaults(),
            Command::Train => commands::train_defaults(),
            Command::Ablate => commands::ablate_defaults(),
        }
    }
}

/// Layer defaults, config file, `--set`, `LGA_SEED` and `--seed`.
pub fn resolve(cli: &Cli, env_seed: Option<&str>) -> CliResult<Settings> {
    let mut settings = Settings::new(cli.command.name(), &cli.command.defaults());
    if let Some(path) = &cli.config {
        settings.apply_file(path)?;
    }
    settings.apply(&cli.sets)?;
    if let Some(seed) = env_seed {
        seed.trim()
            .parse::<u64>()
            .map_err(|e| CliError::Config(format!("{SEED_ENV}='{seed}': {e}")))?;
        settings.set("seed", seed.trim())?;
    }
    if let Some(seed) = cli.seed {
        settings.set("seed", &seed.to_string())?;
    }
    Ok(settings)
}

/// Run a parsed command; returns the text to print on success.
pub fn run(cli: &Cli) -> CliResult<String> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let settings = resolve(cli, env_seed.as_deref())?;
    settings.write_snapshot(&cli.out_dir)?;
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::DumpGraph => commands::dump_graph(&settings, out),
        Command::Gradcheck => commands::gradcheck(&settings, out),
        Command::Cost { .. } => commands::cost(&settings, out),
        Command::Bench => commands::bench(&settings, out),
        Command::Train => commands::train(&settings, out, cli.verbose),
        Command::Ablate => commands::ablate_cmd(&settings, out),
    }
}

/// Parse arguments, run, print, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(msg) => {
            if !cli.quiet && !msg.is_empty() {
                println!("{}", msg.trim_end());
            }
            0
        }
        Err(e) => {
            eprintln!("lga {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
