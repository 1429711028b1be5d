//! `sccam`: generate synthetic process data, train the attention encoder,
//! evaluate it and explain its decisions.
//!
//! Results go to standard output as `key=value` lines; diagnostics go to
//! standard error. Exit codes: 0 success, 1 internal error, 2 configuration
//! or path error, 3 data error.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sccam_core::explain::{MapSource, Scope};

use crate::config::Overrides;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "sccam", version, about = "Attention-based fault diagnosis with root-cause heatmaps")]
struct Cli {
    /// More log output on standard error (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize per-class train/test recordings and a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the configured data directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a generated dataset; writes checkpoint, report and dataset cache.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Train this many consecutive seeds concurrently, one directory each.
        #[arg(long, default_value_t = 1)]
        parallel_seeds: usize,
    },
    /// Score a checkpoint on its test set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache (defaults to dataset.bin beside the checkpoint).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write a report into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heatmaps and root-cause verdict for a class or a single window.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = ["global", "local"], default_value = "global")]
        scope: String,
        #[arg(long)]
        class: Option<usize>,
        /// Index into the test windows (of --class, when given).
        #[arg(long)]
        sample_index: Option<usize>,
        #[arg(long, default_value = "explain")]
        out: PathBuf,
        /// Use the spatial attention gate instead of the refined features.
        #[arg(long)]
        spatial_only: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["balanced", "imbalanced", "long-tail"])]
    scenario: Option<String>,
    /// stirred-tank or benchmark-plant.
    #[arg(long)]
    plant: Option<String>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        if let Some(p) = self.config.as_ref().filter(|p| !p.is_file()) {
            return Err(CliError::Path { path: p.clone(), message: "config file not found".into() });
        }
        let overrides = Overrides {
            seed: self.seed,
            scenario: self.scenario.clone(),
            plant: self.plant.clone(),
            data: self.data.clone(),
        };
        config::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<commands::Output, CliError> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| cfg.data_dir.clone());
            commands::generate(&cfg, &out)
        }
        Command::Train { common, out, parallel_seeds } => {
            let cfg = common.load()?;
            commands::train(&cfg, common.scenario.as_deref(), &out, parallel_seeds)
        }
        Command::Evaluate { checkpoint, data, out } => commands::evaluate(&checkpoint, data.as_deref(), out.as_deref()),
        Command::Explain { checkpoint, data, scope, class, sample_index, out, spatial_only } => {
            let scope: Scope = scope.parse().map_err(CliError::Config)?;
            commands::explain(&commands::ExplainRequest {
                checkpoint: &checkpoint,
                data: data.as_deref(),
                scope,
                class,
                sample_index,
                out: &out,
                source: if spatial_only { MapSource::SpatialOnly } else { MapSource::Refined },
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
