//! `mvgr`: one entry point for every stage of the pipeline.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

/// Multi-view geospatial representations, prompt-empowered forecasting and
/// uplift modelling on synthetic cities.
///
/// Relative paths are resolved against MVGR_DATA_ROOT when it is set.
#[derive(Debug, Parser)]
#[command(name = "mvgr", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate the config and print the plan without touching the disk.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic city, region panel and grid activity.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain region embeddings and the frozen backbone; write the embedding library.
    Pretrain {
        /// Directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one forecaster variant per configured indicator.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `pretrain`.
        #[arg(long)]
        pretrained: PathBuf,
        /// full, pgn_off, lora_off or ev_off.
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast the test range with models written by `train`.
    Forecast {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and both baselines, then write the metric report.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Like `evaluate`, with one extra run per switched-off component.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embedding library operations.
    Embed {
        #[command(subcommand)]
        command: EmbedCommand,
    },
    /// Multi-treatment uplift model.
    Uplift {
        #[command(subcommand)]
        command: UpliftCommand,
    },
    /// Print the complete default configuration.
    Defaults,
}

#[derive(Debug, Subcommand)]
pub enum EmbedCommand {
    /// Most similar regions to a region of the library.
    Query {
        /// Library directory (`library/` under a `pretrain` output).
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        region: usize,
        /// Overrides `embed.top_k`.
        #[arg(long)]
        k: Option<usize>,
        /// Also write `query.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-means over the library vectors of one level.
    Cluster {
        #[arg(long)]
        library: PathBuf,
        /// Synth output; adds archetype purity for county clusters.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-dimensional PCA projection with cluster labels.
    Project {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum UpliftCommand {
    /// Generate uplift samples for the city and train the multi-head model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Needed when `uplift.augment` is true.
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// QINI report of a trained model on a samples file.
    Eval {
        /// The `model/` directory written by `uplift train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let err = CliError::usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.to_line());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
