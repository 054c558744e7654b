//! `camd`: train the property models, fit the applicability domain, run the
//! design loop, and report.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "camd", version, about = "Latent-space molecular design for fuel octane properties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the GNN ensemble on a property dataset and write a checkpoint.
    TrainGnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Number of ensemble members.
        #[arg(long)]
        ensemble_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fit one one-class SVM per GNN on the training fingerprints.
    FitAd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the optimize-decode-screen-predict loop.
    RunLoop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Molecules whose encodings define the search box.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        max_total: Option<usize>,
        #[arg(long)]
        max_unique: Option<usize>,
        #[arg(long)]
        time_limit: Option<f64>,
    },
    /// Summary table and RON-vs-OS plot data for a run.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Dump every molecule the grammar can produce.
    Enumerate {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CAMD_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainGnn {
            common,
            dataset,
            ensemble_size,
            epochs,
        } => commands::train_gnn(&common, dataset, ensemble_size, epochs),
        Command::FitAd {
            common,
            dataset,
            checkpoint,
        } => commands::fit_ad(&common, dataset, checkpoint),
        Command::RunLoop {
            common,
            checkpoint,
            corpus,
            max_total,
            max_unique,
            time_limit,
        } => commands::run_loop(&common, checkpoint, corpus, max_total, max_unique, time_limit),
        Command::Report { common, records } => commands::report(&common, records),
        Command::Enumerate { common } => commands::enumerate(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::from(e.kind.exit_code())
        }
    }
}
