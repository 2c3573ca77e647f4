//! `dssh` — reproducible experiment pipelines for the shrinkage state-space
//! forecaster.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing artifact,
//! 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dssh::error::Error;

use config::{extract_overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "dssh",
    about = "Deep state-space forecasting with shrinkage priors",
    after_help = "Any --<section>.<field> VALUE flag (or --set section.field=value) \
        overrides the matching config.json entry, e.g. --train.learning_rate 1e-4. \
        The DSSH_SEED environment variable overrides the config seed."
)]
struct Cli {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets (train.csv / test.csv / true_latents.csv).
    Simulate {
        /// Which generator: linear_ssm | seasonal.
        #[arg(long, default_value = "linear_ssm")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Training series count (linear_ssm).
        #[arg(long, default_value_t = 2560)]
        train_count: usize,
        /// Test series count (linear_ssm).
        #[arg(long, default_value_t = 128)]
        test_count: usize,
        /// Series length.
        #[arg(long, default_value_t = 100)]
        length: usize,
        /// Series count (seasonal).
        #[arg(long, default_value_t = 100)]
        series: usize,
        /// Seasonal period (seasonal).
        #[arg(long, default_value_t = 24)]
        period: usize,
        /// Held-out tail excluded from train.csv (seasonal).
        #[arg(long, default_value_t = 48)]
        eval_horizon: usize,
    },
    /// Fit the model; writes best.dssh, train_log.csv and config.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run N random-search draws over the hyperparameter grid.
        #[arg(long, default_value_t = 0)]
        search: usize,
    },
    /// Monte Carlo forecasts; writes bands.csv and samples.dssh.
    Forecast {
        #[arg(long)]
        data: PathBuf,
        /// Run directory (best.dssh + config.json) or a .dssh file.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rolling-origin window (forecast horizon stays config.forecast.horizon).
        #[arg(long)]
        rolling_window: Option<usize>,
    },
    /// Metrics against the held-out tail; writes metrics.json/csv, summary.json.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shrinkage/decoder ablations; writes ablation.json/csv.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint with an MLP decoder (decoder mode only).
        #[arg(long)]
        checkpoint_nonlinear: Option<PathBuf>,
        /// shrinkage | decoder.
        #[arg(long, default_value = "shrinkage")]
        mode: String,
        /// Comma-separated sparsity levels.
        #[arg(long, default_value = "0.05,0.1,0.25,0.5")]
        levels: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every gradient path.
    Gradcheck,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data(_) => 2,
        Error::MissingArtifact(_) | Error::Io { .. } | Error::MissingParam(_) => 3,
        Error::NonFinite { .. } | Error::Domain { .. } | Error::ShapeMismatch { .. } => 4,
    }
}

fn run() -> Result<(), Error> {
    let raw: Vec<String> = std::env::args().collect();
    let (rest, overrides) = extract_overrides(raw)?;
    let cli = Cli::try_parse_from(rest).map_err(|e| {
        // let clap print its own rich message, then surface a config error
        let _ = e.print();
        Error::Config("argument parsing failed".into())
    })?;
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    match &cli.command {
        Command::Simulate {
            spec,
            out,
            train_count,
            test_count,
            length,
            series,
            period,
            eval_horizon,
        } => commands::cmd_simulate(
            &cfg,
            spec,
            out,
            *train_count,
            *test_count,
            *length,
            *series,
            *period,
            *eval_horizon,
        ),
        Command::Train { data, out, search } => commands::cmd_train(&cfg, data, out, *search),
        Command::Forecast {
            data,
            checkpoint,
            out,
            rolling_window,
        } => commands::cmd_forecast(&cfg, data, checkpoint, out, *rolling_window),
        Command::Evaluate {
            data,
            checkpoint,
            out,
        } => commands::cmd_evaluate(&cfg, data, checkpoint, out),
        Command::Ablate {
            data,
            checkpoint,
            checkpoint_nonlinear,
            mode,
            levels,
            out,
        } => {
            let levels = commands::parse_levels(levels)?;
            commands::cmd_ablate(
                &cfg,
                data,
                checkpoint,
                checkpoint_nonlinear.as_deref(),
                mode,
                &levels,
                out,
            )
        }
        Command::Gradcheck => commands::cmd_gradcheck(),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
