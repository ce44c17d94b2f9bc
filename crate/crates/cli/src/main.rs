//! `capcast`: end-to-end battery capacity forecasting pipeline.
//!
//! Subcommands cover the whole flow: `synth` makes a seeded synthetic fleet,
//! `ingest` turns raw charging logs into weekly labels and features,
//! `features` scores and selects feature sets, `train` fits the diffusion
//! forecaster, `forecast` samples probabilistic futures from a checkpoint,
//! `evaluate` runs cross-validated experiments, and `ablate` drives the
//! feature/model ablation studies.
//!
//! Every command writes its effective config, a manifest of produced files,
//! and exits with a category-specific code: 2 I/O, 3 schema, 4 validation or
//! config, 5 training abort.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use capcast_core::config::RunConfig;
use capcast_core::error::{CoreError, ErrorCategory};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capcast", version, about = "Fleet battery capacity forecasting")]
struct Cli {
    /// JSON config file; defaults apply for anything omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; module seeds derive from it
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker cap for data-parallel stages (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Forecast horizon in weeks
    #[arg(long, global = true)]
    horizon: Option<usize>,

    /// History window length (8, 16, 24, or 32 weeks)
    #[arg(long = "history-len", global = true)]
    history_len: Option<usize>,

    /// Model variant: full | no_self_attn | no_cross_attn | backbone
    #[arg(long, global = true)]
    variant: Option<String>,

    /// Feature set: f1 | f2 | f3 | all | custom:PATH
    #[arg(long = "feature-set", global = true)]
    feature_set: Option<String>,

    /// Print the full default configuration as JSON and exit
    #[arg(long)]
    emit_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fleet with known ground truth
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Override the configured vehicle count
        #[arg(long)]
        vehicles: Option<usize>,
        /// Override the configured week count
        #[arg(long)]
        weeks: Option<u32>,
        /// Skip the large raw-log CSV and emit only the weekly table
        #[arg(long)]
        no_raw_logs: bool,
    },
    /// Parse raw charging logs into weekly labels and the feature table
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score features and emit the F1/F2/F3 selection report
    Features {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the diffusion forecaster on a weekly feature table
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probabilistic forecast from a trained checkpoint
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Forecast only this vehicle (default: every vehicle in the input)
        #[arg(long)]
        vehicle: Option<String>,
    },
    /// Cross-validated evaluation with metrics.json and plots
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured fold count
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Ablation drivers; mode is `features` or `model`
    Ablate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CoreError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(horizon) = cli.horizon {
        cfg.model.horizon = horizon;
    }
    if let Some(history_len) = cli.history_len {
        cfg.model.history_len = history_len;
        cfg.eval.history_lens = vec![history_len];
    }
    if let Some(variant) = &cli.variant {
        cfg.model.variant = capcast_core::config::ModelVariant::parse(variant)?;
    }
    if let Some(fs) = &cli.feature_set {
        if let Some(path) = fs.strip_prefix("custom:") {
            let text = std::fs::read_to_string(path)?;
            cfg.eval.custom_features = text
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect();
            cfg.eval.feature_set = "custom".to_string();
        } else {
            cfg.eval.feature_set = fs.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err.category() {
        ErrorCategory::Io => 2,
        ErrorCategory::Schema => 3,
        ErrorCategory::Validation => 4,
        ErrorCategory::Training => 5,
        ErrorCategory::Other => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.emit_default_config {
        println!("{}", RunConfig::default().to_json_pretty());
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("error: no subcommand; run with --help");
        return ExitCode::from(4);
    };
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(exit_code_for(&err));
        }
    };
    if cfg.threads > 0 {
        // a pool may already exist when tests invoke commands in-process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    let result = match command {
        Command::Synth {
            out,
            vehicles,
            weeks,
            no_raw_logs,
        } => {
            let mut cfg = cfg;
            if let Some(v) = vehicles {
                cfg.synth.vehicles = *v;
            }
            if let Some(w) = weeks {
                cfg.synth.weeks = *w;
            }
            if *no_raw_logs {
                cfg.synth.emit_raw_logs = false;
            }
            commands::cmd_synth(&cfg, out)
        }
        Command::Ingest { input, out } => commands::cmd_ingest(&cfg, input, out),
        Command::Features { input, out } => commands::cmd_features(&cfg, input, out),
        Command::Train { input, out } => commands::cmd_train(&cfg, input, out),
        Command::Forecast {
            checkpoint,
            input,
            out,
            vehicle,
        } => commands::cmd_forecast(&cfg, checkpoint, input, out, vehicle.as_deref()),
        Command::Evaluate { input, out, folds } => {
            let mut cfg = cfg;
            if let Some(k) = folds {
                cfg.eval.folds = *k;
            }
            commands::cmd_evaluate(&cfg, input, out)
        }
        Command::Ablate {
            input,
            mode,
            out,
            folds,
        } => {
            let mut cfg = cfg;
            if let Some(k) = folds {
                cfg.eval.folds = *k;
            }
            commands::cmd_ablate(&cfg, input, mode, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
