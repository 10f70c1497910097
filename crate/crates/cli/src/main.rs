//! `didr` — seeded experiments on reward-tilted diffusion distillation.
//!
//! Exit status: 0 on success, 1 on configuration errors, 2 on runtime
//! faults (a structured error record is left in summary.json when the
//! output directory exists).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use didr_cli::output::FORMAT_VERSION;
use didr_cli::{load_config, run, ExperimentKind, RunSummary};

#[derive(Parser, Debug)]
#[command(name = "didr", version, about = "Reward-tilted diffusion distillation experiments")]
struct Args {
    #[command(subcommand)]
    kind: Kind,

    /// Key-value config file (strict: unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. --set model.tau=2.0 (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,

    /// Apply the reduced training tier before file/override settings.
    #[arg(long, global = true)]
    reduced: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Kind {
    /// Collapse-threshold scan over (mu, sigma, gamma, tau).
    ThresholdScan,
    /// Exact objective values over the two-mode family.
    AlphaSweep,
    /// Stage 1: train the reference score net.
    TrainRef,
    /// Stage 2: distill the one-step generator.
    Distill,
    /// Stages 3-4: alternating alignment for the configured method.
    Align,
    /// Reward-score estimator dumps and consistency comparisons.
    ValidateDrs,
    /// Finite-difference and identity checks.
    ValidateGrad,
    /// Full pipeline, both methods, shared early stages.
    FullToy,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::ThresholdScan => ExperimentKind::ThresholdScan,
            Kind::AlphaSweep => ExperimentKind::AlphaSweep,
            Kind::TrainRef => ExperimentKind::TrainRef,
            Kind::Distill => ExperimentKind::Distill,
            Kind::Align => ExperimentKind::Align,
            Kind::ValidateDrs => ExperimentKind::ValidateDrs,
            Kind::ValidateGrad => ExperimentKind::ValidateGrad,
            Kind::FullToy => ExperimentKind::FullToy,
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match load_config(
        args.config.as_deref(),
        args.reduced,
        &args.overrides,
        args.seed,
    ) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("config error: {err}");
            return ExitCode::from(1);
        }
    };
    let kind: ExperimentKind = args.kind.into();
    match run(kind, &cfg, &args.out) {
        Ok(summary) => {
            println!(
                "{}: done in {:.1}s (seed {}, config {})",
                summary.kind, summary.wall_clock_s, summary.seed, summary.config_hash
            );
            if let Some(metrics) = &summary.final_metrics {
                println!("{}", serde_json::to_string_pretty(metrics).unwrap_or_default());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("runtime fault: {err}");
            let summary = RunSummary {
                kind: kind.as_str().to_string(),
                seed: cfg.seed,
                config_hash: format!("{:016x}", cfg.hash()),
                format_version: FORMAT_VERSION,
                wall_clock_s: 0.0,
                final_metrics: None,
                error: Some(err.to_string()),
            };
            if let Ok(text) = serde_json::to_string_pretty(&summary) {
                let _ = std::fs::create_dir_all(&args.out);
                let _ = std::fs::write(args.out.join("summary.json"), text);
            }
            ExitCode::from(2)
        }
    }
}
