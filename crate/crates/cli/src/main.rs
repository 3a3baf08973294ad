//! Command-line front end for the flow-patch action recognition pipeline.
//!
//! Exit codes: 0 on success, 1 on operational failure (bad data, hash
//! mismatch, I/O), 2 on usage errors (clap's default).

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use jfp_core::commands::{
    run_blend, run_eval, run_extract, run_synth_gen, run_train, EvalSplit,
};
use jfp_core::config::RunConfig;
use jfp_core::twostream::{per_class_accuracy, top_k_accuracy, Modality};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "jfp", about = "Joint-aligned flow patches and two-stream graph classification")]
struct Cli {
    /// Path to a JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count; also read from JFP_WORKERS. Affects speed only,
    /// never results.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    Joints,
    JointsBones,
    Jfp,
    Jap,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Modality {
        match m {
            ModalityArg::Joints => Modality::Joints,
            ModalityArg::JointsBones => Modality::JointsBones,
            ModalityArg::Jfp => Modality::Jfp,
            ModalityArg::Jap => Modality::Jap,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic articulated-action benchmark.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
    },
    /// Extract packed patch tensors (flow or appearance) for every sample.
    ExtractJfp {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "jfp")]
        modality: ModalityArg,
    },
    /// Train one branch and checkpoint its best epoch.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Blend two score files and report accuracy.
    Blend {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        wa: f64,
        #[arg(long, default_value_t = 0.5)]
        wb: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn init_workers(cli: &Cli) -> Result<()> {
    let workers = cli.workers.or_else(|| {
        std::env::var("JFP_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_workers(&cli)?;
    let config = load_config(&cli)?;
    match cli.command {
        Command::SynthGen { out, classes, per_class } => {
            let manifest = run_synth_gen(&config, classes, per_class, &out)?;
            println!(
                "generated {} samples ({} classes) under {}",
                manifest.samples.len(),
                manifest.num_classes,
                out.display()
            );
        }
        Command::ExtractJfp { dataset, out, modality } => {
            let summary = run_extract(&config, &dataset, &out, modality.into())?;
            println!(
                "extracted {} samples, {} failed",
                summary.extracted.len(),
                summary.failed.len()
            );
            for (id, err) in &summary.failed {
                eprintln!("failed: {id}: {err}");
            }
        }
        Command::Train {
            dataset,
            features,
            modality,
            checkpoint,
            log,
            scores,
        } => {
            let outcome = run_train(
                &config,
                &dataset,
                features.as_deref(),
                modality.into(),
                &checkpoint,
                log.as_deref(),
                scores.as_deref(),
            )?;
            println!(
                "trained {:?}: best val accuracy {:.4}, checkpoint {}",
                modality,
                outcome.val_accuracy,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            features,
            split,
            scores,
        } => {
            let split = match split {
                SplitArg::Val => EvalSplit::Val,
                SplitArg::All => EvalSplit::All,
            };
            let file = run_eval(
                &config,
                &checkpoint,
                &dataset,
                features.as_deref(),
                split,
                scores.as_deref(),
            )?;
            let top1 = top_k_accuracy(&file, 1)?;
            println!("evaluated {} samples: top-1 accuracy {top1:.4}", file.entries.len());
        }
        Command::Blend { a, b, wa, wb, out, per_class } => {
            let (fused, top1) = run_blend(&a, &b, (wa, wb), out.as_deref(), per_class.as_deref())?;
            println!("blended {} samples: top-1 accuracy {top1:.4}", fused.entries.len());
            for (class, acc) in per_class_accuracy(&fused)?.iter().enumerate() {
                println!("  class {class}: {acc:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
