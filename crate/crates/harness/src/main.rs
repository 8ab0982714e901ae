//! `fel`: generate synthetic datasets, train, evaluate, and run ablation
//! sweeps, driven by flat `key = value` config files. Every failure exits
//! nonzero with a single `error: ...` line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fel_harness::ablate::{run_sweep, write_sweep_csv, Sweep};
use fel_harness::config::ExperimentConfig;
use fel_harness::evaluate::{evaluate_checkpoint, write_eval_artifacts};
use fel_harness::train::{train, write_artifacts};

#[derive(Parser)]
#[command(
    name = "fel",
    version,
    about = "Deterministic facial-expression-learning experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it to a directory.
    GenData {
        /// Config file; its data.* keys describe the dataset.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for the dataset files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the checkpoint plus run record.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the config's clean split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint produced by `fel train`.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run one ablation sweep and append its CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: k, noise, smoothing, loss-setup, rb-setup, lambda.
        #[arg(long)]
        sweep: String,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, out } => {
            let cfg = ExperimentConfig::load(&spec)?;
            let ds = fel_core::datagen::generate(&cfg.dataset_spec())?;
            fel_core::datagen::save_dataset(&ds, &out)?;
            println!(
                "wrote dataset: dir={} classes={} train={} eval={}",
                out.display(),
                ds.n_classes,
                ds.train.len(),
                ds.eval.len()
            );
        }
        Cmd::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = train(&cfg)?;
            let (ckpt, record) = write_artifacts(&cfg, &outcome)?;
            println!(
                "trained: checkpoint={} record={} accuracy={:.4} macro_f1={:.4}",
                ckpt.display(),
                record.display(),
                outcome.record.eval.accuracy,
                outcome.record.eval.macro_f1
            );
        }
        Cmd::Eval { config, ckpt } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = evaluate_checkpoint(&cfg, &ckpt)?;
            let (json, csv) = write_eval_artifacts(&cfg, &report)?;
            println!(
                "evaluated: report={} confusion={} accuracy={:.4} macro_f1={:.4} \
                 primary_std={:.6} corrected_std={:.6}",
                json.display(),
                csv.display(),
                report.accuracy,
                report.macro_f1,
                report.primary_std,
                report.corrected_std
            );
        }
        Cmd::Ablate { config, sweep } => {
            let cfg = ExperimentConfig::load(&config)?;
            let sweep: Sweep = sweep.parse()?;
            let table = run_sweep(&cfg, sweep)?;
            let path = write_sweep_csv(&cfg, sweep, &table)?;
            println!(
                "swept: sweep={} cells={} csv={}",
                sweep.name(),
                table.rows.len(),
                path.display()
            );
        }
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.replace('\n', "; ")
}
