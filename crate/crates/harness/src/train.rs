//! The training loop: per epoch, draw a balanced refined batch, augment
//! it, smooth the labels, take one (or several) optimizer steps, and
//! record every loss term. Training ends with a clean-split evaluation
//! and an atomically written checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use fel_core::datagen::{augment, inject_noise, refine_batch, AugmentConfig, Dataset};
use fel_core::metrics::EvalReport;
use fel_core::model::{view, Model};
use fel_core::nn::Session;
use fel_core::optim::Adam;
use fel_core::rng::{substream, substream_indexed};

use crate::config::ExperimentConfig;
use crate::data::load_or_generate;
use crate::error::{HarnessError, Result};
use crate::evaluate::evaluate_dataset;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const RUN_RECORD_FILE: &str = "run_record.json";

/// Loss terms for one epoch, averaged over its optimizer steps. The
/// optional terms are absent when the anchor branch is disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub class: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
}

/// Everything a finished run reports: loss curves, final clean-split
/// metrics, timing, and identity of the configuration and code.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub eval: EvalReport,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The deterministic portion of the record: everything except wall
    /// clock. Two runs of the same (config, seed) must agree on this.
    pub fn reproducible_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("record serializes");
        v.as_object_mut().expect("record is an object").remove("wall_clock_secs");
        v
    }
}

/// A trained model together with the dataset it saw and the run record.
pub struct TrainOutcome {
    pub model: Model,
    pub dataset: Dataset,
    pub record: RunRecord,
}

/// Run the full training protocol described by the config. Label noise
/// (if any) corrupts the in-memory training labels only; the evaluation
/// split stays clean, and nothing on disk is modified.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();

    let mut ds = load_or_generate(cfg)?;
    if cfg.noise_rate > 0.0 {
        let labels: Vec<usize> = ds.train.iter().map(|s| s.label).collect();
        let mut rng = substream(cfg.seed, "label-noise");
        let (noisy, _flipped) =
            inject_noise(&labels, cfg.n_classes, cfg.noise_rate, &mut rng)?;
        for (s, &l) in ds.train.iter_mut().zip(&noisy) {
            s.label = l;
        }
    }

    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam_config(), &model.store)?;
    let rc = cfg.refinement_config();
    let aug = AugmentConfig::standard();

    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let mut rng = substream_indexed(cfg.seed, "epoch", epoch);
        let refined = refine_batch(&ds.train, cfg.n_classes, &rc, &mut rng)?;
        let samples: Vec<_> = refined
            .indices
            .iter()
            .map(|&i| augment(&ds.train[i], &aug, &mut rng))
            .collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();

        let lr = adam.lr_at_epoch(epoch);
        let chunk = samples.len().div_ceil(cfg.batch_splits);
        let mut sums = TermSums::default();
        for (step, (chunk_samples, chunk_labels)) in
            samples.chunks(chunk).zip(labels.chunks(chunk)).enumerate()
        {
            let targets = fel_core::datagen::smooth_batch(
                chunk_labels,
                cfg.n_classes,
                cfg.smoothing_term,
            )?;
            let views: Vec<_> = chunk_samples.iter().map(view).collect();
            let batch = model.prepare_batch(&views)?;
            let grads = {
                let session_rng = substream_indexed(
                    cfg.seed,
                    "session",
                    epoch * cfg.batch_splits as u64 + step as u64,
                );
                let s = Session::new(&model.store, true, session_rng);
                let out = model.forward(&s, &batch)?;
                let terms =
                    model.training_loss_terms(&s, &out, &targets, chunk_labels)?;
                let total = terms.total.value().item();
                if !total.is_finite() {
                    return Err(HarnessError::Diverged { epoch, step, value: total });
                }
                sums.add(&terms);
                s.grads_by_param(&terms.total.backward()?)
            };
            adam.step(&mut model.store, &grads, lr)?;
        }
        epochs.push(sums.into_record(epoch, lr));
    }

    let eval = evaluate_dataset(&model, &ds)?;
    let record = RunRecord {
        config_hash: cfg.config_hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        epochs,
        eval,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, dataset: ds, record })
}

/// Write the checkpoint and run record into the config's output
/// directory. Both files are written to a temporary name and renamed,
/// so a crash never leaves a half-written artifact behind.
pub fn write_artifacts(
    cfg: &ExperimentConfig,
    outcome: &TrainOutcome,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| HarnessError::io(&cfg.out_dir, e))?;

    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    let tmp = cfg.out_dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    outcome.model.save(&tmp)?;
    std::fs::rename(&tmp, &ckpt).map_err(|e| HarnessError::io(&ckpt, e))?;

    let record = cfg.out_dir.join(RUN_RECORD_FILE);
    let json = serde_json::to_string_pretty(&outcome.record)?;
    atomic_write(&record, json.as_bytes())?;
    Ok((ckpt, record))
}

/// Write bytes to `path` via a sibling temporary file plus rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

#[derive(Default)]
struct TermSums {
    steps: usize,
    total: f64,
    class: f64,
    separation: Option<f64>,
    center: Option<f64>,
}

impl TermSums {
    fn add(&mut self, terms: &fel_core::model::LossTerms) {
        self.steps += 1;
        self.total += terms.total.value().item();
        self.class += terms.class.value().item();
        if let Some(t) = &terms.separation {
            *self.separation.get_or_insert(0.0) += t.value().item();
        }
        if let Some(t) = &terms.center {
            *self.center.get_or_insert(0.0) += t.value().item();
        }
    }

    fn into_record(self, epoch: u64, lr: f64) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            epoch,
            lr,
            total: self.total / n,
            class: self.class / n,
            separation: self.separation.map(|v| v / n),
            center: self.center.map(|v| v / n),
        }
    }
}
