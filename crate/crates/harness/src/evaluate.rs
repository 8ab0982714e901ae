//! Clean-split evaluation: deterministic center crop, eval-mode forward
//! pass, and the full metric report (accuracy, macro F1, confusion,
//! cluster validity, and the spread of the primary vs corrected
//! distributions).

use std::path::{Path, PathBuf};

use fel_core::checkpoint;
use fel_core::datagen::{center_crop, Dataset};
use fel_core::metrics::{
    accuracy, calinski_harabasz, confusion_matrix, davies_bouldin,
    distribution_spread, macro_f1, EvalReport,
};
use fel_core::model::{view, BatchEval, Model};

use crate::config::ExperimentConfig;
use crate::data::{check_matches, load_or_generate};
use crate::error::{HarnessError, Result};
use crate::train::atomic_write;

pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";

/// Assemble the full metric report from one evaluated batch. Cluster
/// validity scores that are undefined for the given geometry are
/// reported as null with an explanatory note instead of failing the
/// whole report.
pub fn build_report(
    eval: &BatchEval,
    labels: &[usize],
    n_classes: usize,
) -> Result<EvalReport> {
    let acc = accuracy(&eval.preds, labels)?;
    let f1 = macro_f1(&eval.preds, labels, n_classes)?;
    let conf = confusion_matrix(&eval.preds, labels, n_classes)?;
    let confusion: Vec<Vec<f64>> =
        (0..n_classes).map(|r| conf.row(r).to_vec()).collect();

    let mut notes = Vec::new();
    let db_score = match davies_bouldin(&eval.embeddings, labels) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("davies-bouldin unavailable: {e}"));
            None
        }
    };
    let ch_score = match calinski_harabasz(&eval.embeddings, labels) {
        Ok(v) if v.is_finite() => Some(v),
        Ok(_) => {
            notes.push(
                "calinski-harabasz: zero within-cluster scatter (reported as null)"
                    .to_string(),
            );
            None
        }
        Err(e) => {
            notes.push(format!("calinski-harabasz unavailable: {e}"));
            None
        }
    };
    let (primary_std, corrected_std) =
        distribution_spread(&eval.primary, &eval.final_dist)?;

    Ok(EvalReport {
        accuracy: acc,
        macro_f1: f1,
        confusion,
        db_score,
        ch_score,
        primary_std,
        corrected_std,
        notes,
    })
}

/// Evaluate a model on the dataset's clean balanced split, center-cropped
/// to the same geometry training used.
pub fn evaluate_dataset(model: &Model, ds: &Dataset) -> Result<EvalReport> {
    let cropped: Vec<_> = ds.eval.iter().map(center_crop).collect();
    let views: Vec<_> = cropped.iter().map(view).collect();
    let eval = model.evaluate_batch(&views)?;
    let labels: Vec<usize> = ds.eval.iter().map(|s| s.label).collect();
    build_report(&eval, &labels, ds.n_classes)
}

/// Build the configured model, load a checkpoint into it, and evaluate.
/// Container-level problems (bad magic, truncation, version) surface as
/// checkpoint errors; a well-formed checkpoint whose tensors do not fit
/// the configured geometry is an incompatibility error listing every
/// offending tensor shape.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ckpt: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let entries = checkpoint::load(ckpt)?;
    model
        .store
        .load_named_tensors(&entries)
        .map_err(|e| HarnessError::Incompatible(e.to_string()))?;
    let ds = load_or_generate(cfg)?;
    check_matches(cfg, &ds)?;
    evaluate_dataset(&model, &ds)
}

/// Write the report JSON and the confusion CSV into the output directory.
pub fn write_eval_artifacts(
    cfg: &ExperimentConfig,
    report: &EvalReport,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    let json_path = cfg.out_dir.join(EVAL_REPORT_FILE);
    atomic_write(&json_path, serde_json::to_string_pretty(report)?.as_bytes())?;
    let csv_path = cfg.out_dir.join(CONFUSION_FILE);
    atomic_write(&csv_path, report.confusion_csv().as_bytes())?;
    Ok((json_path, csv_path))
}
