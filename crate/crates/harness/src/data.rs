//! Dataset acquisition for experiments: generate from the configured
//! spec, or load a previously materialized directory and verify that it
//! matches the configured geometry.

use fel_core::datagen::{generate, load_dataset, Dataset};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Load the dataset named by `data.dir` if present, otherwise generate
/// one from the config's dataset spec. Loaded datasets are checked
/// against the configured geometry so a stale directory fails loudly.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            check_matches(cfg, &ds)?;
            Ok(ds)
        }
        None => Ok(generate(&cfg.dataset_spec())?),
    }
}

/// Verify a dataset's class count and stream shapes against the config,
/// listing every offending shape in the error.
pub fn check_matches(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    let mut problems = Vec::new();
    if ds.n_classes != cfg.n_classes {
        problems.push(format!(
            "class count: dataset has {}, config expects {}",
            ds.n_classes, cfg.n_classes
        ));
    }
    if let Some(s) = ds.train.first().or(ds.eval.first()) {
        if s.image_levels.len() != cfg.level_sizes.len() {
            problems.push(format!(
                "level count: dataset has {}, config expects {}",
                s.image_levels.len(),
                cfg.level_sizes.len()
            ));
        }
        for (li, (lvl, &side)) in
            s.image_levels.iter().zip(&cfg.level_sizes).enumerate()
        {
            let want = vec![side, side, cfg.image_channels];
            if lvl.shape() != want.as_slice() {
                problems.push(format!(
                    "image level {li}: dataset shape {:?}, config expects {:?}",
                    lvl.shape(),
                    want
                ));
            }
        }
        let want =
            vec![cfg.landmark_channels, cfg.landmark_size, cfg.landmark_size];
        if s.landmarks.shape() != want.as_slice() {
            problems.push(format!(
                "landmark map: dataset shape {:?}, config expects {:?}",
                s.landmarks.shape(),
                want
            ));
        }
    } else {
        problems.push("dataset has no samples".to_string());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!(
            "dataset does not match config: {}",
            problems.join("; ")
        )))
    }
}
