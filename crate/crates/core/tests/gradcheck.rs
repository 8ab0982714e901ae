//! Finite-difference verification of the full training loss: analytic
//! reverse-mode gradients must match central differences for every
//! parameter group of the assembled model (encoder projections, window
//! bias tables, norms, MLPs, classifier head, anchors, and the attentive
//! corrector).

use fel_core::datagen::{generate, smooth_batch, DatasetSpec};
use fel_core::encoder::{EncoderConfig, LevelConfig};
use fel_core::loss::LossWeights;
use fel_core::model::{finite_difference_check, view, Model, ModelConfig};
use fel_core::rng::substream;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-4;

fn toy_config(levels: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            levels: vec![LevelConfig { grid: 2, window: 2 }; levels],
            feature_dim: 8,
            heads: 2,
            embed_dim: 8,
            image_channels: 2,
            landmark_channels: 2,
        },
        n_classes: 2,
        anchors_per_class: 2,
        delta: 1.0,
        enable_anchors: true,
        enable_mhsa: true,
        head_hidden: 8,
        dropout: 0.5,
        corrector_tokens: 2,
        corrector_heads: 2,
        loss_weights: LossWeights::default(),
    }
}

fn toy_spec(levels: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_classes: 2,
        per_class: 3,
        eval_per_class: 0,
        separation: 3.0,
        spread: 0.5,
        confusion_pairs: Vec::new(),
        imbalance_ratio: 1.0,
        group_size: 4,
        latent_dim: 4,
        image_channels: 2,
        landmark_channels: 2,
        level_sizes: vec![4; levels],
        landmark_size: 4,
        seed,
    }
}

fn run_check(levels: usize, seed: u64, per_param: usize) -> fel_core::gradcheck::GradCheckReport {
    let mut model = Model::new(toy_config(levels), seed).unwrap();
    let ds = generate(&toy_spec(levels, seed ^ 0x5eed)).unwrap();
    let samples: Vec<_> = ds.train.iter().take(4).collect();
    let views: Vec<_> = samples.iter().map(|s| view(s)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let targets = smooth_batch(&labels, 2, 11.0).unwrap();
    let mut coord_rng = substream(seed, "fd-coords");
    finite_difference_check(
        &mut model,
        &views,
        &targets,
        &labels,
        seed.wrapping_mul(31) + 7,
        FD_STEP,
        GRAD_FLOOR,
        per_param,
        &mut coord_rng,
    )
    .unwrap()
}

/// Two classes, two anchors per class, one pyramid level, ten seeds.
#[test]
fn toy_model_gradients_match_finite_differences_over_ten_seeds() {
    for seed in 0..10u64 {
        let report = run_check(1, seed, 6);
        assert!(
            report.passes(REL_TOL),
            "seed {seed}: max rel err {} at {:?} over {} coords",
            report.max_rel_err,
            report.worst,
            report.n_coords
        );
        assert!(report.n_coords > 100, "too few coordinates sampled");
    }
}

/// Two pyramid levels exercise the multiscale concatenation path.
#[test]
fn two_level_model_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let report = run_check(2, seed, 4);
        assert!(
            report.passes(REL_TOL),
            "seed {seed}: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
