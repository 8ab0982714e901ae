//! Flat `key = value` experiment configuration with typed validation.
//!
//! The format is diff-friendly and language-neutral: one assignment per
//! line, full-line `#` comments, no sections. Unknown and duplicate keys
//! are rejected so a typo cannot silently fall back to a default. Every
//! key has a desk-scale default, so an empty file is a valid experiment.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fel_core::datagen::{DatasetSpec, RefinementConfig};
use fel_core::encoder::{EncoderConfig, LevelConfig};
use fel_core::loss::LossWeights;
use fel_core::model::ModelConfig;
use fel_core::optim::AdamConfig;
use fel_core::rng::fnv1a64;

use crate::error::{HarnessError, Result};

/// Fully resolved experiment description: dataset, model geometry,
/// reliability settings, loss weights, optimizer schedule, batch
/// refinement, label corruption, and run bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // Dataset.
    pub data_seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub n_classes: usize,
    pub per_class: usize,
    pub eval_per_class: usize,
    pub separation: f64,
    pub spread: f64,
    pub confusion_pairs: Vec<(usize, usize)>,
    pub imbalance_ratio: f64,
    pub group_size: usize,
    pub latent_dim: usize,
    pub image_channels: usize,
    pub landmark_channels: usize,
    pub level_sizes: Vec<usize>,
    pub landmark_size: usize,
    // Encoder geometry.
    pub levels: Vec<LevelConfig>,
    pub feature_dim: usize,
    pub heads: usize,
    pub embed_dim: usize,
    // Reliability balancing.
    pub anchors_per_class: usize,
    pub delta: f64,
    pub enable_anchors: bool,
    pub enable_mhsa: bool,
    pub head_hidden: usize,
    pub dropout: f64,
    pub corrector_tokens: usize,
    pub corrector_heads: usize,
    // Loss weights.
    pub lambda_cls: f64,
    pub lambda_anchor: f64,
    pub lambda_center: f64,
    // Optimizer schedule.
    pub lr0: f64,
    pub gamma: f64,
    pub epochs: u64,
    /// Number of optimizer steps the per-epoch balanced batch is split
    /// into. 1 means one pass over the whole `B x n_classes` batch per
    /// epoch (the literal protocol); larger values are a minibatch
    /// extension.
    pub batch_splits: usize,
    // Batch refinement.
    pub images_per_group: usize,
    pub per_class_batch: usize,
    // Label corruption.
    pub noise_rate: f64,
    pub smoothing_term: f64,
    // Run bookkeeping.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DatasetSpec::desk_scale(0);
        let m = ModelConfig::desk_scale(d.n_classes);
        let opt = AdamConfig::default();
        Self {
            data_seed: None,
            data_dir: None,
            n_classes: d.n_classes,
            per_class: d.per_class,
            eval_per_class: d.eval_per_class,
            separation: d.separation,
            spread: d.spread,
            confusion_pairs: d.confusion_pairs,
            imbalance_ratio: d.imbalance_ratio,
            group_size: d.group_size,
            latent_dim: d.latent_dim,
            image_channels: d.image_channels,
            landmark_channels: d.landmark_channels,
            level_sizes: d.level_sizes,
            landmark_size: d.landmark_size,
            levels: m.encoder.levels.clone(),
            feature_dim: m.encoder.feature_dim,
            heads: m.encoder.heads,
            embed_dim: m.encoder.embed_dim,
            anchors_per_class: m.anchors_per_class,
            delta: m.delta,
            enable_anchors: m.enable_anchors,
            enable_mhsa: m.enable_mhsa,
            head_hidden: m.head_hidden,
            dropout: m.dropout,
            corrector_tokens: m.corrector_tokens,
            corrector_heads: m.corrector_heads,
            lambda_cls: 1.0,
            lambda_anchor: 1.0,
            lambda_center: 1.0,
            lr0: opt.lr0,
            gamma: opt.gamma,
            epochs: 60,
            batch_splits: 1,
            images_per_group: 64,
            per_class_batch: 32,
            noise_rate: 0.0,
            smoothing_term: 11.0,
            seed: 0,
            out_dir: PathBuf::from("fel-out"),
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file, applying each assignment over the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => {
                HarnessError::Config(format!("{}: {m}", path.display()))
            }
            other => other,
        })
    }

    /// Parse config text: `key = value` lines, `#` comments, defaults for
    /// every omitted key. Unknown keys, duplicate keys, malformed values,
    /// and out-of-range settings are all errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let Some((k, v)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {lineno}: expected `key = value`, got {line:?}"
                )));
            };
            let key = k.trim();
            let value = v.trim();
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Config(format!(
                    "line {lineno}: duplicate key `{key}`"
                )));
            }
            cfg.set(key, value).map_err(|e| match e {
                HarnessError::Config(m) => {
                    HarnessError::Config(format!("line {lineno}: {m}"))
                }
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.seed" => self.data_seed = Some(p_u64(key, value)?),
            "data.dir" => {
                self.data_dir =
                    if value == "none" { None } else { Some(PathBuf::from(value)) }
            }
            "data.n_classes" => self.n_classes = p_usize(key, value)?,
            "data.per_class" => self.per_class = p_usize(key, value)?,
            "data.eval_per_class" => self.eval_per_class = p_usize(key, value)?,
            "data.separation" => self.separation = p_f64(key, value)?,
            "data.spread" => self.spread = p_f64(key, value)?,
            "data.confusion_pairs" => self.confusion_pairs = p_pairs(key, value)?,
            "data.imbalance_ratio" => self.imbalance_ratio = p_f64(key, value)?,
            "data.group_size" => self.group_size = p_usize(key, value)?,
            "data.latent_dim" => self.latent_dim = p_usize(key, value)?,
            "data.image_channels" => self.image_channels = p_usize(key, value)?,
            "data.landmark_channels" => self.landmark_channels = p_usize(key, value)?,
            "data.level_sizes" => self.level_sizes = p_usize_list(key, value)?,
            "data.landmark_size" => self.landmark_size = p_usize(key, value)?,
            "enc.levels" => self.levels = p_levels(key, value)?,
            "enc.feature_dim" => self.feature_dim = p_usize(key, value)?,
            "enc.heads" => self.heads = p_usize(key, value)?,
            "enc.embed_dim" => self.embed_dim = p_usize(key, value)?,
            "rb.anchors_per_class" => self.anchors_per_class = p_usize(key, value)?,
            "rb.delta" => self.delta = p_f64(key, value)?,
            "rb.enable_anchors" => self.enable_anchors = p_bool(key, value)?,
            "rb.enable_mhsa" => self.enable_mhsa = p_bool(key, value)?,
            "rb.head_hidden" => self.head_hidden = p_usize(key, value)?,
            "rb.dropout" => self.dropout = p_f64(key, value)?,
            "rb.corrector_tokens" => self.corrector_tokens = p_usize(key, value)?,
            "rb.corrector_heads" => self.corrector_heads = p_usize(key, value)?,
            "loss.lambda_cls" => self.lambda_cls = p_f64(key, value)?,
            "loss.lambda_anchor" => self.lambda_anchor = p_f64(key, value)?,
            "loss.lambda_center" => self.lambda_center = p_f64(key, value)?,
            "opt.lr0" => self.lr0 = p_f64(key, value)?,
            "opt.gamma" => self.gamma = p_f64(key, value)?,
            "opt.epochs" => self.epochs = p_u64(key, value)?,
            "opt.batch_splits" => self.batch_splits = p_usize(key, value)?,
            "refine.images_per_group" => self.images_per_group = p_usize(key, value)?,
            "refine.per_class" => self.per_class_batch = p_usize(key, value)?,
            "noise.rate" => self.noise_rate = p_f64(key, value)?,
            "smooth.term" => self.smoothing_term = p_f64(key, value)?,
            "seed" => self.seed = p_u64(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(HarnessError::Config(format!(
                    "unknown config key `{key}`"
                )))
            }
        }
        Ok(())
    }

    /// Check every numeric range. Called by the parser; also callable on
    /// programmatically built configs.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.model_config().validate()?;
        if self.levels.len() != self.level_sizes.len() {
            return Err(HarnessError::Config(format!(
                "enc.levels has {} entries but data.level_sizes has {}; \
                 one canvas per attention level is required",
                self.levels.len(),
                self.level_sizes.len()
            )));
        }
        if self.enable_mhsa {
            if self.corrector_tokens == 0
                || !self.embed_dim.is_multiple_of(self.corrector_tokens)
            {
                return Err(HarnessError::Config(format!(
                    "rb.corrector_tokens ({}) must divide enc.embed_dim ({})",
                    self.corrector_tokens, self.embed_dim
                )));
            }
            let token_width = self.embed_dim / self.corrector_tokens;
            if self.corrector_heads == 0 || !token_width.is_multiple_of(self.corrector_heads) {
                return Err(HarnessError::Config(format!(
                    "rb.corrector_heads ({}) must divide the corrector token \
                     width ({token_width})",
                    self.corrector_heads
                )));
            }
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(HarnessError::Config(format!(
                "opt.lr0 must be positive and finite, got {}",
                self.lr0
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(HarnessError::Config(format!(
                "opt.gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.epochs == 0 {
            return Err(HarnessError::Config("opt.epochs must be at least 1".into()));
        }
        let batch = self.per_class_batch * self.n_classes;
        if self.batch_splits == 0 || self.batch_splits > batch {
            return Err(HarnessError::Config(format!(
                "opt.batch_splits must lie in [1, {batch}] (the balanced batch \
                 size), got {}",
                self.batch_splits
            )));
        }
        self.refinement_config().validate()?;
        if !(0.0..=0.5).contains(&self.noise_rate) || !self.noise_rate.is_finite() {
            return Err(HarnessError::Config(format!(
                "noise.rate must lie in [0, 0.5], got {}",
                self.noise_rate
            )));
        }
        if !(0.0..=50.0).contains(&self.smoothing_term)
            || !self.smoothing_term.is_finite()
        {
            return Err(HarnessError::Config(format!(
                "smooth.term must lie in [0, 50], got {}",
                self.smoothing_term
            )));
        }
        Ok(())
    }

    /// Seed for dataset generation: explicit `data.seed` if given,
    /// otherwise derived from the run seed so one knob reproduces
    /// everything.
    pub fn resolved_data_seed(&self) -> u64 {
        self.data_seed
            .unwrap_or_else(|| fnv1a64(format!("dataset:{}", self.seed).as_bytes()))
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_classes: self.n_classes,
            per_class: self.per_class,
            eval_per_class: self.eval_per_class,
            separation: self.separation,
            spread: self.spread,
            confusion_pairs: self.confusion_pairs.clone(),
            imbalance_ratio: self.imbalance_ratio,
            group_size: self.group_size,
            latent_dim: self.latent_dim,
            image_channels: self.image_channels,
            landmark_channels: self.landmark_channels,
            level_sizes: self.level_sizes.clone(),
            landmark_size: self.landmark_size,
            seed: self.resolved_data_seed(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                levels: self.levels.clone(),
                feature_dim: self.feature_dim,
                heads: self.heads,
                embed_dim: self.embed_dim,
                image_channels: self.image_channels,
                landmark_channels: self.landmark_channels,
            },
            n_classes: self.n_classes,
            anchors_per_class: self.anchors_per_class,
            delta: self.delta,
            enable_anchors: self.enable_anchors,
            enable_mhsa: self.enable_mhsa,
            head_hidden: self.head_hidden,
            dropout: self.dropout,
            corrector_tokens: self.corrector_tokens,
            corrector_heads: self.corrector_heads,
            loss_weights: LossWeights {
                lambda_cls: self.lambda_cls,
                lambda_a: self.lambda_anchor,
                lambda_c: self.lambda_center,
            },
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr0: self.lr0, gamma: self.gamma, ..AdamConfig::default() }
    }

    pub fn refinement_config(&self) -> RefinementConfig {
        RefinementConfig {
            images_per_group: self.images_per_group,
            per_class: self.per_class_batch,
        }
    }

    /// Canonical serialization: every key in a fixed order with its
    /// resolved value, one per line. Two configs with the same effective
    /// settings canonicalize identically.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(&mut s, "data.seed", self.resolved_data_seed().to_string());
        kv(
            &mut s,
            "data.dir",
            self.data_dir
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        );
        kv(&mut s, "data.n_classes", self.n_classes.to_string());
        kv(&mut s, "data.per_class", self.per_class.to_string());
        kv(&mut s, "data.eval_per_class", self.eval_per_class.to_string());
        kv(&mut s, "data.separation", self.separation.to_string());
        kv(&mut s, "data.spread", self.spread.to_string());
        kv(&mut s, "data.confusion_pairs", fmt_pairs(&self.confusion_pairs));
        kv(&mut s, "data.imbalance_ratio", self.imbalance_ratio.to_string());
        kv(&mut s, "data.group_size", self.group_size.to_string());
        kv(&mut s, "data.latent_dim", self.latent_dim.to_string());
        kv(&mut s, "data.image_channels", self.image_channels.to_string());
        kv(&mut s, "data.landmark_channels", self.landmark_channels.to_string());
        kv(&mut s, "data.level_sizes", fmt_usize_list(&self.level_sizes));
        kv(&mut s, "data.landmark_size", self.landmark_size.to_string());
        kv(&mut s, "enc.levels", fmt_levels(&self.levels));
        kv(&mut s, "enc.feature_dim", self.feature_dim.to_string());
        kv(&mut s, "enc.heads", self.heads.to_string());
        kv(&mut s, "enc.embed_dim", self.embed_dim.to_string());
        kv(&mut s, "rb.anchors_per_class", self.anchors_per_class.to_string());
        kv(&mut s, "rb.delta", self.delta.to_string());
        kv(&mut s, "rb.enable_anchors", self.enable_anchors.to_string());
        kv(&mut s, "rb.enable_mhsa", self.enable_mhsa.to_string());
        kv(&mut s, "rb.head_hidden", self.head_hidden.to_string());
        kv(&mut s, "rb.dropout", self.dropout.to_string());
        kv(&mut s, "rb.corrector_tokens", self.corrector_tokens.to_string());
        kv(&mut s, "rb.corrector_heads", self.corrector_heads.to_string());
        kv(&mut s, "loss.lambda_cls", self.lambda_cls.to_string());
        kv(&mut s, "loss.lambda_anchor", self.lambda_anchor.to_string());
        kv(&mut s, "loss.lambda_center", self.lambda_center.to_string());
        kv(&mut s, "opt.lr0", self.lr0.to_string());
        kv(&mut s, "opt.gamma", self.gamma.to_string());
        kv(&mut s, "opt.epochs", self.epochs.to_string());
        kv(&mut s, "opt.batch_splits", self.batch_splits.to_string());
        kv(&mut s, "refine.images_per_group", self.images_per_group.to_string());
        kv(&mut s, "refine.per_class", self.per_class_batch.to_string());
        kv(&mut s, "noise.rate", self.noise_rate.to_string());
        kv(&mut s, "smooth.term", self.smoothing_term.to_string());
        kv(&mut s, "seed", self.seed.to_string());
        kv(&mut s, "out_dir", self.out_dir.display().to_string());
        s
    }

    /// Stable 64-bit hash of the canonical form, as fixed-width hex.
    pub fn config_hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical().as_bytes()))
    }
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "an unsigned integer"))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(key, v, "an unsigned integer"))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "`true` or `false`")),
    }
}

fn p_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| p_usize(key, p.trim())).collect()
}

/// `grid:window` pairs, e.g. `8:2,4:2,2:2`.
fn p_levels(key: &str, v: &str) -> Result<Vec<LevelConfig>> {
    v.split(',')
        .map(|p| {
            let p = p.trim();
            let Some((g, w)) = p.split_once(':') else {
                return Err(bad(key, p, "a `grid:window` pair"));
            };
            Ok(LevelConfig { grid: p_usize(key, g.trim())?, window: p_usize(key, w.trim())? })
        })
        .collect()
}

/// `keep-blend` pairs, e.g. `0-1,2-3`, or `none`.
fn p_pairs(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    if v == "none" || v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            let p = p.trim();
            let Some((a, b)) = p.split_once('-') else {
                return Err(bad(key, p, "a `keep-blend` class pair"));
            };
            Ok((p_usize(key, a.trim())?, p_usize(key, b.trim())?))
        })
        .collect()
}

fn bad(key: &str, v: &str, want: &str) -> HarnessError {
    HarnessError::Config(format!("key `{key}`: expected {want}, got {v:?}"))
}

fn fmt_pairs(pairs: &[(usize, usize)]) -> String {
    if pairs.is_empty() {
        return "none".to_string();
    }
    pairs.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(",")
}

fn fmt_usize_list(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_levels(levels: &[LevelConfig]) -> String {
    levels
        .iter()
        .map(|l| format!("{}:{}", l.grid, l.window))
        .collect::<Vec<_>>()
        .join(",")
}
