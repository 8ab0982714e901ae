//! Synthetic two-stream dataset generation plus the training-time data
//! plumbing: augmentation, group-based balanced batch refinement, label
//! noise injection and label smoothing.
//!
//! Samples live in a latent space of class-conditional Gaussians. Each
//! class owns a unit direction; confusion pairs blend the second class's
//! direction toward the first so their clusters entangle geometrically.
//! A latent vector is rendered into per-level image canvases (`[H, W, C]`
//! in [0, 1]) and a landmark map (`[C, H, W]`) through fixed random
//! sigmoid projections shared by all classes, so latent proximity becomes
//! pixel-space proximity. Generation is a pure function of the spec and
//! its seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{FelError, Result};
use crate::rng::{substream, substream_indexed};
use crate::tensor::Tensor;

/// One generated sample: per-level image canvases, a landmark map, the
/// true class and a group id (the video/identity analog used by batch
/// refinement).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// Per level `[H, W, C]`, values in [0, 1].
    pub image_levels: Vec<Tensor>,
    /// `[C, H, W]`, values in [0, 1].
    pub landmarks: Tensor,
    pub label: usize,
    pub group_id: usize,
}

/// Everything needed to generate a dataset deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_classes: usize,
    /// Nominal training samples for class 0; later classes shrink by the
    /// imbalance ratio.
    pub per_class: usize,
    /// Clean, balanced held-out samples per class.
    pub eval_per_class: usize,
    /// Distance of each class mean from the latent origin. Larger means
    /// easier classes.
    pub separation: f64,
    /// Standard deviation of latent samples around their class mean.
    pub spread: f64,
    /// Pairs `(keep, blend)`: class `blend`'s direction is pulled toward
    /// class `keep`'s so the two clusters overlap.
    pub confusion_pairs: Vec<(usize, usize)>,
    /// Ratio between the largest and smallest class size (>= 1). Class c
    /// receives `per_class * ratio^(-c / (n_classes - 1))` samples.
    pub imbalance_ratio: f64,
    /// Consecutive same-class samples sharing one group id.
    pub group_size: usize,
    pub latent_dim: usize,
    pub image_channels: usize,
    pub landmark_channels: usize,
    /// Source canvas side per level, largest first at desk scale.
    pub level_sizes: Vec<usize>,
    pub landmark_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Defaults matched to the desk-scale encoder geometry.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            n_classes: 8,
            per_class: 250,
            eval_per_class: 40,
            separation: 3.0,
            spread: 1.0,
            confusion_pairs: Vec::new(),
            imbalance_ratio: 1.0,
            group_size: 16,
            latent_dim: 16,
            image_channels: 3,
            landmark_channels: 4,
            level_sizes: vec![32, 16, 8],
            landmark_size: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(FelError::Config("dataset needs at least one class".into()));
        }
        if self.per_class == 0 {
            return Err(FelError::Config("per-class sample count must be positive".into()));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(FelError::Config(format!(
                "class separation must be positive, got {}",
                self.separation
            )));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(FelError::Config(format!(
                "intra-class spread must be nonnegative, got {}",
                self.spread
            )));
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return Err(FelError::Config(format!(
                "imbalance ratio must be at least 1, got {}",
                self.imbalance_ratio
            )));
        }
        if self.group_size == 0 || self.latent_dim == 0 {
            return Err(FelError::Config(
                "group size and latent width must be positive".into(),
            ));
        }
        if self.image_channels == 0 || self.landmark_channels == 0 {
            return Err(FelError::Config("stream channel counts must be positive".into()));
        }
        if self.level_sizes.is_empty() || self.level_sizes.contains(&0) {
            return Err(FelError::Config("level sizes must be positive".into()));
        }
        if self.landmark_size == 0 {
            return Err(FelError::Config("landmark size must be positive".into()));
        }
        for &(a, b) in &self.confusion_pairs {
            if a >= self.n_classes || b >= self.n_classes || a == b {
                return Err(FelError::Config(format!(
                    "confusion pair ({a}, {b}) invalid for {} classes",
                    self.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Training-sample count for one class under the imbalance profile.
    pub fn class_count(&self, class: usize) -> usize {
        if self.n_classes == 1 || self.imbalance_ratio == 1.0 {
            return self.per_class;
        }
        let expo = -(class as f64) / (self.n_classes as f64 - 1.0);
        ((self.per_class as f64) * self.imbalance_ratio.powf(expo)).round().max(1.0) as usize
    }
}

/// A generated dataset. Latents and class means are kept for diagnostics
/// and oracle tests; they are not persisted by [`save_dataset`] and are
/// empty after [`load_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
    pub train_latents: Vec<Vec<f64>>,
    pub eval_latents: Vec<Vec<f64>>,
    pub class_means: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Side length of the coarse random weight field each canvas is rendered
/// from. Keeping the latent-to-pixel map at this low spatial frequency
/// (bilinearly upsampled to the canvas) ensures class patterns survive
/// the encoder's grid pooling instead of living at per-pixel frequency
/// where cell averaging would wash them out.
const RENDER_GRID: usize = 4;

/// Bilinear upsample a coarse `[r, r]` plane to `[side, side]` with
/// corner alignment, so equal sizes are the identity.
fn upsample_plane(coarse: &[f64], r: usize, side: usize, mut set: impl FnMut(usize, usize, f64)) {
    let scale = if side > 1 { (r as f64 - 1.0) / (side as f64 - 1.0) } else { 0.0 };
    for y in 0..side {
        let fy = y as f64 * scale;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(r - 1);
        let wy = fy - y0 as f64;
        for x in 0..side {
            let fx = x as f64 * scale;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(r - 1);
            let wx = fx - x0 as f64;
            let v = coarse[y0 * r + x0] * (1.0 - wy) * (1.0 - wx)
                + coarse[y0 * r + x1] * (1.0 - wy) * wx
                + coarse[y1 * r + x0] * wy * (1.0 - wx)
                + coarse[y1 * r + x1] * wy * wx;
            set(y, x, v);
        }
    }
}

/// Fixed random sigmoid renderers mapping latents to both streams. Each
/// channel of each canvas is a smooth field: a coarse grid of random
/// latent projections, bilinearly upsampled, then squashed to [0, 1].
struct Renderer {
    /// Per level: `[coarse * coarse * channels, latent_dim]`.
    image_weights: Vec<Tensor>,
    image_grids: Vec<usize>,
    /// `[channels * coarse * coarse, latent_dim]`.
    lm_weights: Tensor,
    lm_grid: usize,
}

impl Renderer {
    fn new(spec: &DatasetSpec) -> Self {
        let std = 1.0 / (spec.latent_dim as f64).sqrt();
        let image_grids: Vec<usize> =
            spec.level_sizes.iter().map(|&side| side.min(RENDER_GRID)).collect();
        let image_weights = image_grids
            .iter()
            .enumerate()
            .map(|(li, &grid)| {
                let mut rng = substream_indexed(spec.seed, "render-image", li as u64);
                Tensor::randn(&[grid * grid * spec.image_channels, spec.latent_dim], std, &mut rng)
            })
            .collect();
        let lm_grid = spec.landmark_size.min(RENDER_GRID);
        let mut rng = substream(spec.seed, "render-landmark");
        let lm_weights = Tensor::randn(
            &[spec.landmark_channels * lm_grid * lm_grid, spec.latent_dim],
            std,
            &mut rng,
        );
        Self { image_weights, image_grids, lm_weights, lm_grid }
    }

    fn render(&self, spec: &DatasetSpec, z: &[f64]) -> (Vec<Tensor>, Tensor) {
        let project = |w: &Tensor| -> Vec<f64> {
            let (rows, _) = w.dims2();
            (0..rows).map(|r| w.row(r).iter().zip(z).map(|(a, b)| a * b).sum()).collect()
        };

        let images = self
            .image_weights
            .iter()
            .zip(&self.image_grids)
            .zip(&spec.level_sizes)
            .map(|((w, &grid), &side)| {
                // Coarse logits laid out [grid, grid, C].
                let coarse = project(w);
                let c = spec.image_channels;
                let mut out = vec![0.0; side * side * c];
                for ch in 0..c {
                    let plane: Vec<f64> =
                        (0..grid * grid).map(|i| coarse[i * c + ch]).collect();
                    upsample_plane(&plane, grid, side, |y, x, v| {
                        out[(y * side + x) * c + ch] = sigmoid(v);
                    });
                }
                Tensor::new(vec![side, side, c], out).unwrap()
            })
            .collect();

        // Landmark logits laid out [C, grid, grid].
        let coarse = project(&self.lm_weights);
        let (c, side, grid) = (spec.landmark_channels, spec.landmark_size, self.lm_grid);
        let mut lm = vec![0.0; c * side * side];
        for ch in 0..c {
            let plane = &coarse[ch * grid * grid..(ch + 1) * grid * grid];
            upsample_plane(plane, grid, side, |y, x, v| {
                lm[(ch * side + y) * side + x] = sigmoid(v);
            });
        }
        let lm = Tensor::new(vec![c, side, side], lm).unwrap();
        (images, lm)
    }
}

/// Class mean directions after confusion blending, scaled by separation.
fn class_means(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = substream(spec.seed, "class-directions");
    let mut dirs: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let mut d = Tensor::randn(&[spec.latent_dim], 1.0, &mut rng).data().to_vec();
            normalize(&mut d);
            d
        })
        .collect();
    for &(keep, blend) in &spec.confusion_pairs {
        let mut mixed: Vec<f64> = dirs[keep]
            .iter()
            .zip(&dirs[blend])
            .map(|(a, b)| a + 0.5 * b)
            .collect();
        normalize(&mut mixed);
        dirs[blend] = mixed;
    }
    for d in &mut dirs {
        for x in d.iter_mut() {
            *x *= spec.separation;
        }
    }
    dirs
}

/// Generate a dataset: imbalanced grouped training samples plus a clean,
/// balanced evaluation split. Bitwise deterministic per (spec, seed).
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = class_means(spec);
    let renderer = Renderer::new(spec);

    let draw = |tag: &str, index: u64, mean: &[f64]| -> Vec<f64> {
        let mut rng = substream_indexed(spec.seed, tag, index);
        let eps = Tensor::randn(&[spec.latent_dim], 1.0, &mut rng);
        mean.iter().zip(eps.data()).map(|(m, e)| m + spec.spread * e).collect()
    };

    let mut train = Vec::new();
    let mut train_latents = Vec::new();
    let mut group_id = 0usize;
    let mut sample_index = 0u64;
    for (class, mean) in means.iter().enumerate() {
        let count = spec.class_count(class);
        for i in 0..count {
            if i > 0 && i % spec.group_size == 0 {
                group_id += 1;
            }
            let z = draw("train-sample", sample_index, mean);
            sample_index += 1;
            let (images, lm) = renderer.render(spec, &z);
            train.push(SyntheticSample {
                image_levels: images,
                landmarks: lm,
                label: class,
                group_id,
            });
            train_latents.push(z);
        }
        group_id += 1;
    }

    let mut eval = Vec::new();
    let mut eval_latents = Vec::new();
    let mut eval_index = 0u64;
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.eval_per_class {
            let z = draw("eval-sample", eval_index, mean);
            eval_index += 1;
            let (images, lm) = renderer.render(spec, &z);
            eval.push(SyntheticSample {
                image_levels: images,
                landmarks: lm,
                label: class,
                group_id,
            });
            eval_latents.push(z);
            group_id += 1;
        }
    }

    Ok(Dataset {
        n_classes: spec.n_classes,
        train,
        eval,
        train_latents,
        eval_latents,
        class_means: means,
    })
}

/// Augmentation amplitudes; all zero plus `random_crop: false` makes the
/// pipeline a deterministic center crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    /// Per-channel gain/offset amplitude (0.1 = +-10%).
    pub max_jitter: f64,
    pub flip_prob: f64,
    pub random_crop: bool,
}

impl AugmentConfig {
    pub fn standard() -> Self {
        Self { max_rotation_deg: 15.0, max_jitter: 0.1, flip_prob: 0.5, random_crop: true }
    }

    pub fn none() -> Self {
        Self { max_rotation_deg: 0.0, max_jitter: 0.0, flip_prob: 0.0, random_crop: false }
    }
}

/// Crop target for a source side: seven eighths, at least 1.
pub fn crop_target(side: usize) -> usize {
    (side * 7 / 8).max(1)
}

/// Rotate around the canvas center by `deg` degrees with bilinear
/// sampling and edge clamping. `get(y, x)` reads one channel plane.
fn rotate_plane(
    h: usize,
    w: usize,
    deg: f64,
    get: impl Fn(usize, usize) -> f64,
    mut set: impl FnMut(usize, usize, f64),
) {
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            let y0 = sy.floor().clamp(0.0, h as f64 - 1.0) as usize;
            let x0 = sx.floor().clamp(0.0, w as f64 - 1.0) as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = (sy - y0 as f64).clamp(0.0, 1.0);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            let v = get(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + get(y0, x1) * (1.0 - fy) * fx
                + get(y1, x0) * fy * (1.0 - fx)
                + get(y1, x1) * fy * fx;
            set(y, x, v);
        }
    }
}

fn rotate_hwc(t: &Tensor, deg: f64) -> Tensor {
    if deg == 0.0 {
        return t.clone();
    }
    let [h, w, c] = *t.shape() else { unreachable!("hwc rank") };
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        rotate_plane(
            h,
            w,
            deg,
            |y, x| t.data()[(y * w + x) * c + ch],
            |y, x, v| out[(y * w + x) * c + ch] = v,
        );
    }
    Tensor::new(vec![h, w, c], out).unwrap()
}

fn rotate_chw(t: &Tensor, deg: f64) -> Tensor {
    if deg == 0.0 {
        return t.clone();
    }
    let [c, h, w] = *t.shape() else { unreachable!("chw rank") };
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        rotate_plane(
            h,
            w,
            deg,
            |y, x| t.data()[(ch * h + y) * w + x],
            |y, x, v| out[(ch * h + y) * w + x] = v,
        );
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

/// Crop with the offset chosen as a fraction of the slack in each axis.
fn crop_hwc(t: &Tensor, th: usize, tw: usize, fy: f64, fx: f64) -> Tensor {
    let [h, w, c] = *t.shape() else { unreachable!("hwc rank") };
    let oy = ((h - th) as f64 * fy).round() as usize;
    let ox = ((w - tw) as f64 * fx).round() as usize;
    let mut out = Vec::with_capacity(th * tw * c);
    for y in 0..th {
        let row = &t.data()[((y + oy) * w + ox) * c..((y + oy) * w + ox + tw) * c];
        out.extend_from_slice(row);
    }
    Tensor::new(vec![th, tw, c], out).unwrap()
}

fn crop_chw(t: &Tensor, th: usize, tw: usize, fy: f64, fx: f64) -> Tensor {
    let [c, h, w] = *t.shape() else { unreachable!("chw rank") };
    let oy = ((h - th) as f64 * fy).round() as usize;
    let ox = ((w - tw) as f64 * fx).round() as usize;
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        for y in 0..th {
            let base = (ch * h + y + oy) * w + ox;
            out.extend_from_slice(&t.data()[base..base + tw]);
        }
    }
    Tensor::new(vec![c, th, tw], out).unwrap()
}

fn hflip_hwc(t: &Tensor) -> Tensor {
    let [h, w, c] = *t.shape() else { unreachable!("hwc rank") };
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + (w - 1 - x)) * c;
            let dst = (y * w + x) * c;
            out[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
        }
    }
    Tensor::new(vec![h, w, c], out).unwrap()
}

fn hflip_chw(t: &Tensor) -> Tensor {
    let [c, h, w] = *t.shape() else { unreachable!("chw rank") };
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = t.data()[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

fn jitter_clip(data: &mut [f64], channels: usize, gains: &[f64], offsets: &[f64], chw: bool, plane: usize) {
    for (i, v) in data.iter_mut().enumerate() {
        let ch = if chw { i / plane } else { i % channels };
        *v = (*v * gains[ch] + offsets[ch]).clamp(0.0, 1.0);
    }
}

/// Augment one sample: rotate, crop to seven-eighths size, maybe flip,
/// jitter channels, clip to [0, 1]. The same geometric transform is
/// applied to every level and to the landmark map; label and group id
/// pass through untouched.
pub fn augment(s: &SyntheticSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let angle = if cfg.max_rotation_deg > 0.0 {
        (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_rotation_deg
    } else {
        0.0
    };
    let (fy, fx) = if cfg.random_crop {
        (rng.random::<f64>(), rng.random::<f64>())
    } else {
        (0.5, 0.5)
    };
    let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;

    let n_img_ch = s.image_levels.first().map_or(0, |t| t.shape()[2]);
    let mut img_gains = vec![1.0; n_img_ch];
    let mut img_offsets = vec![0.0; n_img_ch];
    let lm_ch = s.landmarks.shape()[0];
    let mut lm_gains = vec![1.0; lm_ch];
    let mut lm_offsets = vec![0.0; lm_ch];
    if cfg.max_jitter > 0.0 {
        for g in &mut img_gains {
            *g = 1.0 + (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_jitter;
        }
        for o in &mut img_offsets {
            *o = (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_jitter;
        }
        for g in &mut lm_gains {
            *g = 1.0 + (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_jitter;
        }
        for o in &mut lm_offsets {
            *o = (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_jitter;
        }
    }

    let image_levels = s
        .image_levels
        .iter()
        .map(|t| {
            let side_h = t.shape()[0];
            let side_w = t.shape()[1];
            let mut out = rotate_hwc(t, angle);
            out = crop_hwc(&out, crop_target(side_h), crop_target(side_w), fy, fx);
            if flip {
                out = hflip_hwc(&out);
            }
            jitter_clip(out.data_mut(), n_img_ch, &img_gains, &img_offsets, false, 0);
            out
        })
        .collect();

    let lh = s.landmarks.shape()[1];
    let lw = s.landmarks.shape()[2];
    let mut lm = rotate_chw(&s.landmarks, angle);
    lm = crop_chw(&lm, crop_target(lh), crop_target(lw), fy, fx);
    if flip {
        lm = hflip_chw(&lm);
    }
    let plane = crop_target(lh) * crop_target(lw);
    jitter_clip(lm.data_mut(), lm_ch, &lm_gains, &lm_offsets, true, plane);

    SyntheticSample { image_levels, landmarks: lm, label: s.label, group_id: s.group_id }
}

/// Deterministic evaluation-time view: center crop, no randomness.
pub fn center_crop(s: &SyntheticSample) -> SyntheticSample {
    let mut rng = substream(0, "center-crop-unused");
    augment(s, &AugmentConfig::none(), &mut rng)
}

/// Group pool size and per-class batch quota for balanced refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefinementConfig {
    /// Samples kept per group (the paper-scale default is 512).
    pub images_per_group: usize,
    /// Samples per class in each epoch batch.
    pub per_class: usize,
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.images_per_group < self.per_class {
            return Err(FelError::Config(format!(
                "refinement needs images-per-group >= per-class >= 1, \
                 got {} and {}",
                self.images_per_group, self.per_class
            )));
        }
        Ok(())
    }
}

/// A balanced epoch batch: training-set indices, class-major, exactly
/// `per_class` entries for every class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinedBatch {
    pub indices: Vec<usize>,
    /// True when some class had fewer pooled samples than the quota and
    /// sampling fell back to drawing with replacement.
    pub sampled_with_replacement: bool,
}

/// Draw a balanced batch: per group keep `images_per_group` random
/// members, then take exactly `per_class` per class from the kept pool
/// (with replacement only if the pool is short).
pub fn refine_batch(
    train: &[SyntheticSample],
    n_classes: usize,
    rc: &RefinementConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RefinedBatch> {
    rc.validate()?;
    for class in 0..n_classes {
        if !train.iter().any(|s| s.label == class) {
            return Err(FelError::Data(format!(
                "class {class} has no training samples"
            )));
        }
    }

    // Group members in first-seen group order for determinism.
    let mut group_order = Vec::new();
    let mut groups: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for (i, s) in train.iter().enumerate() {
        let entry = groups.entry(s.group_id).or_default();
        if entry.is_empty() {
            group_order.push(s.group_id);
        }
        entry.push(i);
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for gid in group_order {
        let mut members = groups.remove(&gid).expect("group listed once");
        members.shuffle(rng);
        members.truncate(rc.images_per_group);
        for i in members {
            pools[train[i].label].push(i);
        }
    }

    let mut indices = Vec::with_capacity(n_classes * rc.per_class);
    let mut scarce = false;
    for pool in pools.iter_mut() {
        if pool.len() >= rc.per_class {
            pool.shuffle(rng);
            indices.extend_from_slice(&pool[..rc.per_class]);
        } else {
            scarce = true;
            for _ in 0..rc.per_class {
                indices.push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    Ok(RefinedBatch { indices, sampled_with_replacement: scarce })
}

/// Flip each label with probability `rate` to a uniformly random other
/// class. Returns the corrupted labels and the flip mask.
pub fn inject_noise(
    labels: &[usize],
    n_classes: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=0.5).contains(&rate) || !rate.is_finite() {
        return Err(FelError::Config(format!(
            "noise rate must lie in [0, 0.5], got {rate}"
        )));
    }
    if n_classes < 2 && rate > 0.0 {
        return Err(FelError::Config(
            "label noise needs at least two classes".into(),
        ));
    }
    let mut out = Vec::with_capacity(labels.len());
    let mut mask = Vec::with_capacity(labels.len());
    for &y in labels {
        let flip = rate > 0.0 && rng.random::<f64>() < rate;
        if flip {
            let mut other = rng.random_range(0..n_classes - 1);
            if other >= y {
                other += 1;
            }
            out.push(other);
        } else {
            out.push(y);
        }
        mask.push(flip);
    }
    Ok((out, mask))
}

/// Smooth a one-hot label: with `alpha = term / 100`, the true class gets
/// `1 - alpha + alpha / n` and every other class `alpha / n`.
pub fn smooth_label(label: usize, n_classes: usize, term: f64) -> Result<Vec<f64>> {
    if !(0.0..=50.0).contains(&term) || !term.is_finite() {
        return Err(FelError::Config(format!(
            "smoothing term must lie in [0, 50], got {term}"
        )));
    }
    if label >= n_classes {
        return Err(FelError::Contract(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }
    let alpha = term / 100.0;
    let base = alpha / n_classes as f64;
    let mut out = vec![base; n_classes];
    out[label] += 1.0 - alpha;
    Ok(out)
}

/// Smooth a whole batch into a `[B, n_classes]` target matrix.
pub fn smooth_batch(labels: &[usize], n_classes: usize, term: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * n_classes);
    for &y in labels {
        data.extend(smooth_label(y, n_classes, term)?);
    }
    Tensor::new(vec![labels.len(), n_classes], data)
}

const STREAMS_FILE: &str = "streams.bin";
const LABELS_FILE: &str = "labels.csv";

/// Persist a dataset: all stream arrays into one binary container plus a
/// `labels.csv` with `index,split,label,group_id` rows.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut csv = String::from("index,split,label,group_id\n");
    for (split, samples) in [("train", &ds.train), ("eval", &ds.eval)] {
        let prefix = &split[..1];
        for (i, s) in samples.iter().enumerate() {
            for (li, img) in s.image_levels.iter().enumerate() {
                entries.push((format!("{prefix}{i}.img{li}"), img.clone()));
            }
            entries.push((format!("{prefix}{i}.lm"), s.landmarks.clone()));
            let _ = writeln!(csv, "{i},{split},{},{}", s.label, s.group_id);
        }
    }
    checkpoint::save(&dir.join(STREAMS_FILE), &entries)?;
    std::fs::write(dir.join(LABELS_FILE), csv)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`]. Latent diagnostics are not
/// persisted, so the corresponding fields come back empty.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries = checkpoint::load(&dir.join(STREAMS_FILE))?;
    let mut by_name: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
    let csv = std::fs::read_to_string(dir.join(LABELS_FILE))?;

    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in csv.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "index,split,label,group_id" {
                return Err(FelError::Data(format!(
                    "unexpected labels header: {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(FelError::Data(format!(
                "labels line {} malformed: {line:?}",
                lineno + 1
            )));
        }
        let index: usize = parts[0]
            .parse()
            .map_err(|_| FelError::Data(format!("bad index on line {}", lineno + 1)))?;
        let split = parts[1];
        let label: usize = parts[2]
            .parse()
            .map_err(|_| FelError::Data(format!("bad label on line {}", lineno + 1)))?;
        let group_id: usize = parts[3]
            .parse()
            .map_err(|_| FelError::Data(format!("bad group id on line {}", lineno + 1)))?;
        max_label = max_label.max(label);

        let prefix = &split[..1];
        let mut image_levels = Vec::new();
        let mut li = 0usize;
        while let Some(t) = by_name.remove(&format!("{prefix}{index}.img{li}")) {
            image_levels.push(t);
            li += 1;
        }
        let landmarks = by_name.remove(&format!("{prefix}{index}.lm")).ok_or_else(|| {
            FelError::Data(format!("missing landmark stream for {split} sample {index}"))
        })?;
        if image_levels.is_empty() {
            return Err(FelError::Data(format!(
                "missing image streams for {split} sample {index}"
            )));
        }
        let sample = SyntheticSample { image_levels, landmarks, label, group_id };
        match split {
            "train" => train.push(sample),
            "eval" => eval.push(sample),
            other => {
                return Err(FelError::Data(format!(
                    "unknown split {other:?} on line {}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(Dataset {
        n_classes: max_label + 1,
        train,
        eval,
        train_latents: Vec::new(),
        eval_latents: Vec::new(),
        class_means: Vec::new(),
    })
}
