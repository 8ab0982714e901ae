//! Two-stream feature encoder: windowed landmark-to-image cross-attention
//! per resolution level, followed by a multi-scale self-attention combiner
//! that reduces all level tokens to one embedding per sample.
//!
//! Per level the image canvas is mean-pooled to a square token grid and
//! linearly projected to the shared feature width. The landmark map is
//! pooled to one window's worth of tokens, projected to the same width,
//! and used as the attention *queries* against image-token keys/values
//! inside every non-overlapping window. Attention logits carry a learned
//! per-head relative-position bias indexed by in-window token offsets.
//! Each level ends with a pre-norm MLP residual block. The combiner
//! concatenates every level's tokens per sample, applies plain multi-head
//! self-attention with a residual, adds an MLP branch over the normalized
//! pre-attention tokens, mean-pools over tokens, and projects to the
//! embedding width.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{FelError, Result};
use crate::nn::{glorot, LayerNorm, Linear, Mlp, ParamId, ParamStore, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Geometry of one resolution level: a `grid x grid` token map split into
/// non-overlapping `window x window` attention windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelConfig {
    pub grid: usize,
    pub window: usize,
}

impl LevelConfig {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn window_tokens(&self) -> usize {
        self.window * self.window
    }
}

/// Hyperparameters of the full two-stream encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub levels: Vec<LevelConfig>,
    /// Shared token feature width D.
    pub feature_dim: usize,
    /// Attention head count; must divide `feature_dim`.
    pub heads: usize,
    /// Output embedding width.
    pub embed_dim: usize,
    /// Channel count of the per-level image canvases.
    pub image_channels: usize,
    /// Channel count of the landmark map.
    pub landmark_channels: usize,
}

impl EncoderConfig {
    /// Small geometry for fast experimentation: 8x8 / 4x4 / 2x2 token
    /// grids with 2x2 windows, 64-wide features, 4 heads.
    pub fn desk_scale() -> Self {
        Self {
            levels: vec![
                LevelConfig { grid: 8, window: 2 },
                LevelConfig { grid: 4, window: 2 },
                LevelConfig { grid: 2, window: 2 },
            ],
            feature_dim: 64,
            heads: 4,
            embed_dim: 64,
            image_channels: 3,
            landmark_channels: 4,
        }
    }

    /// Total token count per sample after concatenating all levels.
    pub fn tokens_per_sample(&self) -> usize {
        self.levels.iter().map(LevelConfig::tokens).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(FelError::Contract(
                "multi-scale combination requires at least one level".into(),
            ));
        }
        for (i, lvl) in self.levels.iter().enumerate() {
            if lvl.grid == 0 || lvl.window == 0 {
                return Err(FelError::Config(format!(
                    "level {i}: grid and window must be positive, got grid={} window={}",
                    lvl.grid, lvl.window
                )));
            }
            if lvl.grid % lvl.window != 0 {
                return Err(FelError::Config(format!(
                    "level {i}: window side {} must divide grid side {}",
                    lvl.window, lvl.grid
                )));
            }
        }
        if self.feature_dim == 0 || self.embed_dim == 0 {
            return Err(FelError::Config(
                "feature and embedding widths must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return Err(FelError::Config(format!(
                "head count {} must be positive and divide feature width {}",
                self.heads, self.feature_dim
            )));
        }
        if self.image_channels == 0 || self.landmark_channels == 0 {
            return Err(FelError::Config(
                "stream channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Permutation taking row-major grid tokens to window-contiguous order:
/// output slot `w * window_tokens + t` holds the `t`-th token (row-major
/// within the window) of the `w`-th window (windows enumerated row-major).
pub fn window_index_map(grid: usize, window: usize) -> Result<Vec<usize>> {
    if grid == 0 || window == 0 || !grid.is_multiple_of(window) {
        return Err(FelError::Shape(format!(
            "cannot split a {grid}x{grid} grid into {window}x{window} windows"
        )));
    }
    let per_side = grid / window;
    let mut map = Vec::with_capacity(grid * grid);
    for wr in 0..per_side {
        for wc in 0..per_side {
            for r in 0..window {
                for c in 0..window {
                    map.push((wr * window + r) * grid + wc * window + c);
                }
            }
        }
    }
    Ok(map)
}

/// Inverse of a permutation given as `dst -> src` index list.
pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Adaptive mean-pool of an `[H, W, C]` array to a `[gh*gw, C]` token
/// matrix (tokens row-major over the output grid). Cell `(i, j)` averages
/// source rows `floor(i*H/gh) .. ceil((i+1)*H/gh)` and likewise for
/// columns, so any source size at least as large as the target is
/// accepted without requiring divisibility.
pub fn pool_hwc(canvas: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let (h, w, c) = dims3(canvas, "image canvas")?;
    pool_grid(canvas, h, w, c, gh, gw, |src, (y, x, ch), (_, wd, cc)| {
        src[(y * wd + x) * cc + ch]
    })
}

/// Adaptive mean-pool of a `[C, H, W]` array to a `[gh*gw, C]` token
/// matrix. Same cell geometry as [`pool_hwc`], channel-major storage.
pub fn pool_chw(map: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(map, "landmark map")?;
    pool_grid(map, h, w, c, gh, gw, |src, (y, x, ch), (hh, wd, _)| {
        debug_assert!(y < hh);
        src[(ch * hh + y) * wd + x]
    })
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(FelError::Shape(format!(
            "{what} must be rank 3, got shape {other:?}"
        ))),
    }
}

fn pool_grid(
    t: &Tensor,
    h: usize,
    w: usize,
    c: usize,
    gh: usize,
    gw: usize,
    at: impl Fn(&[f64], (usize, usize, usize), (usize, usize, usize)) -> f64,
) -> Result<Tensor> {
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(FelError::Shape(format!(
            "cannot pool a {h}x{w} map down to {gh}x{gw}"
        )));
    }
    let mut out = vec![0.0; gh * gw * c];
    for i in 0..gh {
        let y0 = i * h / gh;
        let y1 = ((i + 1) * h).div_ceil(gh);
        for j in 0..gw {
            let x0 = j * w / gw;
            let x1 = ((j + 1) * w).div_ceil(gw);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += at(t.data(), (y, x, ch), (h, w, c));
                    }
                }
                out[(i * gw + j) * c + ch] = acc * inv;
            }
        }
    }
    Tensor::new(vec![gh * gw, c], out)
}

/// Relative-position index map for a `window x window` block: entry
/// `q * M + k` (M = window tokens) is the column into a per-head bias
/// table of width `(2*window - 1)^2`, addressing the key token's offset
/// from the query token.
fn relative_position_index(window: usize) -> Vec<usize> {
    let m = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(m * m);
    for q in 0..m {
        let (qr, qc) = (q / window, q % window);
        for k in 0..m {
            let (kr, kc) = (k / window, k % window);
            let dr = kr + window - 1 - qr;
            let dc = kc + window - 1 - qc;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Borrowed view of one sample's raw streams: one `[H, W, C]` canvas per
/// level plus a `[C_lm, H, W]` landmark map.
#[derive(Clone, Copy)]
pub struct SampleView<'a> {
    pub image_levels: &'a [Tensor],
    pub landmarks: &'a Tensor,
}

/// Pooled, batch-stacked encoder input (plain data, not yet on a tape).
#[derive(Debug)]
pub struct EncoderBatch {
    batch: usize,
    /// Per level: `[batch * grid^2, image_channels]`.
    image_tokens: Vec<Tensor>,
    /// Per level: `[batch * window^2, landmark_channels]`.
    lm_tokens: Vec<Tensor>,
}

impl EncoderBatch {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// One resolution level: stream projections, windowed cross-attention
/// with relative-position bias, and a pre-norm MLP residual block.
struct LevelBlock {
    cfg: LevelConfig,
    heads: usize,
    patch_proj: Linear,
    lm_proj: Linear,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bias_table: ParamId,
    bias_idx: Rc<Vec<usize>>,
    norm: LayerNorm,
    mlp: Mlp,
    win_map: Vec<usize>,
    win_inv: Vec<usize>,
}

impl LevelBlock {
    fn new(
        index: usize,
        cfg: LevelConfig,
        enc: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = enc.feature_dim;
        let name = format!("enc.l{index}");
        let patch_proj =
            Linear::new(store, &format!("{name}.patch"), enc.image_channels, d, rng);
        let lm_proj = Linear::new(store, &format!("{name}.lm"), enc.landmark_channels, d, rng);
        let wq = store.register(&format!("{name}.wq"), glorot(d, d, rng));
        let wk = store.register(&format!("{name}.wk"), glorot(d, d, rng));
        let wv = store.register(&format!("{name}.wv"), glorot(d, d, rng));
        let wo = store.register(&format!("{name}.wo"), glorot(d, d, rng));
        let span = 2 * cfg.window - 1;
        let bias_table = store.register(
            &format!("{name}.bias"),
            Tensor::zeros(&[enc.heads, span * span]),
        );
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), d, d, rng);
        let win_map = window_index_map(cfg.grid, cfg.window)?;
        let win_inv = inverse_permutation(&win_map);
        Ok(Self {
            cfg,
            heads: enc.heads,
            patch_proj,
            lm_proj,
            wq,
            wk,
            wv,
            wo,
            bias_table,
            bias_idx: Rc::new(relative_position_index(cfg.window)),
            norm,
            mlp,
            win_map,
            win_inv,
        })
    }

    /// Encode already-projected tokens. `x` is `[batch * grid^2, D]` in
    /// row-major grid order per sample; `z_lm` is `[batch * window^2, D]`
    /// landmark query tokens shared by every window of a sample.
    fn encode(&self, s: &Session, x: &Var, z_lm: &Var, batch: usize) -> Var {
        let g2 = self.cfg.tokens();
        let m = self.cfg.window_tokens();
        let nw = g2 / m;

        let mut part = Vec::with_capacity(batch * g2);
        let mut inv = Vec::with_capacity(batch * g2);
        let mut tile = Vec::with_capacity(batch * g2);
        for b in 0..batch {
            part.extend(self.win_map.iter().map(|&t| b * g2 + t));
            inv.extend(self.win_inv.iter().map(|&t| b * g2 + t));
            for _ in 0..nw {
                tile.extend((0..m).map(|t| b * m + t));
            }
        }

        let xw = x.gather_rows(Rc::new(part));
        let q_in = z_lm.gather_rows(Rc::new(tile));
        let q = q_in.matmul(&s.param(self.wq));
        let k = xw.matmul(&s.param(self.wk));
        let v = xw.matmul(&s.param(self.wv));
        let bias = s.param(self.bias_table);
        let attn =
            q.block_attention(&k, &v, self.heads, m, Some((&bias, Rc::clone(&self.bias_idx))));
        let oca = attn.matmul(&s.param(self.wo)).gather_rows(Rc::new(inv));

        let x1 = oca.add(x);
        self.mlp.forward(s, &self.norm.forward(s, &x1)).add(&x1)
    }
}

/// The full two-stream encoder; owns its parameter ids inside a shared
/// [`ParamStore`].
pub struct FusionEncoder {
    cfg: EncoderConfig,
    levels: Vec<LevelBlock>,
    ms_wq: ParamId,
    ms_wk: ParamId,
    ms_wv: ParamId,
    ms_wo: ParamId,
    ms_norm: LayerNorm,
    ms_mlp: Mlp,
    pool_proj: Linear,
}

impl FusionEncoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let mut levels = Vec::with_capacity(cfg.levels.len());
        for (i, lvl) in cfg.levels.iter().enumerate() {
            levels.push(LevelBlock::new(i, *lvl, &cfg, store, rng)?);
        }
        let ms_wq = store.register("enc.ms.wq", glorot(d, d, rng));
        let ms_wk = store.register("enc.ms.wk", glorot(d, d, rng));
        let ms_wv = store.register("enc.ms.wv", glorot(d, d, rng));
        let ms_wo = store.register("enc.ms.wo", glorot(d, d, rng));
        let ms_norm = LayerNorm::new(store, "enc.ms.norm", d);
        let ms_mlp = Mlp::new(store, "enc.ms.mlp", d, d, rng);
        let pool_proj = Linear::new(store, "enc.pool", d, cfg.embed_dim, rng);
        Ok(Self { cfg, levels, ms_wq, ms_wk, ms_wv, ms_wo, ms_norm, ms_mlp, pool_proj })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Pool and stack raw sample streams into batch matrices, validating
    /// geometry against the configured levels.
    pub fn prepare_batch(&self, samples: &[SampleView]) -> Result<EncoderBatch> {
        if samples.is_empty() {
            return Err(FelError::InvalidArgument("empty batch".into()));
        }
        let n_levels = self.cfg.levels.len();
        let mut image_tokens = Vec::with_capacity(n_levels);
        let mut lm_tokens = Vec::with_capacity(n_levels);
        for (li, lvl) in self.cfg.levels.iter().enumerate() {
            let mut img = Vec::with_capacity(samples.len() * lvl.tokens() * self.cfg.image_channels);
            let mut lm = Vec::with_capacity(
                samples.len() * lvl.window_tokens() * self.cfg.landmark_channels,
            );
            for (si, sample) in samples.iter().enumerate() {
                if sample.image_levels.len() != n_levels {
                    return Err(FelError::Shape(format!(
                        "sample {si} carries {} image levels, encoder expects {n_levels}",
                        sample.image_levels.len()
                    )));
                }
                let canvas = &sample.image_levels[li];
                let (h, w, c) = dims3(canvas, "image canvas")?;
                if c != self.cfg.image_channels || h < lvl.grid || w < lvl.grid {
                    return Err(FelError::Shape(format!(
                        "sample {si} level {li}: canvas {h}x{w}x{c} incompatible with \
                         grid {} and {} channels",
                        lvl.grid, self.cfg.image_channels
                    )));
                }
                img.extend_from_slice(pool_hwc(canvas, lvl.grid, lvl.grid)?.data());
                let (lc, lh, lw) = dims3(sample.landmarks, "landmark map")?;
                if lc != self.cfg.landmark_channels || lh < lvl.window || lw < lvl.window {
                    return Err(FelError::Shape(format!(
                        "sample {si}: landmark map {lc}x{lh}x{lw} incompatible with \
                         window {} and {} channels",
                        lvl.window, self.cfg.landmark_channels
                    )));
                }
                lm.extend_from_slice(pool_chw(sample.landmarks, lvl.window, lvl.window)?.data());
            }
            image_tokens.push(Tensor::new(
                vec![samples.len() * lvl.tokens(), self.cfg.image_channels],
                img,
            )?);
            lm_tokens.push(Tensor::new(
                vec![samples.len() * lvl.window_tokens(), self.cfg.landmark_channels],
                lm,
            )?);
        }
        Ok(EncoderBatch { batch: samples.len(), image_tokens, lm_tokens })
    }

    /// Run the encoder on a prepared batch, producing `[batch, embed_dim]`
    /// embeddings on the session's tape.
    pub fn forward(&self, s: &Session, batch: &EncoderBatch) -> Result<Var> {
        let b = batch.batch;
        let mut per_level = Vec::with_capacity(self.levels.len());
        for (li, level) in self.levels.iter().enumerate() {
            let x_in = s.constant(batch.image_tokens[li].clone());
            let lm_in = s.constant(batch.lm_tokens[li].clone());
            let x = level.patch_proj.forward(s, &x_in);
            let z_lm = level.lm_proj.forward(s, &lm_in);
            per_level.push(level.encode(s, &x, &z_lm, b));
        }

        // Concatenate levels, then interleave rows to sample-major order.
        let mut cat = per_level[0].clone();
        for lv in &per_level[1..] {
            cat = cat.concat_rows(lv);
        }
        let tokens: Vec<usize> = self.cfg.levels.iter().map(LevelConfig::tokens).collect();
        let total: usize = tokens.iter().sum();
        let mut starts = Vec::with_capacity(tokens.len());
        let mut acc = 0;
        for &t in &tokens {
            starts.push(acc);
            acc += b * t;
        }
        let mut perm = Vec::with_capacity(b * total);
        for bi in 0..b {
            for (li, &t) in tokens.iter().enumerate() {
                perm.extend((0..t).map(|i| starts[li] + bi * t + i));
            }
        }
        let xo = cat.gather_rows(Rc::new(perm));

        // Self-attention over each sample's full token set, with residual.
        let q = xo.matmul(&s.param(self.ms_wq));
        let k = xo.matmul(&s.param(self.ms_wk));
        let v = xo.matmul(&s.param(self.ms_wv));
        let attn = q.block_attention(&k, &v, self.cfg.heads, total, None);
        let xo1 = attn.matmul(&s.param(self.ms_wo)).add(&xo);

        // MLP branch over the normalized pre-attention tokens.
        let out = self.ms_mlp.forward(s, &self.ms_norm.forward(s, &xo)).add(&xo1);

        let pooled = out.block_mean_rows(total);
        Ok(self.pool_proj.forward(s, &pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Session;
    use crate::rng::substream;
    use rand::Rng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            levels: vec![LevelConfig { grid: 2, window: 2 }],
            feature_dim: 4,
            heads: 2,
            embed_dim: 3,
            image_channels: 2,
            landmark_channels: 2,
        }
    }

    fn filled(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap()
    }

    fn random_sample(
        cfg: &EncoderConfig,
        sizes: &[(usize, usize)],
        lm_size: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Tensor>, Tensor) {
        let levels = sizes
            .iter()
            .map(|&(h, w)| {
                let n = h * w * cfg.image_channels;
                Tensor::new(vec![h, w, cfg.image_channels], (0..n).map(|_| rng.random()).collect())
                    .unwrap()
            })
            .collect();
        let n = cfg.landmark_channels * lm_size.0 * lm_size.1;
        let lm = Tensor::new(
            vec![cfg.landmark_channels, lm_size.0, lm_size.1],
            (0..n).map(|_| rng.random()).collect(),
        )
        .unwrap();
        (levels, lm)
    }

    #[test]
    fn window_map_two_by_two_of_four_grid() {
        let map = window_index_map(4, 2).unwrap();
        assert_eq!(map, vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
        // 4 windows of 4 tokens, every token exactly once.
        let mut seen = map.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn window_map_whole_grid_is_identity() {
        assert_eq!(window_index_map(3, 3).unwrap(), vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn window_map_round_trip_is_lossless() {
        let map = window_index_map(8, 4).unwrap();
        assert_eq!(map.len(), 64);
        let inv = inverse_permutation(&map);
        // Permute a token matrix into window order and back: bit-exact.
        let tokens = filled(&[64, 3], |i| (i as f64) * 0.37 - 5.0);
        let permuted: Vec<f64> = map
            .iter()
            .flat_map(|&src| tokens.row(src).to_vec())
            .collect();
        let restored: Vec<f64> = inv
            .iter()
            .flat_map(|&dst| permuted[dst * 3..dst * 3 + 3].to_vec())
            .collect();
        assert_eq!(restored, tokens.data());
    }

    #[test]
    fn window_map_rejects_non_divisible() {
        assert!(matches!(window_index_map(4, 3), Err(FelError::Shape(_))));
        assert!(matches!(window_index_map(0, 1), Err(FelError::Shape(_))));
    }

    #[test]
    fn pool_same_size_is_channel_flattened_identity() {
        // [C=3, 2, 2] pooled to its own size: token t = channel vector at t.
        let lm = filled(&[3, 2, 2], |i| i as f64);
        let tokens = pool_chw(&lm, 2, 2).unwrap();
        assert_eq!(tokens.shape(), [4, 3]);
        // Channel c at spatial t lives at c*4 + t in CHW storage.
        for t in 0..4 {
            for c in 0..3 {
                assert_eq!(tokens.row(t)[c], (c * 4 + t) as f64);
            }
        }
    }

    #[test]
    fn pool_constant_map_stays_constant() {
        let canvas = Tensor::full(&[4, 4, 2], 0.625);
        let tokens = pool_hwc(&canvas, 2, 2).unwrap();
        assert_eq!(tokens.shape(), [4, 2]);
        for &v in tokens.data() {
            assert_eq!(v, 0.625);
        }
    }

    #[test]
    fn pool_ramp_matches_hand_means() {
        // Independent oracle: hand-computed 2x2 block means of a ramp.
        let canvas = filled(&[4, 4, 1], |i| i as f64);
        let tokens = pool_hwc(&canvas, 2, 2).unwrap();
        assert_eq!(tokens.data(), &[2.5, 4.5, 10.5, 12.5]);
        let chw = filled(&[1, 4, 4], |i| i as f64);
        let tokens = pool_chw(&chw, 2, 2).unwrap();
        assert_eq!(tokens.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn pool_rejects_upsampling() {
        let canvas = Tensor::zeros(&[2, 2, 1]);
        assert!(matches!(pool_hwc(&canvas, 4, 4), Err(FelError::Shape(_))));
        let lm = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(pool_chw(&lm, 3, 3), Err(FelError::Shape(_))));
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut cfg = tiny_config();
        cfg.heads = 3; // does not divide feature_dim = 4
        assert!(matches!(cfg.validate(), Err(FelError::Config(_))));
        let mut cfg = tiny_config();
        cfg.levels[0].window = 3; // does not divide grid = 2... nor fit
        assert!(matches!(cfg.validate(), Err(FelError::Config(_))));
        let mut cfg = tiny_config();
        cfg.levels.clear();
        assert!(matches!(cfg.validate(), Err(FelError::Contract(_))));
    }

    #[test]
    fn constant_image_makes_output_independent_of_landmarks() {
        // All image tokens identical => attention values identical per row,
        // so the landmark stream (queries only) cannot influence the output.
        let cfg = tiny_config();
        let mut rng = substream(11, "enc-test");
        let mut store = ParamStore::new();
        let enc = FusionEncoder::new(cfg.clone(), &mut store, &mut rng).unwrap();

        let canvas = Tensor::full(&[4, 4, 2], 0.3);
        let lm_a = filled(&[2, 2, 2], |i| (i as f64) / 10.0);
        let lm_b = filled(&[2, 2, 2], |i| 1.0 - (i as f64) / 13.0);
        let run = |lm: &Tensor| {
            let s = Session::new(&store, false, substream(0, "fwd"));
            let images = vec![canvas.clone()];
            let batch = enc
                .prepare_batch(&[SampleView { image_levels: &images, landmarks: lm }])
                .unwrap();
            enc.forward(&s, &batch).unwrap().value().clone()
        };
        let ea = run(&lm_a);
        let eb = run(&lm_b);
        assert!(ea.max_abs_diff(&eb) < 1e-12, "diff = {}", ea.max_abs_diff(&eb));
    }

    #[test]
    fn constant_bias_shift_leaves_output_unchanged() {
        let cfg = tiny_config();
        let mut rng = substream(12, "enc-test");
        let mut store = ParamStore::new();
        let enc = FusionEncoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let mut rng_in = substream(13, "enc-in");
        let (images, lm) = random_sample(&cfg, &[(4, 4)], (3, 3), &mut rng_in);
        let batch = enc
            .prepare_batch(&[SampleView { image_levels: &images, landmarks: &lm }])
            .unwrap();

        let run = |store: &ParamStore| {
            let s = Session::new(store, false, substream(0, "fwd"));
            enc.forward(&s, &batch).unwrap().value().clone()
        };
        let zero_bias = run(&store);
        let id = enc.levels[0].bias_table;
        for v in store.param_mut(id).data_mut() {
            *v = 0.7;
        }
        let const_bias = run(&store);
        assert!(zero_bias.max_abs_diff(&const_bias) < 1e-12);
    }

    #[test]
    fn zeroed_block_is_identity_on_its_input() {
        let cfg = tiny_config();
        let mut rng = substream(14, "enc-test");
        let mut store = ParamStore::new();
        let enc = FusionEncoder::new(cfg, &mut store, &mut rng).unwrap();
        let level = &enc.levels[0];
        for id in [
            level.wq,
            level.wk,
            level.wv,
            level.wo,
            level.mlp.fc1.w,
            level.mlp.fc1.b,
            level.mlp.fc2.w,
            level.mlp.fc2.b,
        ] {
            for v in store.param_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let s = Session::new(&store, false, substream(0, "fwd"));
        let x = s.constant(filled(&[4, 4], |i| (i as f64) * 0.21 - 1.3));
        let z = s.constant(filled(&[4, 4], |i| (i as f64).sin()));
        let out = level.encode(&s, &x, &z, 1);
        assert_eq!(out.value().data(), x.value().data());
    }

    #[test]
    fn single_token_level_matches_hand_evaluation() {
        // grid = window = 1, C = 1 channels, D = 2, one head: every stage
        // is hand-computable with scalar arithmetic.
        let cfg = EncoderConfig {
            levels: vec![LevelConfig { grid: 1, window: 1 }],
            feature_dim: 2,
            heads: 1,
            embed_dim: 2,
            image_channels: 1,
            landmark_channels: 1,
        };
        let mut rng = substream(15, "enc-test");
        let mut store = ParamStore::new();
        let enc = FusionEncoder::new(cfg.clone(), &mut store, &mut rng).unwrap();

        // Hand-set every parameter.
        let set = |store: &mut ParamStore, id: ParamId, vals: &[f64]| {
            store.param_mut(id).data_mut().copy_from_slice(vals);
        };
        let l = &enc.levels[0];
        set(&mut store, l.patch_proj.w, &[0.5, -0.25]);
        set(&mut store, l.patch_proj.b, &[0.1, 0.2]);
        set(&mut store, l.lm_proj.w, &[1.5, 0.75]);
        set(&mut store, l.lm_proj.b, &[-0.1, 0.3]);
        set(&mut store, l.wq, &[0.2, -0.1, 0.4, 0.3]);
        set(&mut store, l.wk, &[0.6, 0.1, -0.2, 0.5]);
        set(&mut store, l.wv, &[0.9, -0.4, 0.2, 0.8]);
        set(&mut store, l.wo, &[1.1, 0.3, -0.6, 0.7]);
        set(&mut store, l.norm.gamma, &[1.2, 0.8]);
        set(&mut store, l.norm.beta, &[0.05, -0.05]);
        set(&mut store, l.mlp.fc1.w, &[0.3, -0.2, 0.1, 0.4]);
        set(&mut store, l.mlp.fc1.b, &[0.02, -0.01]);
        set(&mut store, l.mlp.fc2.w, &[-0.5, 0.25, 0.35, 0.15]);
        set(&mut store, l.mlp.fc2.b, &[0.0, 0.1]);
        set(&mut store, enc.ms_wq, &[0.25, 0.5, -0.25, 0.125]);
        set(&mut store, enc.ms_wk, &[0.3, -0.3, 0.6, 0.2]);
        set(&mut store, enc.ms_wv, &[0.45, 0.05, -0.15, 0.95]);
        set(&mut store, enc.ms_wo, &[0.8, -0.2, 0.4, 0.6]);
        set(&mut store, enc.ms_norm.gamma, &[0.9, 1.1]);
        set(&mut store, enc.ms_norm.beta, &[0.0, 0.02]);
        set(&mut store, enc.ms_mlp.fc1.w, &[0.12, -0.34, 0.56, -0.78]);
        set(&mut store, enc.ms_mlp.fc1.b, &[0.04, 0.03]);
        set(&mut store, enc.ms_mlp.fc2.w, &[0.21, 0.43, -0.65, 0.87]);
        set(&mut store, enc.ms_mlp.fc2.b, &[-0.02, 0.01]);
        set(&mut store, enc.pool_proj.w, &[0.7, -0.3, 0.2, 0.9]);
        set(&mut store, enc.pool_proj.b, &[0.11, -0.07]);

        let p = 0.6; // lone image pixel
        let q = 0.4; // lone landmark value
        let images = vec![Tensor::new(vec![1, 1, 1], vec![p]).unwrap()];
        let lm = Tensor::new(vec![1, 1, 1], vec![q]).unwrap();
        let s = Session::new(&store, false, substream(0, "fwd"));
        let batch = enc
            .prepare_batch(&[SampleView { image_levels: &images, landmarks: &lm }])
            .unwrap();
        let e = enc.forward(&s, &batch).unwrap();

        // Independent scalar re-evaluation.
        let mat2 = |w: &[f64], x: [f64; 2]| {
            [x[0] * w[0] + x[1] * w[2], x[0] * w[1] + x[1] * w[3]]
        };
        let add2 = |a: [f64; 2], b: [f64; 2]| [a[0] + b[0], a[1] + b[1]];
        let ln2 = |x: [f64; 2], g: [f64; 2], bt: [f64; 2]| {
            let mu = (x[0] + x[1]) / 2.0;
            let var = ((x[0] - mu).powi(2) + (x[1] - mu).powi(2)) / 2.0;
            let inv = 1.0 / (var + 1e-5).sqrt();
            [g[0] * (x[0] - mu) * inv + bt[0], g[1] * (x[1] - mu) * inv + bt[1]]
        };
        let x = [0.5 * p + 0.1, -0.25 * p + 0.2];
        let zl = [1.5 * q - 0.1, 0.75 * q + 0.3];
        // Single-token attention: softmax over one logit gives weight 1,
        // so the attended value equals v (the query and bias are moot).
        let v = mat2(&[0.9, -0.4, 0.2, 0.8], x);
        let oca = mat2(&[1.1, 0.3, -0.6, 0.7], v);
        let _ = zl;
        let x1 = add2(oca, x);
        let n = ln2(x1, [1.2, 0.8], [0.05, -0.05]);
        let h = mat2(&[0.3, -0.2, 0.1, 0.4], n);
        let h = [h[0] + 0.02, h[1] - 0.01];
        let h = [h[0].max(0.0), h[1].max(0.0)];
        let mlp = mat2(&[-0.5, 0.25, 0.35, 0.15], h);
        let mlp = [mlp[0], mlp[1] + 0.1];
        let xo = add2(mlp, x1);
        // Combiner: one token again, so attention passes v2 through.
        let v2 = mat2(&[0.45, 0.05, -0.15, 0.95], xo);
        let xo1 = add2(mat2(&[0.8, -0.2, 0.4, 0.6], v2), xo);
        let nf = ln2(xo, [0.9, 1.1], [0.0, 0.02]);
        let h2 = mat2(&[0.12, -0.34, 0.56, -0.78], nf);
        let h2 = [(h2[0] + 0.04).max(0.0), (h2[1] + 0.03).max(0.0)];
        let m2 = mat2(&[0.21, 0.43, -0.65, 0.87], h2);
        let m2 = [m2[0] - 0.02, m2[1] + 0.01];
        let out = add2(m2, xo1);
        let expect = [
            0.7 * out[0] + 0.2 * out[1] + 0.11,
            -0.3 * out[0] + 0.9 * out[1] - 0.07,
        ];
        assert_eq!(e.shape(), vec![1, 2]);
        for (got, want) in e.value().data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_weights_and_identity_pool_return_projected_token() {
        // One level, one token: zero all attention/MLP branches and make
        // the final projection the identity; e equals the patch-projected
        // token exactly.
        let cfg = EncoderConfig {
            levels: vec![LevelConfig { grid: 1, window: 1 }],
            feature_dim: 2,
            heads: 1,
            embed_dim: 2,
            image_channels: 1,
            landmark_channels: 1,
        };
        let mut rng = substream(16, "enc-test");
        let mut store = ParamStore::new();
        let enc = FusionEncoder::new(cfg, &mut store, &mut rng).unwrap();
        let l = &enc.levels[0];
        for id in [
            l.wq,
            l.wk,
            l.wv,
            l.wo,
            l.mlp.fc1.w,
            l.mlp.fc1.b,
            l.mlp.fc2.w,
            l.mlp.fc2.b,
            enc.ms_wq,
            enc.ms_wk,
            enc.ms_wv,
            enc.ms_wo,
            enc.ms_mlp.fc1.w,
            enc.ms_mlp.fc1.b,
            enc.ms_mlp.fc2.w,
            enc.ms_mlp.fc2.b,
            enc.pool_proj.b,
        ] {
            for v in store.param_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        store.param_mut(enc.pool_proj.w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store.param_mut(l.patch_proj.w).data_mut().copy_from_slice(&[0.5, -0.25]);
        store.param_mut(l.patch_proj.b).data_mut().copy_from_slice(&[0.1, 0.2]);

        let images = vec![Tensor::new(vec![1, 1, 1], vec![0.6]).unwrap()];
        let lm = Tensor::new(vec![1, 1, 1], vec![0.4]).unwrap();
        let s = Session::new(&store, false, substream(0, "fwd"));
        let batch = enc
            .prepare_batch(&[SampleView { image_levels: &images, landmarks: &lm }])
            .unwrap();
        let e = enc.forward(&s, &batch).unwrap();
        let expect = [0.5 * 0.6 + 0.1, -0.25 * 0.6 + 0.2];
        for (got, want) in e.value().data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_tokens_make_level_order_irrelevant() {
        // When every token of every level carries the same constant value,
        // the mean pool erases token order, so swapping the two levels
        // (with their weights) cannot change the embedding.
        let base = EncoderConfig {
            levels: vec![LevelConfig { grid: 2, window: 2 }, LevelConfig { grid: 4, window: 2 }],
            feature_dim: 4,
            heads: 2,
            embed_dim: 3,
            image_channels: 2,
            landmark_channels: 2,
        };
        let mut swapped = base.clone();
        swapped.levels.reverse();

        let mut rng_a = substream(17, "enc-test");
        let mut store_a = ParamStore::new();
        let enc_a = FusionEncoder::new(base, &mut store_a, &mut rng_a).unwrap();
        let mut rng_b = substream(18, "enc-test");
        let mut store_b = ParamStore::new();
        let enc_b = FusionEncoder::new(swapped, &mut store_b, &mut rng_b).unwrap();

        // Copy every weight of level 0 of A into level 1 of B and vice
        // versa; combiner and projection weights copied directly.
        let copy = |src: &ParamStore, sid: ParamId, dst: &mut ParamStore, did: ParamId| {
            let v = src.param(sid).clone();
            *dst.param_mut(did) = v;
        };
        for (la, lb) in enc_a.levels.iter().zip(enc_b.levels.iter().rev()) {
            for (sa, sb) in [
                (la.patch_proj.w, lb.patch_proj.w),
                (la.patch_proj.b, lb.patch_proj.b),
                (la.lm_proj.w, lb.lm_proj.w),
                (la.lm_proj.b, lb.lm_proj.b),
                (la.wq, lb.wq),
                (la.wk, lb.wk),
                (la.wv, lb.wv),
                (la.wo, lb.wo),
                (la.bias_table, lb.bias_table),
                (la.norm.gamma, lb.norm.gamma),
                (la.norm.beta, lb.norm.beta),
                (la.mlp.fc1.w, lb.mlp.fc1.w),
                (la.mlp.fc1.b, lb.mlp.fc1.b),
                (la.mlp.fc2.w, lb.mlp.fc2.w),
                (la.mlp.fc2.b, lb.mlp.fc2.b),
            ] {
                copy(&store_a, sa, &mut store_b, sb);
            }
        }
        for (sa, sb) in [
            (enc_a.ms_wq, enc_b.ms_wq),
            (enc_a.ms_wk, enc_b.ms_wk),
            (enc_a.ms_wv, enc_b.ms_wv),
            (enc_a.ms_wo, enc_b.ms_wo),
            (enc_a.ms_norm.gamma, enc_b.ms_norm.gamma),
            (enc_a.ms_norm.beta, enc_b.ms_norm.beta),
            (enc_a.ms_mlp.fc1.w, enc_b.ms_mlp.fc1.w),
            (enc_a.ms_mlp.fc1.b, enc_b.ms_mlp.fc1.b),
            (enc_a.ms_mlp.fc2.w, enc_b.ms_mlp.fc2.w),
            (enc_a.ms_mlp.fc2.b, enc_b.ms_mlp.fc2.b),
            (enc_a.pool_proj.w, enc_b.pool_proj.w),
            (enc_a.pool_proj.b, enc_b.pool_proj.b),
        ] {
            copy(&store_a, sa, &mut store_b, sb);
        }

        // Constant streams: both levels pool to identical constant tokens.
        let big = Tensor::full(&[4, 4, 2], 0.35);
        let small = Tensor::full(&[2, 2, 2], 0.35);
        let lm = Tensor::full(&[2, 3, 3], 0.8);
        let run = |enc: &FusionEncoder, store: &ParamStore, images: &[Tensor]| {
            let s = Session::new(store, false, substream(0, "fwd"));
            let batch = enc
                .prepare_batch(&[SampleView { image_levels: images, landmarks: &lm }])
                .unwrap();
            enc.forward(&s, &batch).unwrap().value().clone()
        };
        let ea = run(&enc_a, &store_a, &[small.clone(), big.clone()]);
        let eb = run(&enc_b, &store_b, &[big, small]);
        assert!(ea.max_abs_diff(&eb) < 1e-12, "diff = {}", ea.max_abs_diff(&eb));
    }

    #[test]
    fn batch_rows_match_single_sample_forwards() {
        let cfg = EncoderConfig {
            levels: vec![LevelConfig { grid: 4, window: 2 }, LevelConfig { grid: 2, window: 2 }],
            feature_dim: 8,
            heads: 2,
            embed_dim: 5,
            image_channels: 3,
            landmark_channels: 2,
        };
        let mut rng = substream(19, "enc-test");
        let mut store = ParamStore::new();
        let enc = FusionEncoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let mut rin = substream(20, "enc-in");
        let (im1, lm1) = random_sample(&cfg, &[(6, 6), (3, 3)], (5, 5), &mut rin);
        let (im2, lm2) = random_sample(&cfg, &[(6, 6), (3, 3)], (5, 5), &mut rin);

        let s = Session::new(&store, false, substream(0, "fwd"));
        let batch = enc
            .prepare_batch(&[
                SampleView { image_levels: &im1, landmarks: &lm1 },
                SampleView { image_levels: &im2, landmarks: &lm2 },
            ])
            .unwrap();
        let both = enc.forward(&s, &batch).unwrap().value().clone();

        for (i, (im, lm)) in [(im1, lm1), (im2, lm2)].iter().enumerate() {
            let s1 = Session::new(&store, false, substream(0, "fwd"));
            let b1 = enc
                .prepare_batch(&[SampleView { image_levels: im, landmarks: lm }])
                .unwrap();
            let one = enc.forward(&s1, &b1).unwrap().value().clone();
            for (a, b) in both.row(i).iter().zip(one.row(0)) {
                assert!((a - b).abs() < 1e-12, "sample {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn desk_scale_forward_is_finite_across_seeds() {
        let cfg = EncoderConfig::desk_scale();
        for seed in 0..100u64 {
            let mut rng = substream(seed, "enc-seeds");
            let mut store = ParamStore::new();
            let enc = FusionEncoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
            let (images, lm) =
                random_sample(&cfg, &[(28, 28), (14, 14), (7, 7)], (32, 32), &mut rng);
            let s = Session::new(&store, false, substream(seed, "fwd"));
            let batch = enc
                .prepare_batch(&[SampleView { image_levels: &images, landmarks: &lm }])
                .unwrap();
            let e = enc.forward(&s, &batch).unwrap();
            assert_eq!(e.shape(), vec![1, 64]);
            assert!(e.value().is_finite(), "seed {seed} produced non-finite embedding");
        }
    }

    #[test]
    fn prepare_batch_rejects_bad_geometry() {
        let cfg = tiny_config();
        let mut rng = substream(21, "enc-test");
        let mut store = ParamStore::new();
        let enc = FusionEncoder::new(cfg, &mut store, &mut rng).unwrap();
        // Wrong channel count.
        let images = vec![Tensor::zeros(&[4, 4, 3])];
        let lm = Tensor::zeros(&[2, 3, 3]);
        let err = enc
            .prepare_batch(&[SampleView { image_levels: &images, landmarks: &lm }])
            .unwrap_err();
        assert!(matches!(err, FelError::Shape(m) if m.contains("4x4x3")));
        // Canvas smaller than the token grid.
        let images = vec![Tensor::zeros(&[1, 1, 2])];
        let err = enc
            .prepare_batch(&[SampleView { image_levels: &images, landmarks: &lm }])
            .unwrap_err();
        assert!(matches!(err, FelError::Shape(_)));
        // Wrong number of levels.
        let images = vec![Tensor::zeros(&[4, 4, 2]), Tensor::zeros(&[4, 4, 2])];
        let err = enc
            .prepare_batch(&[SampleView { image_levels: &images, landmarks: &lm }])
            .unwrap_err();
        assert!(matches!(err, FelError::Shape(_)));
    }

    #[test]
    fn relative_position_index_covers_window() {
        // 2x2 window: 4 tokens, offsets span a 3x3 table.
        let idx = relative_position_index(2);
        assert_eq!(idx.len(), 16);
        assert!(idx.iter().all(|&i| i < 9));
        // A token relative to itself sits at the table center.
        for q in 0..4 {
            assert_eq!(idx[q * 4 + q], 4);
        }
        // Distinct geometric offsets get distinct entries per query row.
        let row0: Vec<usize> = idx[0..4].to_vec();
        let mut dedup = row0.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 4);
    }
}
