//! Label-distribution reliability machinery: the primary classifier head,
//! trainable per-class anchors with distance-based geometric correction,
//! an attentive correction stream, and confidence-weighted fusion of the
//! three into a final label distribution.
//!
//! Confidence of a distribution is one minus its normalized entropy, so a
//! uniform distribution has confidence 0 and a one-hot distribution has
//! confidence 1. Corrections are fused as confidence-weighted convex
//! combinations; when both weights vanish (both inputs uniform) the plain
//! mean is used, which is the same distribution any weighting would give.
//!
//! Everything exists twice: as tape operations (differentiable, used in
//! training) and as plain-slice functions (used by tests as independent
//! oracles and by callers that only need numbers). The two paths are
//! cross-checked in the unit tests.


use rand_chacha::ChaCha8Rng;

use crate::error::{FelError, Result};
use crate::nn::{glorot, BatchNorm, Dropout, Linear, ParamId, ParamStore, Session};
use crate::tape::{Var, FUSE_FALLBACK_EPS};
use crate::tensor::{normalized_entropy as entropy_unchecked, Tensor};

/// Sum / nonnegativity tolerance for validating that a vector is a
/// probability distribution.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Reject vectors that are not probability distributions.
fn validate_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(FelError::Contract("empty label distribution".into()));
    }
    if p.iter().any(|&v| !v.is_finite() || v < -SIMPLEX_TOL) {
        return Err(FelError::Contract(format!(
            "label distribution has negative or non-finite entries: {p:?}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(FelError::Contract(format!(
            "label distribution sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Normalized entropy of a validated distribution, in [0, 1]: uniform
/// maps to exactly 1, one-hot to exactly 0.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    validate_simplex(p)?;
    Ok(entropy_unchecked(p))
}

/// Confidence of a distribution: `1 - normalized_entropy`.
pub fn confidence(p: &[f64]) -> Result<f64> {
    Ok(1.0 - normalized_entropy(p)?)
}

/// Euclidean distance between an embedding and one anchor point.
pub fn anchor_distance(e: &[f64], a: &[f64]) -> Result<f64> {
    if e.len() != a.len() {
        return Err(FelError::Shape(format!(
            "embedding width {} vs anchor width {}",
            e.len(),
            a.len()
        )));
    }
    Ok(e.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Distance-softmax similarity of an embedding to every anchor row:
/// `softmax(-d / delta)` over all anchors, computed with max-shift.
pub fn similarity_scores(e: &[f64], anchors: &Tensor, delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(FelError::Config(format!(
            "distance temperature must be positive, got {delta}"
        )));
    }
    let (rows, _) = anchors.dims2();
    let mut logits = Vec::with_capacity(rows);
    for r in 0..rows {
        logits.push(-anchor_distance(e, anchors.row(r))? / delta);
    }
    crate::tensor::softmax_temp(&logits, 1.0)
}

/// Geometric correction given precomputed anchor distances (class-major,
/// `class * k + slot`): distance-softmax mass summed per class.
pub fn correction_from_distances(
    d: &[f64],
    n_classes: usize,
    k_per_class: usize,
    delta: f64,
) -> Result<Vec<f64>> {
    if d.len() != n_classes * k_per_class {
        return Err(FelError::Shape(format!(
            "{} distances cannot cover {n_classes} classes x {k_per_class} anchors",
            d.len()
        )));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(FelError::Config(format!(
            "distance temperature must be positive, got {delta}"
        )));
    }
    let logits: Vec<f64> = d.iter().map(|&x| -x / delta).collect();
    let s = crate::tensor::softmax_temp(&logits, 1.0)?;
    let mut t_g = vec![0.0; n_classes];
    for (r, &v) in s.iter().enumerate() {
        t_g[r / k_per_class] += v;
    }
    Ok(t_g)
}

/// Per-class sums of anchor similarity mass: the geometric correction
/// distribution. Anchor rows are class-major (`class * k + slot`).
pub fn geometric_correction(
    e: &[f64],
    anchors: &Tensor,
    n_classes: usize,
    k_per_class: usize,
    delta: f64,
) -> Result<Vec<f64>> {
    let (rows, _) = anchors.dims2();
    if rows != n_classes * k_per_class {
        return Err(FelError::Shape(format!(
            "{rows} anchor rows cannot cover {n_classes} classes x {k_per_class} anchors"
        )));
    }
    let mut d = Vec::with_capacity(rows);
    for r in 0..rows {
        d.push(anchor_distance(e, anchors.row(r))?);
    }
    correction_from_distances(&d, n_classes, k_per_class, delta)
}

/// Confidence-weighted convex combination of two distributions:
/// `(c_a * a + c_b * b) / (c_a + c_b)`, falling back to the plain mean
/// when both confidences vanish.
pub fn fuse_corrections(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(FelError::Shape(format!(
            "cannot fuse distributions of widths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ca = confidence(a)?;
    let cb = confidence(b)?;
    let s = ca + cb;
    if s < FUSE_FALLBACK_EPS {
        Ok(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
    } else {
        Ok(a.iter().zip(b).map(|(x, y)| (ca * x + cb * y) / s).collect())
    }
}

/// Final corrected distribution: same fusion rule applied to the primary
/// distribution and the fused correction.
pub fn final_distribution(l: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    fuse_corrections(l, t)
}

/// Argmax with ties broken toward the lowest class index.
pub fn predict(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-row confidence `1 - H(row)` on the tape.
pub fn confidence_rows(dist: &Var) -> Var {
    dist.entropy_rows().scale(-1.0).add_scalar(1.0)
}

/// Tape-side confidence-weighted fusion of two row-distribution matrices.
pub fn fuse_rows(a: &Var, b: &Var) -> Var {
    let ca = confidence_rows(a);
    let cb = confidence_rows(b);
    a.confidence_weighted_sum(b, &ca, &cb)
}

/// Trainable per-class anchor points in embedding space.
pub struct AnchorSet {
    pub anchors: ParamId,
    onehot: Tensor,
    pub n_classes: usize,
    pub k_per_class: usize,
    pub dim_e: usize,
    pub delta: f64,
}

impl AnchorSet {
    /// Anchors start from a zero-mean Gaussian with std `1/sqrt(dim_e)`
    /// so their norms match unit-scale embeddings.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_classes: usize,
        k_per_class: usize,
        dim_e: usize,
        delta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_classes == 0 || k_per_class == 0 || dim_e == 0 {
            return Err(FelError::Config(format!(
                "anchor set needs positive class count, anchors per class and width; \
                 got {n_classes}/{k_per_class}/{dim_e}"
            )));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(FelError::Config(format!(
                "distance temperature must be positive, got {delta}"
            )));
        }
        let rows = n_classes * k_per_class;
        let std = 1.0 / (dim_e as f64).sqrt();
        let anchors = store.register(name, Tensor::randn(&[rows, dim_e], std, rng));
        let mut onehot = Tensor::zeros(&[rows, n_classes]);
        for r in 0..rows {
            onehot.data_mut()[r * n_classes + r / k_per_class] = 1.0;
        }
        Ok(Self { anchors, onehot, n_classes, k_per_class, dim_e, delta })
    }

    /// Class-membership one-hot matrix, anchor rows class-major.
    pub fn membership(&self) -> &Tensor {
        &self.onehot
    }

    /// Geometric correction for a batch of embeddings `[B, dim_e]`:
    /// distance-softmax over all anchors, summed per class -> `[B, N]`.
    pub fn geometric(&self, s: &Session, e: &Var) -> Var {
        let a = s.param(self.anchors);
        let sim = e.pairwise_dist(&a).scale(-1.0 / self.delta).softmax_rows();
        sim.matmul(&s.constant(self.onehot.clone()))
    }
}

/// The primary classifier: two hidden blocks
/// (linear -> rectifier -> dropout -> batch norm) and a linear output.
pub struct ClassifierHead {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub out: Linear,
    dropout: Dropout,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim_e: usize,
        hidden: usize,
        n_classes: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim_e == 0 || hidden == 0 || n_classes == 0 {
            return Err(FelError::Config(
                "classifier widths must be positive".into(),
            ));
        }
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim_e, hidden, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), hidden),
            out: Linear::new(store, &format!("{name}.out"), hidden, n_classes, rng),
            dropout: Dropout::new(dropout_p),
        })
    }

    pub fn logits(&self, s: &Session, e: &Var) -> Var {
        let h = self.bn1.forward(s, &self.dropout.forward(s, &self.fc1.forward(s, e).relu()));
        let h = self.bn2.forward(s, &self.dropout.forward(s, &self.fc2.forward(s, &h).relu()));
        self.out.forward(s, &h)
    }

    /// Primary label distribution `softmax(logits)`, rows on the simplex.
    pub fn primary(&self, s: &Session, e: &Var) -> Var {
        self.logits(s, e).softmax_rows()
    }
}

/// Attentive correction: the embedding is viewed as a short token
/// sequence, self-attended, mean-pooled and projected to a distribution
/// over classes.
pub struct AttentiveCorrector {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub out_proj: Linear,
    pub n_tokens: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub dim_e: usize,
}

impl AttentiveCorrector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim_e: usize,
        n_tokens: usize,
        n_heads: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_tokens == 0 || !dim_e.is_multiple_of(n_tokens) {
            return Err(FelError::Config(format!(
                "embedding width {dim_e} does not split into {n_tokens} tokens"
            )));
        }
        let d_model = dim_e / n_tokens;
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(FelError::Config(format!(
                "token width {d_model} does not split into {n_heads} heads"
            )));
        }
        Ok(Self {
            wq: store.register(&format!("{name}.wq"), glorot(d_model, d_model, rng)),
            wk: store.register(&format!("{name}.wk"), glorot(d_model, d_model, rng)),
            wv: store.register(&format!("{name}.wv"), glorot(d_model, d_model, rng)),
            wo: store.register(&format!("{name}.wo"), glorot(d_model, d_model, rng)),
            out_proj: Linear::new(store, &format!("{name}.out"), d_model, n_classes, rng),
            n_tokens,
            n_heads,
            d_model,
            dim_e,
        })
    }

    /// Attentive correction distribution for a batch `[B, dim_e]` -> `[B, N]`.
    pub fn forward(&self, s: &Session, e: &Var) -> Var {
        let b = e.shape()[0];
        let x = e.reshape(vec![b * self.n_tokens, self.d_model]);
        let q = x.matmul(&s.param(self.wq));
        let k = x.matmul(&s.param(self.wk));
        let v = x.matmul(&s.param(self.wv));
        let attn = q.block_attention(&k, &v, self.n_heads, self.n_tokens, None);
        let pooled = attn.matmul(&s.param(self.wo)).block_mean_rows(self.n_tokens);
        self.out_proj.forward(s, &pooled).softmax_rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn entropy_and_confidence_contract_values() {
        let uniform = vec![0.125; 8];
        assert_eq!(normalized_entropy(&uniform).unwrap(), 1.0);
        assert_eq!(confidence(&uniform).unwrap(), 0.0);
        let onehot = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(normalized_entropy(&onehot).unwrap(), 0.0);
        assert_eq!(confidence(&onehot).unwrap(), 1.0);
        let half = [0.5, 0.5, 0.0, 0.0];
        assert!((normalized_entropy(&half).unwrap() - 0.5).abs() < 1e-12);
        assert!((confidence(&half).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_non_simplex() {
        assert!(matches!(normalized_entropy(&[0.5, 0.2]), Err(FelError::Contract(_))));
        assert!(matches!(normalized_entropy(&[1.5, -0.5]), Err(FelError::Contract(_))));
        assert!(matches!(normalized_entropy(&[]), Err(FelError::Contract(_))));
        assert!(matches!(
            normalized_entropy(&[f64::NAN, 1.0]),
            Err(FelError::Contract(_))
        ));
    }

    #[test]
    fn anchor_distance_hand_cases() {
        assert_eq!(anchor_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(anchor_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        // Symmetry on random pairs.
        let mut rng = substream(3, "dist");
        for _ in 0..20 {
            let a: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            assert_eq!(
                anchor_distance(&a, &b).unwrap(),
                anchor_distance(&b, &a).unwrap()
            );
        }
        assert!(matches!(
            anchor_distance(&[1.0], &[1.0, 2.0]),
            Err(FelError::Shape(_))
        ));
    }

    #[test]
    fn similarity_scores_contract() {
        // Single anchor: all mass on it.
        let one = Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap();
        assert_eq!(similarity_scores(&[0.0, 0.0], &one, 1.0).unwrap(), vec![1.0]);
        // Two equidistant anchors split evenly.
        let two = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let s = similarity_scores(&[0.0, 0.0], &two, 1.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
        // Three anchors at hand-set distances: direct formula oracle.
        let three = Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap();
        let s = similarity_scores(&[0.0], &three, 1.0).unwrap();
        let z = (-1.0f64).exp() + (-2.0f64).exp() + (-4.0f64).exp();
        assert!((s[0] - (-1.0f64).exp() / z).abs() < 1e-12);
        assert!((s[1] - (-2.0f64).exp() / z).abs() < 1e-12);
        assert!((s[2] - (-4.0f64).exp() / z).abs() < 1e-12);
        // Larger distance -> smaller score; total mass 1.
        assert!(s[0] > s[1] && s[1] > s[2]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // Bad temperature is a configuration error.
        assert!(matches!(
            similarity_scores(&[0.0], &three, 0.0),
            Err(FelError::Config(_))
        ));
    }

    #[test]
    fn geometric_correction_contract() {
        // e on top of one class-0 anchor, every other anchor far away.
        let anchors = Tensor::matrix(
            4,
            2,
            vec![0.0, 0.0, 50.0, 50.0, -60.0, 0.0, 0.0, 70.0],
        )
        .unwrap();
        let t = geometric_correction(&[0.0, 0.0], &anchors, 2, 2, 1.0).unwrap();
        assert!(t[0] > 1.0 - 1e-9 && t[1] < 1e-9);
        // All anchors equidistant -> uniform.
        let sym = Tensor::matrix(4, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let t = geometric_correction(&[0.0, 0.0], &sym, 2, 2, 1.0).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-12 && (t[1] - 0.5).abs() < 1e-12);
        // K=1 collapses to the per-class similarity vector itself.
        let k1 = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let t = geometric_correction(&[0.0], &k1, 2, 1, 1.0).unwrap();
        let s = similarity_scores(&[0.0], &k1, 1.0).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn fusion_contract() {
        let a = [0.7, 0.2, 0.1];
        assert_eq!(fuse_corrections(&a, &a).unwrap(), a.to_vec());
        // One-hot (confidence 1) vs uniform (confidence 0): one-hot wins.
        let onehot = [1.0, 0.0, 0.0];
        let uniform = [1.0 / 3.0; 3];
        let t = fuse_corrections(&onehot, &uniform).unwrap();
        for (x, y) in t.iter().zip(&onehot) {
            assert!((x - y).abs() < 1e-12);
        }
        // Both uniform: fallback mean is uniform again.
        let t = fuse_corrections(&uniform, &uniform).unwrap();
        for x in &t {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        // Equal positive confidences -> arithmetic mean.
        let p = [0.6, 0.4];
        let q = [0.4, 0.6];
        let t = fuse_corrections(&p, &q).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-12 && (t[1] - 0.5).abs() < 1e-12);
        // Convexity: entries sit between the inputs.
        let r = fuse_corrections(&[0.9, 0.1], &[0.2, 0.8]).unwrap();
        assert!(r[0] <= 0.9 && r[0] >= 0.2 && r[1] <= 0.8 && r[1] >= 0.1);
    }

    #[test]
    fn final_distribution_prefers_confident_input() {
        let l = [0.25, 0.25, 0.25, 0.25];
        let t = [0.05, 0.85, 0.05, 0.05];
        let f = final_distribution(&l, &t).unwrap();
        for (x, y) in f.iter().zip(&t) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[0.0, 0.0, 0.0, 1.0]), 3);
        assert_eq!(predict(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(predict(&[0.1, 0.5, 0.4]), 1);
        assert_eq!(predict(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn agreement_is_preserved_by_fusion() {
        let mut rng = substream(9, "fuse");
        for _ in 0..200 {
            let n = 4;
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let l = crate::tensor::softmax_temp(&raw, 0.3).unwrap();
            let raw2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut t = crate::tensor::softmax_temp(&raw2, 0.3).unwrap();
            // Force agreement on the argmax.
            let il = predict(&l);
            let it = predict(&t);
            t.swap(il, it);
            let f = final_distribution(&l, &t).unwrap();
            assert_eq!(predict(&f), il);
        }
    }

    #[test]
    fn head_zero_weights_give_uniform() {
        let mut rng = substream(30, "head");
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "head", 8, 16, 5, 0.5, &mut rng).unwrap();
        for id in [head.out.w, head.out.b] {
            for v in store.param_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let s = Session::new(&store, false, substream(0, "fwd"));
        let e = s.constant(Tensor::randn(&[3, 8], 1.0, &mut substream(1, "e")));
        let l = head.primary(&s, &e);
        for &v in l.value().data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn head_fixed_logits_match_scalar_softmax() {
        // Zero hidden path plus hand-set output bias = fixed logits.
        let mut rng = substream(31, "head");
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "head", 4, 8, 3, 0.5, &mut rng).unwrap();
        for v in store.param_mut(head.out.w).data_mut() {
            *v = 0.0;
        }
        let ln2 = std::f64::consts::LN_2;
        store.param_mut(head.out.b).data_mut().copy_from_slice(&[ln2, 0.0, 0.0]);
        let s = Session::new(&store, false, substream(0, "fwd"));
        let e = s.constant(Tensor::randn(&[1, 4], 1.0, &mut substream(2, "e")));
        let l = head.primary(&s, &e);
        // softmax([ln 2, 0, 0]) = [2, 1, 1] / 4.
        assert!((l.value().data()[0] - 0.5).abs() < 1e-12);
        assert!((l.value().data()[1] - 0.25).abs() < 1e-12);
        assert!((l.value().data()[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn head_outputs_stay_on_simplex() {
        let mut seeds_checked = 0;
        for seed in 0..50u64 {
            let mut rng = substream(seed, "head-sweep");
            let mut store = ParamStore::new();
            let head =
                ClassifierHead::new(&mut store, "head", 6, 12, 7, 0.5, &mut rng).unwrap();
            // Exercise both train (dropout active) and eval modes.
            for train in [true, false] {
                let s = Session::new(&store, train, substream(seed, "drop"));
                let e = s.constant(Tensor::randn(&[4, 6], 2.0, &mut rng));
                let l = head.primary(&s, &e);
                for row in 0..4 {
                    validate_simplex(l.value().row(row)).unwrap();
                }
                seeds_checked += 1;
            }
        }
        assert_eq!(seeds_checked, 100);
    }

    #[test]
    fn anchor_set_tape_path_matches_plain_functions() {
        let mut rng = substream(40, "anchors");
        let mut store = ParamStore::new();
        let set = AnchorSet::new(&mut store, "anchors", 3, 2, 4, 0.7, &mut rng).unwrap();
        let e_data: Vec<f64> = (0..8).map(|i| (i as f64) * 0.31 - 1.0).collect();
        let s = Session::new(&store, false, substream(0, "fwd"));
        let e = s.constant(Tensor::matrix(2, 4, e_data.clone()).unwrap());
        let t_g = set.geometric(&s, &e);
        for row in 0..2 {
            let plain = geometric_correction(
                &e_data[row * 4..(row + 1) * 4],
                store.param(set.anchors),
                3,
                2,
                0.7,
            )
            .unwrap();
            for (a, b) in t_g.value().row(row).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            validate_simplex(t_g.value().row(row)).unwrap();
        }
    }

    #[test]
    fn anchor_set_validates_arguments() {
        let mut rng = substream(41, "anchors");
        let mut store = ParamStore::new();
        assert!(matches!(
            AnchorSet::new(&mut store, "a0", 0, 2, 4, 1.0, &mut rng),
            Err(FelError::Config(_))
        ));
        assert!(matches!(
            AnchorSet::new(&mut store, "a1", 2, 0, 4, 1.0, &mut rng),
            Err(FelError::Config(_))
        ));
        assert!(matches!(
            AnchorSet::new(&mut store, "a2", 2, 2, 4, -1.0, &mut rng),
            Err(FelError::Config(_))
        ));
    }

    #[test]
    fn corrector_zero_projection_gives_uniform() {
        let mut rng = substream(42, "corr");
        let mut store = ParamStore::new();
        let corr = AttentiveCorrector::new(&mut store, "corr", 8, 4, 2, 5, &mut rng).unwrap();
        for id in [corr.out_proj.w, corr.out_proj.b] {
            for v in store.param_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let s = Session::new(&store, false, substream(0, "fwd"));
        let e = s.constant(Tensor::randn(&[3, 8], 1.0, &mut substream(5, "e")));
        let t_a = corr.forward(&s, &e);
        for &v in t_a.value().data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn corrector_single_token_matches_hand_attention() {
        // One token: self-attention collapses to v -> wo -> projection.
        let mut rng = substream(43, "corr");
        let mut store = ParamStore::new();
        let corr = AttentiveCorrector::new(&mut store, "corr", 2, 1, 1, 2, &mut rng).unwrap();
        let set = |store: &mut ParamStore, id: ParamId, vals: &[f64]| {
            store.param_mut(id).data_mut().copy_from_slice(vals);
        };
        set(&mut store, corr.wq, &[0.3, -0.1, 0.2, 0.5]);
        set(&mut store, corr.wk, &[0.7, 0.2, -0.4, 0.1]);
        set(&mut store, corr.wv, &[0.6, -0.2, 0.3, 0.9]);
        set(&mut store, corr.wo, &[1.0, 0.5, -0.5, 0.25]);
        set(&mut store, corr.out_proj.w, &[0.8, -0.6, 0.1, 0.4]);
        set(&mut store, corr.out_proj.b, &[0.05, -0.05]);
        let s = Session::new(&store, false, substream(0, "fwd"));
        let e = s.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let t_a = corr.forward(&s, &e);
        // Hand evaluation.
        let x = [0.3_f64, -0.7];
        let v = [0.6 * x[0] + 0.3 * x[1], -0.2 * x[0] + 0.9 * x[1]];
        let o = [v[0] - 0.5 * v[1], 0.5 * v[0] + 0.25 * v[1]];
        let logits: [f64; 2] = [
            0.8 * o[0] + 0.1 * o[1] + 0.05,
            -0.6 * o[0] + 0.4 * o[1] - 0.05,
        ];
        let z = logits[0].exp() + logits[1].exp();
        let expect = [logits[0].exp() / z, logits[1].exp() / z];
        for (a, b) in t_a.value().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn corrector_outputs_stay_on_simplex() {
        for seed in 0..50u64 {
            let mut rng = substream(seed, "corr-sweep");
            let mut store = ParamStore::new();
            let corr =
                AttentiveCorrector::new(&mut store, "corr", 12, 3, 2, 6, &mut rng).unwrap();
            let s = Session::new(&store, false, substream(0, "fwd"));
            let e = s.constant(Tensor::randn(&[5, 12], 1.5, &mut rng));
            let t_a = corr.forward(&s, &e);
            for row in 0..5 {
                validate_simplex(t_a.value().row(row)).unwrap();
            }
        }
    }

    #[test]
    fn corrector_validates_divisibility() {
        let mut rng = substream(44, "corr");
        let mut store = ParamStore::new();
        assert!(matches!(
            AttentiveCorrector::new(&mut store, "c0", 10, 4, 2, 3, &mut rng),
            Err(FelError::Config(_))
        ));
        assert!(matches!(
            AttentiveCorrector::new(&mut store, "c1", 12, 4, 2, 3, &mut rng),
            Err(FelError::Config(_))
        ));
    }

    #[test]
    fn tape_fusion_matches_plain_fusion() {
        let mut rng = substream(45, "fuse-x");
        for _ in 0..50 {
            let mut mk = || -> Vec<f64> {
                let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 3.0).collect();
                crate::tensor::softmax_temp(&raw, 1.0).unwrap()
            };
            let (a, b) = (mk(), mk());
            let store = ParamStore::new();
            let s = Session::new(&store, false, substream(0, "fwd"));
            let va = s.constant(Tensor::matrix(1, 4, a.clone()).unwrap());
            let vb = s.constant(Tensor::matrix(1, 4, b.clone()).unwrap());
            let fused = fuse_rows(&va, &vb);
            let plain = fuse_corrections(&a, &b).unwrap();
            for (x, y) in fused.value().data().iter().zip(&plain) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geometric_pull_toward_class_raises_its_mass() {
        // Strictly shrinking every class-c distance while all other
        // distances stay fixed must not decrease the class-c mass.
        let mut rng = substream(46, "pull");
        for _ in 0..200 {
            let n_classes = 3;
            let k = 2;
            let d: Vec<f64> = (0..n_classes * k).map(|_| rng.random::<f64>() * 5.0).collect();
            let c = rng.random_range(0..n_classes);
            let mut closer = d.clone();
            for slot in 0..k {
                closer[c * k + slot] *= rng.random::<f64>() * 0.9; // strictly smaller
            }
            let before = correction_from_distances(&d, n_classes, k, 1.0).unwrap();
            let after = correction_from_distances(&closer, n_classes, k, 1.0).unwrap();
            assert!(
                after[c] >= before[c] - 1e-15,
                "class {c} mass fell from {} to {}",
                before[c],
                after[c]
            );
        }
    }
}
