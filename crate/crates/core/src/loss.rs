//! Training losses: soft cross-entropy on the final corrected
//! distribution, a negative mean pairwise anchor-separation term, and a
//! nearest-same-class-anchor center term, combined by nonnegative weights.

use std::rc::Rc;

use crate::error::{FelError, Result};
use crate::nn::Session;
use crate::reliability::AnchorSet;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Probabilities are clamped to at least this value before the log so a
/// zero entry cannot produce an infinite loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Per-term weights of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_a: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cls: 1.0, lambda_a: 1.0, lambda_c: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_a, self.lambda_c];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(FelError::Config(format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            )));
        }
        if all.iter().all(|l| *l == 0.0) {
            return Err(FelError::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Soft cross-entropy between predicted distributions and target
/// distributions, averaged over the batch:
/// `-(1/B) sum_i sum_j y[i,j] * ln(max(p[i,j], LOG_CLAMP))`.
///
/// Targets may be one-hot or smoothed; rows must align with predictions.
pub fn class_distribution_loss(s: &Session, pred: &Var, targets: &Tensor) -> Result<Var> {
    let (b, n) = {
        let shape = pred.shape();
        if shape.len() != 2 {
            return Err(FelError::Shape(format!(
                "predictions must be a batch matrix, got shape {shape:?}"
            )));
        }
        (shape[0], shape[1])
    };
    if targets.shape() != [b, n] {
        return Err(FelError::Shape(format!(
            "targets shaped {:?} do not match predictions {b}x{n}",
            targets.shape()
        )));
    }
    let y = s.constant(targets.clone());
    Ok(pred
        .clamp_min(LOG_CLAMP)
        .ln()
        .mul(&y)
        .sum_all()
        .scale(-1.0 / b as f64))
}

/// Anchor-separation loss plus a degeneracy flag.
pub struct AnchorSeparation {
    pub loss: Var,
    /// True when there is only one anchor in total; the loss is then a
    /// constant zero and carries no gradient.
    pub single_anchor: bool,
}

/// Negative mean squared distance over all distinct unordered anchor
/// pairs. Uses the identity
/// `sum_{p<q} |a_p - a_q|^2 = n * sum_p |a_p|^2 - |sum_p a_p|^2`,
/// which keeps the tape small and the gradient exact.
pub fn anchor_separation_loss(s: &Session, anchors: &AnchorSet) -> AnchorSeparation {
    let n = anchors.n_classes * anchors.k_per_class;
    if n < 2 {
        return AnchorSeparation { loss: s.constant(Tensor::scalar(0.0)), single_anchor: true };
    }
    let a = s.param(anchors.anchors);
    let sq_sum = a.square().sum_all().scale(n as f64);
    let sum_sq = a.sum_axis0().square().sum_all();
    let pairs = (n * (n - 1) / 2) as f64;
    let loss = sq_sum.sub(&sum_sq).scale(-1.0 / pairs);
    AnchorSeparation { loss, single_anchor: false }
}

/// Mean over the batch of the squared distance from each embedding to
/// its nearest same-class anchor. The minimizing anchor is selected from
/// current values (ties resolved to the lowest anchor slot) and the
/// gradient flows through that selection.
pub fn center_loss(
    s: &Session,
    e: &Var,
    labels: &[usize],
    anchors: &AnchorSet,
) -> Result<Var> {
    let b = e.shape()[0];
    if labels.len() != b {
        return Err(FelError::Shape(format!(
            "{} labels for a batch of {b} embeddings",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= anchors.n_classes) {
        return Err(FelError::Contract(format!(
            "label {bad} out of range for {} classes",
            anchors.n_classes
        )));
    }
    let a = s.param(anchors.anchors);
    let d2 = e.pairwise_dist(&a).square();
    let k = anchors.k_per_class;
    let mut pick = Vec::with_capacity(b);
    {
        let d = d2.value();
        for (i, &y) in labels.iter().enumerate() {
            let row = d.row(i);
            let mut best = y * k;
            for slot in 1..k {
                if row[y * k + slot] < row[best] {
                    best = y * k + slot;
                }
            }
            pick.push(best);
        }
    }
    Ok(d2.select_cols(Rc::new(pick)).mean_all())
}

/// Weighted combination of the available loss terms. Absent terms are
/// skipped entirely (their weight contributes nothing); every present
/// term must currently be finite.
pub fn total_loss(
    cls: Option<&Var>,
    a: Option<&Var>,
    c: Option<&Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let parts = [(cls, w.lambda_cls, "class"), (a, w.lambda_a, "anchor"), (c, w.lambda_c, "center")];
    let mut total: Option<Var> = None;
    for (term, lambda, name) in parts {
        let Some(term) = term else { continue };
        let v = term.value();
        if !v.is_scalar() {
            return Err(FelError::Shape(format!("{name} loss term is not a scalar")));
        }
        if !v.is_finite() {
            return Err(FelError::Numeric(format!(
                "{name} loss term is non-finite: {}",
                v.item()
            )));
        }
        let weighted = term.scale(lambda);
        total = Some(match total {
            None => weighted,
            Some(t) => t.add(&weighted),
        });
    }
    total.ok_or_else(|| FelError::Contract("no loss terms supplied".into()))
}
