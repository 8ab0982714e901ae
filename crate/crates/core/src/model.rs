//! Full model assembly: fusion encoder, classifier head, and the
//! optional reliability-balancing branches (anchor-based geometric
//! correction and multi-head attentive correction), plus the combined
//! training loss.
//!
//! The two correction branches can be enabled independently, giving the
//! four study arms: neither (the final distribution is the primary one
//! and only the class loss trains), anchors only, attention only, or
//! both fused by confidence weighting.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::datagen::SyntheticSample;
use crate::encoder::{EncoderConfig, EncoderBatch, FusionEncoder, SampleView};
use crate::error::{FelError, Result};
use crate::loss::{
    anchor_separation_loss, center_loss, class_distribution_loss, total_loss, LossWeights,
};
use crate::nn::{ParamStore, Session};
use crate::reliability::{fuse_rows, predict, AnchorSet, AttentiveCorrector, ClassifierHead};
use crate::rng::substream;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Everything needed to build a model deterministically from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    /// Anchors per class (K). Zero disables the anchor branch outright.
    pub anchors_per_class: usize,
    /// Distance temperature for anchor similarity.
    pub delta: f64,
    /// Study-arm switches for the two correction branches.
    pub enable_anchors: bool,
    pub enable_mhsa: bool,
    pub head_hidden: usize,
    pub dropout: f64,
    /// The embedding is reshaped into this many tokens for the attentive
    /// corrector; token width is `dim_e / corrector_tokens`.
    pub corrector_tokens: usize,
    pub corrector_heads: usize,
    pub loss_weights: LossWeights,
}

impl ModelConfig {
    pub fn desk_scale(n_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::desk_scale(),
            n_classes,
            anchors_per_class: 8,
            delta: 1.0,
            enable_anchors: true,
            enable_mhsa: true,
            head_hidden: 64,
            dropout: 0.5,
            corrector_tokens: 4,
            corrector_heads: 4,
            loss_weights: LossWeights::default(),
        }
    }

    /// Whether the anchor branch is active under this config.
    pub fn anchors_active(&self) -> bool {
        self.enable_anchors && self.anchors_per_class > 0
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_classes < 2 {
            return Err(FelError::Config(format!(
                "model needs at least two classes, got {}",
                self.n_classes
            )));
        }
        if self.head_hidden == 0 {
            return Err(FelError::Config("classifier hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FelError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        self.loss_weights.validate()?;
        Ok(())
    }
}

/// One forward pass over a batch. Optional branches are `None` exactly
/// when the corresponding study arm is disabled.
pub struct ModelOutput {
    /// Embeddings `[B, dim_e]`.
    pub embeddings: Var,
    /// Primary label distribution `[B, N]` from the classifier head.
    pub primary: Var,
    pub geometric: Option<Var>,
    pub attentive: Option<Var>,
    /// Confidence-fused correction, present when any branch is active.
    pub fused: Option<Var>,
    /// Final corrected label distribution `[B, N]`.
    pub final_dist: Var,
}

pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: FusionEncoder,
    pub head: ClassifierHead,
    pub anchors: Option<AnchorSet>,
    pub corrector: Option<AttentiveCorrector>,
}

/// Borrow a generated sample in the shape the encoder expects.
pub fn view(s: &SyntheticSample) -> SampleView<'_> {
    SampleView { image_levels: &s.image_levels, landmarks: &s.landmarks }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut enc_rng = substream(seed, "init-encoder");
        let encoder = FusionEncoder::new(cfg.encoder.clone(), &mut store, &mut enc_rng)?;
        let dim_e = cfg.encoder.embed_dim;
        let mut head_rng = substream(seed, "init-head");
        let head = ClassifierHead::new(
            &mut store,
            "head",
            dim_e,
            cfg.head_hidden,
            cfg.n_classes,
            cfg.dropout,
            &mut head_rng,
        )?;
        let anchors = if cfg.anchors_active() {
            let mut rng = substream(seed, "init-anchors");
            Some(AnchorSet::new(
                &mut store,
                "anchors",
                cfg.n_classes,
                cfg.anchors_per_class,
                dim_e,
                cfg.delta,
                &mut rng,
            )?)
        } else {
            None
        };
        let corrector = if cfg.enable_mhsa {
            let mut rng = substream(seed, "init-corrector");
            Some(AttentiveCorrector::new(
                &mut store,
                "corrector",
                dim_e,
                cfg.corrector_tokens,
                cfg.corrector_heads,
                cfg.n_classes,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self { cfg, store, encoder, head, anchors, corrector })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn prepare_batch(&self, samples: &[SampleView]) -> Result<EncoderBatch> {
        self.encoder.prepare_batch(samples)
    }

    pub fn forward(&self, s: &Session, batch: &EncoderBatch) -> Result<ModelOutput> {
        let embeddings = self.encoder.forward(s, batch)?;
        let primary = self.head.primary(s, &embeddings);
        let geometric = self.anchors.as_ref().map(|a| a.geometric(s, &embeddings));
        let attentive = self.corrector.as_ref().map(|c| c.forward(s, &embeddings));
        let fused = match (&geometric, &attentive) {
            (Some(g), Some(a)) => Some(fuse_rows(g, a)),
            (Some(g), None) => Some(g.clone()),
            (None, Some(a)) => Some(a.clone()),
            (None, None) => None,
        };
        let final_dist = match &fused {
            Some(t) => fuse_rows(&primary, t),
            None => primary.clone(),
        };
        Ok(ModelOutput { embeddings, primary, geometric, attentive, fused, final_dist })
    }

    /// Combined training loss on one forward pass: negative
    /// log-likelihood of the final distribution against the (possibly
    /// smoothed) targets, plus the anchor separation and center terms
    /// whenever the anchor branch is active.
    pub fn training_loss(
        &self,
        s: &Session,
        out: &ModelOutput,
        targets: &Tensor,
        labels: &[usize],
    ) -> Result<Var> {
        Ok(self.training_loss_terms(s, out, targets, labels)?.total)
    }

    /// Like [`Model::training_loss`], but also hands back the individual
    /// terms so callers can record them separately.
    pub fn training_loss_terms(
        &self,
        s: &Session,
        out: &ModelOutput,
        targets: &Tensor,
        labels: &[usize],
    ) -> Result<LossTerms> {
        let cls = class_distribution_loss(s, &out.final_dist, targets)?;
        let (sep, center) = match &self.anchors {
            Some(anchors) => {
                let sep = anchor_separation_loss(s, anchors);
                let center = center_loss(s, &out.embeddings, labels, anchors)?;
                (Some(sep.loss), Some(center))
            }
            None => (None, None),
        };
        let total =
            total_loss(Some(&cls), sep.as_ref(), center.as_ref(), &self.cfg.loss_weights)?;
        Ok(LossTerms { total, class: cls, separation: sep, center })
    }

    /// Evaluation-mode pass: dropout off, batch norm on running stats.
    /// Returns concrete tensors plus argmax predictions of the final
    /// distribution.
    pub fn evaluate_batch(&self, samples: &[SampleView]) -> Result<BatchEval> {
        let batch = self.prepare_batch(samples)?;
        let s = Session::new(&self.store, false, substream(0, "eval-session"));
        let out = self.forward(&s, &batch)?;
        let primary = out.primary.value();
        let final_dist = out.final_dist.value();
        let embeddings = out.embeddings.value();
        let preds = (0..final_dist.shape()[0]).map(|r| predict(final_dist.row(r))).collect();
        Ok(BatchEval { primary, final_dist, embeddings, preds })
    }

    /// Persist every parameter and running buffer.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store.named_tensors())
    }

    /// Load parameters saved by [`Model::save`] into this model. The
    /// architecture must match; mismatched names or shapes are errors.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        self.store.load_named_tensors(&entries)
    }
}

/// Individual loss terms from one training forward pass. The optional
/// terms are absent when the anchor branch is disabled.
pub struct LossTerms {
    pub total: Var,
    pub class: Var,
    pub separation: Option<Var>,
    pub center: Option<Var>,
}

/// Concrete evaluation outputs for metric computation.
pub struct BatchEval {
    pub primary: Tensor,
    pub final_dist: Tensor,
    pub embeddings: Tensor,
    pub preds: Vec<usize>,
}

/// Compare analytic gradients of the combined training loss against
/// central differences for every parameter tensor, sampling up to
/// `per_param` coordinates each. Every loss evaluation reruns the
/// forward pass with an identical session seed, so stochastic layers
/// (dropout) see identical draws and the loss is a deterministic
/// function of the parameters.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    model: &mut Model,
    views: &[SampleView],
    targets: &Tensor,
    labels: &[usize],
    session_seed: u64,
    h: f64,
    grad_floor: f64,
    per_param: usize,
    coord_rng: &mut ChaCha8Rng,
) -> Result<crate::gradcheck::GradCheckReport> {
    use rand::Rng;
    if !(h > 0.0) || !(grad_floor > 0.0) {
        return Err(FelError::InvalidArgument(
            "finite-difference step and floor must be positive".into(),
        ));
    }
    let batch = model.prepare_batch(views)?;
    let loss_value = |model: &Model| -> Result<f64> {
        let (_s, _o, loss) =
            train_step_loss(model, &batch, targets, labels, substream(session_seed, "fd-session"))?;
        Ok(loss.value().item())
    };
    let grads = {
        let (s, _o, loss) =
            train_step_loss(model, &batch, targets, labels, substream(session_seed, "fd-session"))?;
        s.grads_by_param(&loss.backward()?)
    };

    let mut report = crate::gradcheck::GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        n_coords: 0,
    };
    for (pi, grad) in grads.iter().enumerate() {
        let len = model.store.param_at(pi).len();
        let coords: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            let mut all: Vec<usize> = (0..len).collect();
            for i in 0..per_param {
                let j = coord_rng.random_range(i..all.len());
                all.swap(i, j);
            }
            all.truncate(per_param);
            all
        };
        for c in coords {
            let orig = model.store.param_at(pi).data()[c];
            model.store.param_mut_at(pi).data_mut()[c] = orig + h;
            let fp = loss_value(model)?;
            model.store.param_mut_at(pi).data_mut()[c] = orig - h;
            let fm = loss_value(model)?;
            model.store.param_mut_at(pi).data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[c]);
            let denom = grad_floor.max(analytic.abs()).max(numeric.abs());
            let rel = (analytic - numeric).abs() / denom;
            report.n_coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, c, analytic, numeric));
            }
        }
    }
    Ok(report)
}

/// Convenience for tests and the training loop: run a training-mode
/// forward + loss and return the loss var together with the output.
pub fn train_step_loss<'m>(
    model: &'m Model,
    batch: &EncoderBatch,
    targets: &Tensor,
    labels: &[usize],
    rng: ChaCha8Rng,
) -> Result<(Session<'m>, ModelOutput, Var)> {
    let s = Session::new(&model.store, true, rng);
    let out = model.forward(&s, batch)?;
    let loss = model.training_loss(&s, &out, targets, labels)?;
    Ok((s, out, loss))
}
