//! Adam optimizer with exponential per-epoch learning-rate decay.

use crate::error::{FelError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Per-epoch exponential decay factor in (0, 1].
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr0: 3e-4, gamma: 0.995, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(FelError::Config("learning rate must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(FelError::Config("lr decay factor must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FelError::Config("Adam betas must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(FelError::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam state: per-parameter first/second moment estimates and step
/// counters. Step counters are per parameter so that parameters absent
/// from some steps (disabled model arms) still get correct bias
/// correction.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let shapes = store.param_shapes();
        Ok(Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            steps: vec![0; shapes.len()],
            cfg,
        })
    }

    /// Effective learning rate at an epoch: `lr0 * gamma^epoch`.
    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.cfg.lr0 * self.cfg.gamma.powf(epoch as f64)
    }

    /// Apply one update using gradients arranged by parameter index
    /// (`None` entries are skipped). `lr` is the effective rate for the
    /// current epoch.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(FelError::Shape(format!(
                "gradient list length {} vs {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let id = crate::nn::ParamId::from_index(i);
            if g.shape() != store.param(id).shape() {
                return Err(FelError::Shape(format!(
                    "gradient shape {:?} vs parameter shape {:?} ({})",
                    g.shape(),
                    store.param(id).shape(),
                    store.param_name(id)
                )));
            }
            self.steps[i] += 1;
            let t = self.steps[i];
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.param_mut(id);
            for ((pv, (mv, vv)), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn toy_store() -> (ParamStore, crate::nn::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let (mut store, id) = toy_store();
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let g = Tensor::from_vec(vec![0.5, -0.25, 10.0]);
        let before = store.param(id).clone();
        adam.step(&mut store, &[Some(g.clone())], 0.001).unwrap();
        for i in 0..3 {
            let delta = store.param(id).data()[i] - before.data()[i];
            // Bias-corrected first step is lr * sign(g) up to the eps term.
            assert!(delta.signum() == -g.data()[i].signum());
            assert!((delta.abs() - 0.001).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = toy_store();
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let before = store.param(id).clone();
        adam.step(&mut store, &[Some(Tensor::zeros(&[3]))], 0.01).unwrap();
        assert_eq!(store.param(id), &before);
    }

    #[test]
    fn skipped_parameters_are_untouched() {
        let (mut store, id) = toy_store();
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let before = store.param(id).clone();
        adam.step(&mut store, &[None], 0.01).unwrap();
        assert_eq!(store.param(id), &before);
    }

    #[test]
    fn lr_decays_per_epoch() {
        let (store, _) = toy_store();
        let adam = Adam::new(AdamConfig::default(), &store).unwrap();
        assert!((adam.lr_at_epoch(0) - 3e-4).abs() < 1e-18);
        assert!((adam.lr_at_epoch(1) - 3e-4 * 0.995).abs() < 1e-18);
        assert!((adam.lr_at_epoch(10) - 3e-4 * 0.995f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut store, _) = toy_store();
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let err = adam.step(&mut store, &[Some(Tensor::zeros(&[2]))], 0.01);
        assert!(matches!(err, Err(FelError::Shape(_))));
    }

    #[test]
    fn determinism_two_runs_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = substream(9, "init");
            let id = store.register("p", Tensor::randn(&[4], 1.0, &mut rng));
            let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
            for step in 0..20 {
                let g = Tensor::randn(&[4], 1.0, &mut crate::rng::substream_indexed(9, "g", step));
                adam.step(&mut store, &[Some(g)], adam.lr_at_epoch(step)).unwrap();
            }
            store.param(id).clone()
        };
        assert_eq!(run(), run());
    }
}
