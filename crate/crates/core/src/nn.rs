//! Parameter storage, forward-pass sessions, and neural layers.
//!
//! Parameters live in a [`ParamStore`] — a flat, name-addressed list whose
//! registration order is deterministic, which makes checkpoints and
//! optimizer state stable across runs. A [`Session`] wraps one tape-built
//! forward pass: it lazily mints one tape leaf per parameter (so a
//! parameter used twice contributes a single gradient accumulator), tracks
//! train/eval mode, and carries the RNG used by dropout.

use std::cell::{RefCell, RefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FelError, Result};
use crate::tape::{column_mean_var, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Handle to a trainable parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Handle to a non-trainable persistent buffer (e.g. batch-norm running
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(usize);

/// Flat, name-addressed storage for parameters and buffers.
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffer_names: Vec<String>,
    // Interior mutability: running-stat updates happen during a forward
    // pass while the store is shared immutably with the session.
    buffers: RefCell<Vec<Tensor>>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            buffer_names: Vec::new(),
            buffers: RefCell::new(Vec::new()),
        }
    }

    fn assert_fresh_name(&self, name: &str) {
        assert!(
            !self.names.iter().any(|n| n == name)
                && !self.buffer_names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        self.assert_fresh_name(name);
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn register_buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        self.assert_fresh_name(name);
        self.buffer_names.push(name.to_string());
        self.buffers.borrow_mut().push(value);
        BufferId(self.buffer_names.len() - 1)
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Parameter names in id order (buffers excluded).
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Parameter by position in id order; panics when out of range.
    pub fn param_at(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    /// Mutable parameter by position in id order, for in-place updates
    /// such as finite-difference probes.
    pub fn param_mut_at(&mut self, index: usize) -> &mut Tensor {
        &mut self.values[index]
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.values.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn buffer(&self, id: BufferId) -> Tensor {
        self.buffers.borrow()[id.0].clone()
    }

    pub fn set_buffer(&self, id: BufferId, value: Tensor) {
        let mut buffers = self.buffers.borrow_mut();
        assert_eq!(
            buffers[id.0].shape(),
            value.shape(),
            "buffer shape changed on update"
        );
        buffers[id.0] = value;
    }

    /// Total scalar count across parameters (excludes buffers).
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Every named tensor — parameters first, then buffers — in
    /// registration order. This is the checkpoint serialization order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect();
        let buffers = self.buffers.borrow();
        out.extend(self.buffer_names.iter().cloned().zip(buffers.iter().cloned()));
        out
    }

    /// Replace parameters and buffers from named entries. The entry set
    /// must match this store exactly — same names, same shapes — otherwise
    /// a checkpoint error describes every offending tensor.
    pub fn load_named_tensors(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        use std::collections::BTreeMap;
        let mut by_name: BTreeMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if by_name.len() != entries.len() {
            return Err(FelError::Checkpoint("duplicate tensor names in checkpoint".into()));
        }
        let mut problems = Vec::new();
        let mut staged_params = Vec::with_capacity(self.values.len());
        for (name, current) in self.names.iter().zip(&self.values) {
            match by_name.remove(name.as_str()) {
                Some(t) if t.shape() == current.shape() => staged_params.push(t.clone()),
                Some(t) => problems.push(format!(
                    "{name}: shape {:?} in checkpoint vs {:?} in model",
                    t.shape(),
                    current.shape()
                )),
                None => problems.push(format!("{name}: missing from checkpoint")),
            }
        }
        let mut staged_buffers = Vec::with_capacity(self.buffer_names.len());
        {
            let buffers = self.buffers.borrow();
            for (name, current) in self.buffer_names.iter().zip(buffers.iter()) {
                match by_name.remove(name.as_str()) {
                    Some(t) if t.shape() == current.shape() => staged_buffers.push(t.clone()),
                    Some(t) => problems.push(format!(
                        "{name}: shape {:?} in checkpoint vs {:?} in model",
                        t.shape(),
                        current.shape()
                    )),
                    None => problems.push(format!("{name}: missing from checkpoint")),
                }
            }
        }
        for (name, _) in by_name {
            problems.push(format!("{name}: not a model tensor"));
        }
        if !problems.is_empty() {
            return Err(FelError::Checkpoint(format!(
                "incompatible checkpoint: {}",
                problems.join("; ")
            )));
        }
        self.values = staged_params;
        *self.buffers.borrow_mut() = staged_buffers;
        Ok(())
    }
}

/// One forward pass: a fresh tape, cached parameter leaves, mode, RNG.
pub struct Session<'a> {
    tape: Tape,
    store: &'a ParamStore,
    cache: RefCell<Vec<Option<Var>>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, train: bool, rng: ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            cache: RefCell::new(vec![None; store.n_params()]),
            train,
            rng: RefCell::new(rng),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn rng_mut(&self) -> RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    /// Tape leaf for a parameter, minted once per session.
    pub fn param(&self, id: ParamId) -> Var {
        let mut cache = self.cache.borrow_mut();
        if cache[id.index()].is_none() {
            cache[id.index()] = Some(self.tape.leaf(self.store.param(id).clone()));
        }
        cache[id.index()].clone().unwrap()
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Adjoints arranged by parameter index; `None` for parameters the
    /// loss never touched this session.
    pub fn grads_by_param(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        let cache = self.cache.borrow();
        cache
            .iter()
            .map(|slot| slot.as_ref().and_then(|v| grads.wrt(v).cloned()))
            .collect()
    }
}

/// Glorot-normal initialization: std = sqrt(2 / (fan_in + fan_out)).
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::randn(&[rows, cols], std, rng)
}

/// Fully connected layer `y = x W + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), glorot(in_dim, out_dim, rng));
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        x.matmul(&s.param(self.w)).add_row(&s.param(self.b))
    }
}

/// Per-token layer normalization with learned gain and bias.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.register(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        x.layer_norm(&s.param(self.gamma), &s.param(self.beta), self.eps)
    }
}

/// Batch normalization over the batch dimension with running statistics
/// for evaluation mode. Normalization uses biased variance; the running
/// variance tracks the unbiased estimate (the usual convention).
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: BufferId,
    pub run_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.register(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        let run_mean = store.register_buffer(&format!("{name}.run_mean"), Tensor::zeros(&[dim]));
        let run_var = store.register_buffer(&format!("{name}.run_var"), Tensor::full(&[dim], 1.0));
        Self { gamma, beta, run_mean, run_var, eps: 1e-5, momentum: 0.1 }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        if s.is_train() {
            // Update running stats from the batch before recording the op.
            let (mu, var) = x.with_value(|t| {
                let (n, _) = t.dims2();
                let (mu, mut var) = column_mean_var(t);
                if n > 1 {
                    let unbias = n as f64 / (n - 1) as f64;
                    for v in &mut var {
                        *v *= unbias;
                    }
                }
                (mu, var)
            });
            let store = s.store();
            let m = self.momentum;
            let mut rm = store.buffer(self.run_mean);
            for (r, b) in rm.data_mut().iter_mut().zip(&mu) {
                *r = (1.0 - m) * *r + m * b;
            }
            store.set_buffer(self.run_mean, rm);
            let mut rv = store.buffer(self.run_var);
            for (r, b) in rv.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - m) * *r + m * b;
            }
            store.set_buffer(self.run_var, rv);
            x.batch_norm(&s.param(self.gamma), &s.param(self.beta), self.eps)
        } else {
            // Affine transform by frozen running statistics.
            let rm = s.store().buffer(self.run_mean);
            let rv = s.store().buffer(self.run_var);
            let neg_mean = Tensor::from_vec(rm.data().iter().map(|&v| -v).collect());
            let inv_std = Tensor::from_vec(
                rv.data().iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect(),
            );
            x.add_row(&s.constant(neg_mean))
                .mul_row(&s.constant(inv_std))
                .mul_row(&s.param(self.gamma))
                .add_row(&s.param(self.beta))
        }
    }
}

/// Inverted dropout: active only in training sessions, identity otherwise.
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0,1)");
        Self { p }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        if !s.is_train() || self.p == 0.0 {
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let mask = x.with_value(|t| {
            let mut rng = s.rng_mut();
            let data = (0..t.len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        });
        x.mul(&s.constant(mask))
    }
}

/// Two-layer perceptron with a rectifier between, used inside the
/// transformer blocks.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        self.fc2.forward(s, &self.fc1.forward(s, x).relu())
    }
}
