//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The engine is eager: every [`Var`] operation computes its value
//! immediately and records one node on the shared tape. [`Var::backward`]
//! walks the tape once in reverse id order, accumulating adjoints into
//! every leaf that requires gradients. Fused nodes (row softmax, layer and
//! batch norm, block attention, the confidence-weighted sum) keep tapes
//! short: one training step over a whole minibatch records on the order of
//! a hundred nodes regardless of batch size, because per-window attention
//! is stacked into a single block-diagonal node.
//!
//! Shape agreement between operands is a programmer contract and panics on
//! violation; fallible validation happens at the public entry points of
//! the crate, not here. Values are not checked for finiteness — training
//! loops watch the loss instead.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{FelError, Result};
use crate::tensor::{mm_nn, mm_nt, mm_tn, normalized_entropy, Tensor};

/// Threshold below which the confidence-weighted sum falls back to an
/// unweighted average of its two operands (both weights effectively zero).
pub const FUSE_FALLBACK_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    SumAll(usize),
    SumAxis0(usize),
    SoftmaxRows(usize),
    EntropyRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    BlockAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        block: usize,
        bias: Option<(usize, Rc<Vec<usize>>)>,
    },
    GatherRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    SelectCols {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    ConcatRows(usize, usize),
    BlockMeanRows {
        x: usize,
        block: usize,
    },
    PairwiseDist(usize, usize),
    ConfidenceWeightedSum {
        tg: usize,
        ta: usize,
        cg: usize,
        ca: usize,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Shared recording tape. Cheap to clone; all [`Var`]s made from the same
/// tape share one node list.
#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self.clone(), id }
    }

    /// Trainable input: gradients are retained for it after `backward`.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input: treated as a constant by `backward`.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Leaf adjoints produced by [`Var::backward`]. Intermediate adjoints are
/// dropped as soon as they are consumed to bound peak memory; only leaves
/// remain queryable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is a leaf that the
    /// loss depends on.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

fn same_tape(a: &Var, b: &Var) {
    assert!(
        Rc::ptr_eq(&a.tape.nodes, &b.tape.nodes),
        "vars from different tapes combined"
    );
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Clone of this node's value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Borrow this node's value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (f(&n.value), n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var {
        same_tape(self, other);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            (f(&a.value, &b.value), a.requires_grad || b.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| zip_same_shape(a, b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| zip_same_shape(a, b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| zip_same_shape(a, b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    /// Elementwise square; records a single Mul node with aliased inputs.
    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn neg(&self) -> Var {
        self.unary(|a| map(a, |x| -x), Op::Neg(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary(|a| map(a, f64::exp), Op::Exp(self.id))
    }

    /// Natural log; the caller guarantees positive inputs (clamp first).
    pub fn ln(&self) -> Var {
        self.unary(|a| map(a, f64::ln), Op::Ln(self.id))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(|a| map(a, f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn relu(&self) -> Var {
        self.unary(|a| map(a, |x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn clamp_min(&self, c: f64) -> Var {
        self.unary(|a| map(a, |x| x.max(c)), Op::ClampMin(self.id, c))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(|a| map(a, |x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(|a| map(a, |x| x + c), Op::AddScalar(self.id))
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        self.binary(
            other,
            |a, b| {
                let (m, ka) = a.dims2();
                let (kb, n) = b.dims2();
                assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
                Tensor::new(vec![m, n], mm_nn(a.data(), b.data(), m, ka, n)).unwrap()
            },
            Op::Matmul(self.id, other.id),
        )
    }

    /// Broadcast-add a rank-1 row vector to every row of a matrix.
    pub fn add_row(&self, row: &Var) -> Var {
        self.binary(
            other_row_check(row),
            |a, b| {
                let (n, d) = a.dims2();
                assert_eq!(b.shape(), [d], "add_row width");
                let mut out = a.data().to_vec();
                for i in 0..n {
                    for j in 0..d {
                        out[i * d + j] += b.data()[j];
                    }
                }
                Tensor::new(vec![n, d], out).unwrap()
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Broadcast-multiply every row of a matrix by a rank-1 row vector.
    pub fn mul_row(&self, row: &Var) -> Var {
        self.binary(
            other_row_check(row),
            |a, b| {
                let (n, d) = a.dims2();
                assert_eq!(b.shape(), [d], "mul_row width");
                let mut out = a.data().to_vec();
                for i in 0..n {
                    for j in 0..d {
                        out[i * d + j] *= b.data()[j];
                    }
                }
                Tensor::new(vec![n, d], out).unwrap()
            },
            Op::MulRow(self.id, row.id),
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&self) -> Var {
        self.unary(|a| Tensor::scalar(a.data().iter().sum()), Op::SumAll(self.id))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean_all(&self) -> Var {
        let n = self.with_value(|t| t.len());
        assert!(n > 0, "mean of empty tensor");
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Column sums of a matrix: `[n,d] -> [d]`.
    pub fn sum_axis0(&self) -> Var {
        self.unary(
            |a| {
                let (n, d) = a.dims2();
                let mut out = vec![0.0; d];
                for i in 0..n {
                    let row = &a.data()[i * d..(i + 1) * d];
                    for (acc, x) in out.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                Tensor::from_vec(out)
            },
            Op::SumAxis0(self.id),
        )
    }

    /// Row-wise softmax with max-shift for stability.
    pub fn softmax_rows(&self) -> Var {
        self.unary(
            |a| {
                let (n, d) = a.dims2();
                let mut out = a.data().to_vec();
                for i in 0..n {
                    softmax_in_place(&mut out[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![n, d], out).unwrap()
            },
            Op::SoftmaxRows(self.id),
        )
    }

    /// Row-wise normalized entropy: `[n,d] -> [n]`, entries in [0,1].
    ///
    /// Matches [`normalized_entropy`] exactly, including the bit-equality
    /// branch that returns 1.0 for uniform rows. The backward pass uses the
    /// smooth ambient gradient `-(ln p + 1)/ln d` (zero where `p <= 0`);
    /// the clamped/uniform branches only bind on a measure-zero set.
    pub fn entropy_rows(&self) -> Var {
        self.unary(
            |a| {
                let (n, _) = a.dims2();
                let out = (0..n).map(|i| normalized_entropy(a.row(i))).collect();
                Tensor::from_vec(out)
            },
            Op::EntropyRows(self.id),
        )
    }

    /// Per-row layer normalization with learned per-column scale and shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        same_tape(self, gamma);
        same_tape(self, beta);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gamma.id].value;
            let b = &nodes[beta.id].value;
            let (n, d) = x.dims2();
            assert_eq!(g.shape(), [d], "layer_norm gamma width");
            assert_eq!(b.shape(), [d], "layer_norm beta width");
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let row = x.row(i);
                let (mu, var) = mean_var(row);
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[i * d + j] = (row[j] - mu) * inv * g.data()[j] + b.data()[j];
                }
            }
            let rg = nodes[self.id].requires_grad
                || nodes[gamma.id].requires_grad
                || nodes[beta.id].requires_grad;
            (Tensor::new(vec![n, d], out).unwrap(), rg)
        };
        self.tape.push(value, Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps }, rg)
    }

    /// Per-column (training-mode) batch normalization with biased variance.
    /// Evaluation mode is expressed with plain affine ops on running stats,
    /// so no eval variant exists here.
    pub fn batch_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        same_tape(self, gamma);
        same_tape(self, beta);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gamma.id].value;
            let b = &nodes[beta.id].value;
            let (n, d) = x.dims2();
            assert!(n > 0, "batch_norm on empty batch");
            assert_eq!(g.shape(), [d], "batch_norm gamma width");
            assert_eq!(b.shape(), [d], "batch_norm beta width");
            let (mu, var) = column_mean_var(x);
            let mut out = vec![0.0; n * d];
            for j in 0..d {
                let inv = 1.0 / (var[j] + eps).sqrt();
                for i in 0..n {
                    out[i * d + j] = (x.data()[i * d + j] - mu[j]) * inv * g.data()[j] + b.data()[j];
                }
            }
            let rg = nodes[self.id].requires_grad
                || nodes[gamma.id].requires_grad
                || nodes[beta.id].requires_grad;
            (Tensor::new(vec![n, d], out).unwrap(), rg)
        };
        self.tape.push(value, Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps }, rg)
    }

    /// Block-diagonal multi-head scaled dot-product attention.
    ///
    /// `self` supplies queries; `k` and `v` supply keys and values (pass the
    /// same var three times for self-attention). All three are `[R, D]` with
    /// `R` a multiple of `block`; attention runs independently within each
    /// consecutive `block`-row group, per head. `bias` is an optional
    /// per-head additive logit table `[heads, n_offsets]` together with a
    /// `block*block` map from (query, key) position pairs to table columns,
    /// shared across blocks — the windowed relative-position term.
    pub fn block_attention(
        &self,
        k: &Var,
        v: &Var,
        heads: usize,
        block: usize,
        bias: Option<(&Var, Rc<Vec<usize>>)>,
    ) -> Var {
        same_tape(self, k);
        same_tape(self, v);
        if let Some((b, _)) = bias {
            same_tape(self, b);
        }
        let bias_op = bias.as_ref().map(|(b, idx)| (b.id, Rc::clone(idx)));
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let q = &nodes[self.id].value;
            let kv = &nodes[k.id].value;
            let vv = &nodes[v.id].value;
            let bias_val = bias.as_ref().map(|(b, idx)| (&nodes[b.id].value, idx.as_slice()));
            let out = block_attention_forward(q, kv, vv, heads, block, bias_val);
            let mut rg = nodes[self.id].requires_grad
                || nodes[k.id].requires_grad
                || nodes[v.id].requires_grad;
            if let Some((b, _)) = bias {
                rg = rg || nodes[b.id].requires_grad;
            }
            (out, rg)
        };
        self.tape.push(
            value,
            Op::BlockAttention { q: self.id, k: k.id, v: v.id, heads, block, bias: bias_op },
            rg,
        )
    }

    /// Row gather: `out[r] = x[idx[r]]`. Duplicate indices are allowed; the
    /// backward pass scatter-adds.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Var {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (n, d) = x.dims2();
            let mut out = Vec::with_capacity(idx.len() * d);
            for &r in idx.iter() {
                assert!(r < n, "gather_rows index {r} out of range {n}");
                out.extend_from_slice(x.row(r));
            }
            Tensor::new(vec![idx.len(), d], out).unwrap()
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::GatherRows { x: self.id, idx }, rg)
    }

    /// Per-row column pick: `out[i] = x[i, idx[i]]`, rank-1 result.
    pub fn select_cols(&self, idx: Rc<Vec<usize>>) -> Var {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (n, d) = x.dims2();
            assert_eq!(idx.len(), n, "select_cols needs one index per row");
            let out = idx
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    assert!(j < d, "select_cols index {j} out of range {d}");
                    x.data()[i * d + j]
                })
                .collect();
            Tensor::from_vec(out)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::SelectCols { x: self.id, idx }, rg)
    }

    /// Stack two matrices with equal widths, `self` on top.
    pub fn concat_rows(&self, other: &Var) -> Var {
        self.binary(
            other,
            |a, b| {
                let (n1, d1) = a.dims2();
                let (n2, d2) = b.dims2();
                assert_eq!(d1, d2, "concat_rows width {d1} vs {d2}");
                let mut out = Vec::with_capacity((n1 + n2) * d1);
                out.extend_from_slice(a.data());
                out.extend_from_slice(b.data());
                Tensor::new(vec![n1 + n2, d1], out).unwrap()
            },
            Op::ConcatRows(self.id, other.id),
        )
    }

    /// Mean over each consecutive group of `block` rows:
    /// `[nb*block, d] -> [nb, d]`.
    pub fn block_mean_rows(&self, block: usize) -> Var {
        assert!(block > 0, "block_mean_rows block size 0");
        self.unary(
            |a| {
                let (n, d) = a.dims2();
                assert_eq!(n % block, 0, "rows {n} not a multiple of block {block}");
                let nb = n / block;
                let mut out = vec![0.0; nb * d];
                for i in 0..n {
                    for j in 0..d {
                        out[(i / block) * d + j] += a.data()[i * d + j];
                    }
                }
                for o in &mut out {
                    *o /= block as f64;
                }
                Tensor::new(vec![nb, d], out).unwrap()
            },
            Op::BlockMeanRows { x: self.id, block },
        )
    }

    /// Euclidean distance matrix between row sets: `[m,d] x [n,d] -> [m,n]`.
    /// Coincident rows get distance 0 and contribute zero gradient there.
    pub fn pairwise_dist(&self, other: &Var) -> Var {
        self.binary(
            other,
            |a, b| {
                let (m, da) = a.dims2();
                let (n, db) = b.dims2();
                assert_eq!(da, db, "pairwise_dist width {da} vs {db}");
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let ar = a.row(i);
                    for j in 0..n {
                        let br = b.row(j);
                        let mut s = 0.0;
                        for p in 0..da {
                            let diff = ar[p] - br[p];
                            s += diff * diff;
                        }
                        out[i * n + j] = s.sqrt();
                    }
                }
                Tensor::new(vec![m, n], out).unwrap()
            },
            Op::PairwiseDist(self.id, other.id),
        )
    }

    /// Row-wise confidence-weighted average of two distributions.
    ///
    /// `out_i = (cg_i*tg_i + ca_i*ta_i) / (cg_i + ca_i)`, falling back to
    /// the unweighted mean `(tg_i + ta_i)/2` when the weight sum drops
    /// below [`FUSE_FALLBACK_EPS`]; fallback rows pass no gradient into the
    /// weights. `tg`, `ta` are `[n,d]`; `cg`, `ca` are rank-1 `[n]`.
    pub fn confidence_weighted_sum(&self, ta: &Var, cg: &Var, ca: &Var) -> Var {
        same_tape(self, ta);
        same_tape(self, cg);
        same_tape(self, ca);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let tg_v = &nodes[self.id].value;
            let ta_v = &nodes[ta.id].value;
            let cg_v = &nodes[cg.id].value;
            let ca_v = &nodes[ca.id].value;
            let (n, d) = tg_v.dims2();
            assert_eq!(ta_v.shape(), [n, d], "confidence sum: ta shape");
            assert_eq!(cg_v.shape(), [n], "confidence sum: cg shape");
            assert_eq!(ca_v.shape(), [n], "confidence sum: ca shape");
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let (g, a) = (cg_v.data()[i], ca_v.data()[i]);
                let s = g + a;
                for j in 0..d {
                    out[i * d + j] = if s < FUSE_FALLBACK_EPS {
                        0.5 * (tg_v.data()[i * d + j] + ta_v.data()[i * d + j])
                    } else {
                        (g * tg_v.data()[i * d + j] + a * ta_v.data()[i * d + j]) / s
                    };
                }
            }
            let rg = nodes[self.id].requires_grad
                || nodes[ta.id].requires_grad
                || nodes[cg.id].requires_grad
                || nodes[ca.id].requires_grad;
            (Tensor::new(vec![n, d], out).unwrap(), rg)
        };
        self.tape.push(
            value,
            Op::ConfidenceWeightedSum { tg: self.id, ta: ta.id, cg: cg.id, ca: ca.id },
            rg,
        )
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Var {
        self.unary(
            |a| a.reshaped(shape.clone()).expect("reshape element count"),
            Op::Reshape(self.id),
        )
    }

    /// Reverse pass from a scalar loss. Returns adjoints for every leaf the
    /// loss depends on. Errors if the value is not a scalar or if nothing
    /// on the path requires gradients.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let me = &nodes[self.id];
        if !me.value.is_scalar() {
            return Err(FelError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                me.value.shape()
            )));
        }
        if !me.requires_grad {
            return Err(FelError::Contract(
                "loss does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(Tensor::scalar(1.0));
        for id in (0..=self.id).rev() {
            if !nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                continue; // keep leaf adjoints for the caller
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// `add_row`/`mul_row` take the row operand by reference like every other
/// binary op; this identity helper only exists to keep the call sites
/// uniform inside `binary`.
fn other_row_check(row: &Var) -> &Var {
    row
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip_same_shape(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

/// Per-column mean and biased variance of a matrix.
pub(crate) fn column_mean_var(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.dims2();
    let mut mu = vec![0.0; d];
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        for ((acc, m), v) in var.iter_mut().zip(&mu).zip(row) {
            let c = v - m;
            *acc += c * c;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    (mu, var)
}

fn block_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    block: usize,
    bias: Option<(&Tensor, &[usize])>,
) -> Tensor {
    let (r, d) = q.dims2();
    assert_eq!(k.shape(), [r, d], "block_attention k shape");
    assert_eq!(v.shape(), [r, d], "block_attention v shape");
    assert!(block > 0 && r % block == 0, "rows {r} not a multiple of block {block}");
    assert!(heads > 0 && d % heads == 0, "width {d} not a multiple of heads {heads}");
    let nb = r / block;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if let Some((bt, idx)) = bias {
        let (bh, _) = bt.dims2();
        assert_eq!(bh, heads, "bias table head count");
        assert_eq!(idx.len(), block * block, "bias index map length");
    }
    let mut out = vec![0.0; r * d];
    let mut qb = vec![0.0; block * dh];
    let mut kb = vec![0.0; block * dh];
    let mut vb = vec![0.0; block * dh];
    for b in 0..nb {
        for a in 0..heads {
            gather_head(q, b, a, block, dh, &mut qb);
            gather_head(k, b, a, block, dh, &mut kb);
            gather_head(v, b, a, block, dh, &mut vb);
            let mut s = mm_nt(&qb, &kb, block, dh, block);
            for val in &mut s {
                *val *= scale;
            }
            if let Some((bt, idx)) = bias {
                let (_, noff) = bt.dims2();
                for (ij, &o) in idx.iter().enumerate() {
                    debug_assert!(o < noff, "bias offset out of range");
                    s[ij] += bt.data()[a * noff + o];
                }
            }
            for i in 0..block {
                softmax_in_place(&mut s[i * block..(i + 1) * block]);
            }
            let ob = mm_nn(&s, &vb, block, block, dh);
            scatter_head(&ob, b, a, block, dh, d, &mut out);
        }
    }
    Tensor::new(vec![r, d], out).unwrap()
}

/// Copy the `block x dh` slab for block `b`, head `a` out of `[R, D]`.
fn gather_head(x: &Tensor, b: usize, a: usize, block: usize, dh: usize, out: &mut [f64]) {
    let d = x.shape()[1];
    for i in 0..block {
        let src = (b * block + i) * d + a * dh;
        out[i * dh..(i + 1) * dh].copy_from_slice(&x.data()[src..src + dh]);
    }
}

fn scatter_head(slab: &[f64], b: usize, a: usize, block: usize, dh: usize, d: usize, out: &mut [f64]) {
    for i in 0..block {
        let dst = (b * block + i) * d + a * dh;
        out[dst..dst + dh].copy_from_slice(&slab[i * dh..(i + 1) * dh]);
    }
}

/// Scatter-add a `block x dh` slab gradient into a `[R, D]` gradient.
fn scatter_add_head(slab: &[f64], b: usize, a: usize, block: usize, dh: usize, d: usize, out: &mut [f64]) {
    for i in 0..block {
        let dst = (b * block + i) * d + a * dh;
        for p in 0..dh {
            out[dst + p] += slab[i * dh + p];
        }
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    debug_assert_eq!(
        nodes[id].value.shape(),
        delta.shape(),
        "gradient shape mismatch on node {id}"
    );
    match &mut grads[id] {
        Some(g) => {
            for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                *gv += dv;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => unreachable!("leaves are not backpropagated"),
        Op::Add(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, map(g, |x| -x));
        }
        Op::Mul(a, b) => {
            acc(nodes, grads, *a, zip_same_shape(g, val(*b), |gg, bb| gg * bb));
            acc(nodes, grads, *b, zip_same_shape(g, val(*a), |gg, aa| gg * aa));
        }
        Op::Neg(a) => acc(nodes, grads, *a, map(g, |x| -x)),
        Op::Exp(a) => {
            // d exp(x) = exp(x) dx, with exp(x) already stored as the output.
            acc(nodes, grads, *a, zip_same_shape(g, val(id), |gg, y| gg * y));
        }
        Op::Ln(a) => {
            acc(nodes, grads, *a, zip_same_shape(g, val(*a), |gg, x| gg / x));
        }
        Op::Sqrt(a) => {
            acc(nodes, grads, *a, zip_same_shape(g, val(id), |gg, y| gg / (2.0 * y)));
        }
        Op::Relu(a) => {
            acc(nodes, grads, *a, zip_same_shape(g, val(*a), |gg, x| if x > 0.0 { gg } else { 0.0 }));
        }
        Op::ClampMin(a, c) => {
            let c = *c;
            acc(nodes, grads, *a, zip_same_shape(g, val(*a), |gg, x| if x > c { gg } else { 0.0 }));
        }
        Op::Scale(a, c) => {
            let c = *c;
            acc(nodes, grads, *a, map(g, |x| x * c));
        }
        Op::AddScalar(a) => acc(nodes, grads, *a, g.clone()),
        Op::Matmul(a, b) => {
            let (m, k) = val(*a).dims2();
            let (_, n) = val(*b).dims2();
            // dA = G B^T, dB = A^T G
            let da = mm_nt(g.data(), val(*b).data(), m, n, k);
            let db = mm_tn(val(*a).data(), g.data(), m, k, n);
            acc(nodes, grads, *a, Tensor::new(vec![m, k], da).unwrap());
            acc(nodes, grads, *b, Tensor::new(vec![k, n], db).unwrap());
        }
        Op::AddRow(a, b) => {
            let (n, d) = val(*a).dims2();
            acc(nodes, grads, *a, g.clone());
            let mut db = vec![0.0; d];
            for i in 0..n {
                let row = &g.data()[i * d..(i + 1) * d];
                for (acc_j, x) in db.iter_mut().zip(row) {
                    *acc_j += x;
                }
            }
            acc(nodes, grads, *b, Tensor::from_vec(db));
        }
        Op::MulRow(a, b) => {
            let (n, d) = val(*a).dims2();
            let row = val(*b).data();
            let mut da = vec![0.0; n * d];
            let mut db = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    let gv = g.data()[i * d + j];
                    da[i * d + j] = gv * row[j];
                    db[j] += gv * val(*a).data()[i * d + j];
                }
            }
            acc(nodes, grads, *a, Tensor::new(vec![n, d], da).unwrap());
            acc(nodes, grads, *b, Tensor::from_vec(db));
        }
        Op::SumAll(a) => {
            let gv = g.item();
            acc(nodes, grads, *a, Tensor::full(val(*a).shape(), gv));
        }
        Op::SumAxis0(a) => {
            let (n, d) = val(*a).dims2();
            let mut da = vec![0.0; n * d];
            for i in 0..n {
                da[i * d..(i + 1) * d].copy_from_slice(g.data());
            }
            acc(nodes, grads, *a, Tensor::new(vec![n, d], da).unwrap());
        }
        Op::SoftmaxRows(a) => {
            let y = val(id);
            let (n, d) = y.dims2();
            let mut da = vec![0.0; n * d];
            for i in 0..n {
                let yr = y.row(i);
                let gr = &g.data()[i * d..(i + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..d {
                    da[i * d + j] = yr[j] * (gr[j] - dot);
                }
            }
            acc(nodes, grads, *a, Tensor::new(vec![n, d], da).unwrap());
        }
        Op::EntropyRows(a) => {
            let p = val(*a);
            let (n, d) = p.dims2();
            let lnn = (d as f64).ln();
            let mut da = vec![0.0; n * d];
            for i in 0..n {
                let gi = g.data()[i];
                for j in 0..d {
                    let pv = p.data()[i * d + j];
                    if pv > 0.0 {
                        da[i * d + j] = -gi * (pv.ln() + 1.0) / lnn;
                    }
                }
            }
            acc(nodes, grads, *a, Tensor::new(vec![n, d], da).unwrap());
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = val(*x);
            let gam = val(*gamma).data();
            let (n, d) = xv.dims2();
            let mut dx = vec![0.0; n * d];
            let mut dgam = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for i in 0..n {
                let row = xv.row(i);
                let (mu, var) = mean_var(row);
                let inv = 1.0 / (var + eps).sqrt();
                let gr = &g.data()[i * d..(i + 1) * d];
                // dxhat, plus its row sums needed by the fused formula
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                let mut xh = vec![0.0; d];
                let mut dxh = vec![0.0; d];
                for j in 0..d {
                    xh[j] = (row[j] - mu) * inv;
                    dxh[j] = gr[j] * gam[j];
                    sum_dxh += dxh[j];
                    sum_dxh_xh += dxh[j] * xh[j];
                    dgam[j] += gr[j] * xh[j];
                    dbeta[j] += gr[j];
                }
                let dn = d as f64;
                for j in 0..d {
                    dx[i * d + j] = inv / dn * (dn * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
                }
            }
            acc(nodes, grads, *x, Tensor::new(vec![n, d], dx).unwrap());
            acc(nodes, grads, *gamma, Tensor::from_vec(dgam));
            acc(nodes, grads, *beta, Tensor::from_vec(dbeta));
        }
        Op::BatchNorm { x, gamma, beta, eps } => {
            let xv = val(*x);
            let gam = val(*gamma).data();
            let (n, d) = xv.dims2();
            let (mu, var) = column_mean_var(xv);
            let mut dx = vec![0.0; n * d];
            let mut dgam = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let nf = n as f64;
            for j in 0..d {
                let inv = 1.0 / (var[j] + eps).sqrt();
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for i in 0..n {
                    let xh = (xv.data()[i * d + j] - mu[j]) * inv;
                    let gv = g.data()[i * d + j];
                    let dxh = gv * gam[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                    dgam[j] += gv * xh;
                    dbeta[j] += gv;
                }
                for i in 0..n {
                    let xh = (xv.data()[i * d + j] - mu[j]) * inv;
                    let dxh = g.data()[i * d + j] * gam[j];
                    dx[i * d + j] = inv / nf * (nf * dxh - sum_dxh - xh * sum_dxh_xh);
                }
            }
            acc(nodes, grads, *x, Tensor::new(vec![n, d], dx).unwrap());
            acc(nodes, grads, *gamma, Tensor::from_vec(dgam));
            acc(nodes, grads, *beta, Tensor::from_vec(dbeta));
        }
        Op::BlockAttention { q, k, v, heads, block, bias } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (r, d) = qv.dims2();
            let nb = r / block;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let bias_val = bias.as_ref().map(|(bid, idx)| (val(*bid), idx.as_slice()));
            let mut dq = vec![0.0; r * d];
            let mut dk = vec![0.0; r * d];
            let mut dv = vec![0.0; r * d];
            let mut dbias = bias_val.as_ref().map(|(bt, _)| vec![0.0; bt.len()]);
            let mut qb = vec![0.0; block * dh];
            let mut kb = vec![0.0; block * dh];
            let mut vb = vec![0.0; block * dh];
            let mut gb = vec![0.0; block * dh];
            for b in 0..nb {
                for a in 0..*heads {
                    gather_head(qv, b, a, *block, dh, &mut qb);
                    gather_head(kv, b, a, *block, dh, &mut kb);
                    gather_head(vv, b, a, *block, dh, &mut vb);
                    gather_head(g, b, a, *block, dh, &mut gb);
                    // Recompute probabilities for this block/head.
                    let mut p = mm_nt(&qb, &kb, *block, dh, *block);
                    for val in &mut p {
                        *val *= scale;
                    }
                    if let Some((bt, idx)) = &bias_val {
                        let noff = bt.shape()[1];
                        for (ij, &o) in idx.iter().enumerate() {
                            p[ij] += bt.data()[a * noff + o];
                        }
                    }
                    for i in 0..*block {
                        softmax_in_place(&mut p[i * *block..(i + 1) * *block]);
                    }
                    // dP = G V^T, then softmax backward to dS.
                    let dp = mm_nt(&gb, &vb, *block, dh, *block);
                    let mut ds = vec![0.0; *block * *block];
                    for i in 0..*block {
                        let pr = &p[i * *block..(i + 1) * *block];
                        let dpr = &dp[i * *block..(i + 1) * *block];
                        let dot: f64 = pr.iter().zip(dpr).map(|(&pv, &dv)| pv * dv).sum();
                        for j in 0..*block {
                            ds[i * *block + j] = pr[j] * (dpr[j] - dot);
                        }
                    }
                    // dQ += dS K * scale ; dK += dS^T Q * scale ; dV += P^T G
                    let mut dqb = mm_nn(&ds, &kb, *block, *block, dh);
                    for v in &mut dqb {
                        *v *= scale;
                    }
                    let mut dkb = mm_tn(&ds, &qb, *block, *block, dh);
                    for v in &mut dkb {
                        *v *= scale;
                    }
                    let dvb = mm_tn(&p, &gb, *block, *block, dh);
                    scatter_add_head(&dqb, b, a, *block, dh, d, &mut dq);
                    scatter_add_head(&dkb, b, a, *block, dh, d, &mut dk);
                    scatter_add_head(&dvb, b, a, *block, dh, d, &mut dv);
                    if let (Some(db), Some((bt, idx))) = (&mut dbias, &bias_val) {
                        let noff = bt.shape()[1];
                        for (ij, &o) in idx.iter().enumerate() {
                            db[a * noff + o] += ds[ij];
                        }
                    }
                }
            }
            acc(nodes, grads, *q, Tensor::new(vec![r, d], dq).unwrap());
            acc(nodes, grads, *k, Tensor::new(vec![r, d], dk).unwrap());
            acc(nodes, grads, *v, Tensor::new(vec![r, d], dv).unwrap());
            if let (Some(db), Some((bid, _))) = (dbias, bias.as_ref()) {
                let shape = val(*bid).shape().to_vec();
                acc(nodes, grads, *bid, Tensor::new(shape, db).unwrap());
            }
        }
        Op::GatherRows { x, idx } => {
            let (n, d) = val(*x).dims2();
            let mut dx = vec![0.0; n * d];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..d {
                    dx[src * d + j] += g.data()[r * d + j];
                }
            }
            acc(nodes, grads, *x, Tensor::new(vec![n, d], dx).unwrap());
        }
        Op::SelectCols { x, idx } => {
            let (n, d) = val(*x).dims2();
            let mut dx = vec![0.0; n * d];
            for (i, &j) in idx.iter().enumerate() {
                dx[i * d + j] += g.data()[i];
            }
            acc(nodes, grads, *x, Tensor::new(vec![n, d], dx).unwrap());
        }
        Op::ConcatRows(a, b) => {
            let (n1, d) = val(*a).dims2();
            let (n2, _) = val(*b).dims2();
            let da = Tensor::new(vec![n1, d], g.data()[..n1 * d].to_vec()).unwrap();
            let db = Tensor::new(vec![n2, d], g.data()[n1 * d..].to_vec()).unwrap();
            acc(nodes, grads, *a, da);
            acc(nodes, grads, *b, db);
        }
        Op::BlockMeanRows { x, block } => {
            let (n, d) = val(*x).dims2();
            let inv = 1.0 / (*block as f64);
            let mut dx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    dx[i * d + j] = g.data()[(i / block) * d + j] * inv;
                }
            }
            acc(nodes, grads, *x, Tensor::new(vec![n, d], dx).unwrap());
        }
        Op::PairwiseDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, dd) = av.dims2();
            let (n, _) = bv.dims2();
            let dist = val(id);
            let mut da = vec![0.0; m * dd];
            let mut db = vec![0.0; n * dd];
            for i in 0..m {
                for j in 0..n {
                    let dv = dist.data()[i * n + j];
                    if dv <= 0.0 {
                        continue; // coincident rows: subgradient 0
                    }
                    let gv = g.data()[i * n + j] / dv;
                    for p in 0..dd {
                        let diff = av.data()[i * dd + p] - bv.data()[j * dd + p];
                        da[i * dd + p] += gv * diff;
                        db[j * dd + p] -= gv * diff;
                    }
                }
            }
            acc(nodes, grads, *a, Tensor::new(vec![m, dd], da).unwrap());
            acc(nodes, grads, *b, Tensor::new(vec![n, dd], db).unwrap());
        }
        Op::ConfidenceWeightedSum { tg, ta, cg, ca } => {
            let (tgv, tav) = (val(*tg), val(*ta));
            let (cgv, cav) = (val(*cg), val(*ca));
            let out = val(id);
            let (n, d) = tgv.dims2();
            let mut dtg = vec![0.0; n * d];
            let mut dta = vec![0.0; n * d];
            let mut dcg = vec![0.0; n];
            let mut dca = vec![0.0; n];
            for i in 0..n {
                let (cgi, cai) = (cgv.data()[i], cav.data()[i]);
                let s = cgi + cai;
                if s < FUSE_FALLBACK_EPS {
                    for j in 0..d {
                        let gv = g.data()[i * d + j];
                        dtg[i * d + j] = 0.5 * gv;
                        dta[i * d + j] = 0.5 * gv;
                    }
                } else {
                    for j in 0..d {
                        let gv = g.data()[i * d + j];
                        let o = out.data()[i * d + j];
                        dtg[i * d + j] = gv * cgi / s;
                        dta[i * d + j] = gv * cai / s;
                        dcg[i] += gv * (tgv.data()[i * d + j] - o) / s;
                        dca[i] += gv * (tav.data()[i * d + j] - o) / s;
                    }
                }
            }
            acc(nodes, grads, *tg, Tensor::new(vec![n, d], dtg).unwrap());
            acc(nodes, grads, *ta, Tensor::new(vec![n, d], dta).unwrap());
            acc(nodes, grads, *cg, Tensor::from_vec(dcg));
            acc(nodes, grads, *ca, Tensor::from_vec(dca));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            acc(nodes, grads, *a, g.reshaped(shape).unwrap());
        }
    }
}
