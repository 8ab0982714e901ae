//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker is deliberately independent of the tape's backward pass: it
//! rebuilds the graph from scratch for every perturbed coordinate and uses
//! central differences, so agreement between the two is genuine evidence
//! that an operator's adjoint is correct.

use crate::error::{FelError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across all checked coordinates.
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Total coordinates compared.
    pub n_coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Compare analytic gradients against central differences.
///
/// `build` receives a fresh tape plus one leaf per input tensor and must
/// return a scalar loss; it is invoked `2 * n_coords + 1` times. The
/// relative error per coordinate is `|a - f| / max(floor, |a|, |f|)` with
/// `floor` guarding near-zero gradients. Inputs the loss ignores are
/// treated as having zero analytic gradient.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    build: F,
    h: f64,
    grad_floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_coords(inputs, build, h, grad_floor, &coords)
}

/// Like [`check_gradients`], but compares at most `per_input` randomly
/// chosen coordinates per input tensor. Makes finite differences feasible
/// on models with tens of thousands of parameters; coverage is sampled
/// rather than exhaustive.
pub fn check_gradients_sampled<F, R>(
    inputs: &[Tensor],
    build: F,
    h: f64,
    grad_floor: f64,
    per_input: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Var,
    R: rand::Rng,
{
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= per_input {
                (0..t.len()).collect()
            } else {
                // Sample without replacement via a partial shuffle.
                let mut all: Vec<usize> = (0..t.len()).collect();
                for i in 0..per_input {
                    let j = rng.random_range(i..all.len());
                    all.swap(i, j);
                }
                all.truncate(per_input);
                all
            }
        })
        .collect();
    check_coords(inputs, build, h, grad_floor, &coords)
}

fn check_coords<F>(
    inputs: &[Tensor],
    build: F,
    h: f64,
    grad_floor: f64,
    coords: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    if !(h > 0.0) || !(grad_floor > 0.0) {
        return Err(FelError::InvalidArgument(
            "gradcheck step and floor must be positive".into(),
        ));
    }

    // One analytic pass at the base point.
    let grads = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&tape, &vars);
        collect_grads(&loss, &vars)
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, n_coords: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for &c in &coords[ii] {
            let orig = input.data()[c];
            work[ii].data_mut()[c] = orig + h;
            let fp = loss_only(&work, &build);
            work[ii].data_mut()[c] = orig - h;
            let fm = loss_only(&work, &build);
            work[ii].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[ii].as_ref().map_or(0.0, |g| g.data()[c]);
            let denom = grad_floor.max(analytic.abs()).max(numeric.abs());
            let rel = (analytic - numeric).abs() / denom;
            report.n_coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ii, c, analytic, numeric));
            }
        }
    }
    Ok(report)
}

fn loss_only<F>(tensors: &[Tensor], build: &F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    build(&tape, &vars).value().item()
}

fn collect_grads(loss: &Var, vars: &[Var]) -> Vec<Option<Tensor>> {
    match loss.backward() {
        Ok(grads) => vars.iter().map(|v| grads.wrt(v).cloned()).collect(),
        // A loss that ignores every input has no gradients anywhere.
        Err(_) => vars.iter().map(|_| None).collect(),
    }
}
