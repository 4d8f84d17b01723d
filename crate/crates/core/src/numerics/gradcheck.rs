//! Finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates per input, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Hold every kinked op on the piece it took at the base point, so the
    /// stencil differentiates the same linear piece the tape does.
    pub freeze_branches: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_coords: None,
            seed: 0,
            freeze_branches: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Set when the function or its derivative was non-finite somewhere.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tol
    }
}

struct Frozen {
    detached: Vec<Vec<f64>>,
    branches: Option<Vec<Vec<bool>>>,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], frozen: Option<&Frozen>) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = match frozen {
        Some(Frozen { detached, branches: Some(b) }) => Graph::with_frozen(detached.clone(), b.clone()),
        Some(Frozen { detached, branches: None }) => Graph::with_frozen_detached(detached.clone()),
        None => Graph::new(),
    };
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t)).collect();
    let out = f(&mut g, &ids)?;
    Ok((g, ids, out))
}

/// Compare the tape gradient of scalar `f` with a five-point central
/// difference, coordinate by coordinate. Values produced by `stop_gradient`
/// are held at their base-point values during perturbed evaluations, and
/// with `freeze_branches` so are the pieces of kinked ops.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (mut g, ids, out) = eval(&f, inputs, None)?;
    g.backward(out)?;
    let base = g.scalar(out);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        failure: None,
    };
    if !base.is_finite() {
        report.failure = Some("function value is non-finite at the base point".into());
        return Ok(report);
    }
    let frozen = Frozen {
        detached: g.detached_values().to_vec(),
        branches: opts.freeze_branches.then(|| g.branch_masks().to_vec()),
    };
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let h = opts.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = t.data()[j];
            let mut at = |delta: f64| -> Result<f64> {
                work[i].data_mut()[j] = x0 + delta;
                let (g, _, out) = eval(&f, &work, Some(&frozen))?;
                Ok(g.scalar(out))
            };
            let (fp2, fp1, fm1, fm2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            work[i].data_mut()[j] = x0;
            let numeric = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
            let a = analytic[i][j];
            report.checked += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.failure = Some(format!(
                    "non-finite derivative at input {i} coordinate {j}: analytic {a}, numeric {numeric}"
                ));
                report.worst = Some((i, j));
                report.max_rel_error = f64::INFINITY;
                return Ok(report);
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
