//! Permutation-free diarization loss, attractor existence loss and their
//! weighted sum.

use crate::assignment::{exhaustive_min, hungarian};
use crate::autodiff::{Graph, Var, BCE_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Above this many speakers the permutation search switches from
/// enumeration to the Hungarian algorithm.
pub const EXHAUSTIVE_MAX_SPEAKERS: usize = 6;

/// `perm[s]` is the label row matched to prediction row `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationAssignment {
    pub perm: Vec<usize>,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub diar: f64,
    pub exist: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Which parameters the existence loss may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExistenceRouting {
    /// Gradient flows through the attractors into the whole network.
    Full,
    /// Only the existence layer is updated.
    StopGradient,
}

impl std::str::FromStr for ExistenceRouting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ExistenceRouting::Full),
            "stop-gradient" | "stop_gradient" => Ok(ExistenceRouting::StopGradient),
            _ => Err(Error::Config(format!(
                "gradient routing `{s}` is not `full` or `stop-gradient`"
            ))),
        }
    }
}

impl std::fmt::Display for ExistenceRouting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExistenceRouting::Full => "full",
            ExistenceRouting::StopGradient => "stop-gradient",
        })
    }
}

fn bce_term(y: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// `cost[s][r]`: frame-summed BCE of prediction row `s` against label row
/// `r`, both `S x T`.
pub fn pairwise_cost(labels: &Tensor, posteriors: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (s, t) = labels.dims2()?;
    if posteriors.shape() != labels.shape() {
        return Err(Error::dim(
            "pit_loss",
            format!("labels {:?} vs posteriors {:?}", labels.shape(), posteriors.shape()),
        ));
    }
    Ok((0..s)
        .map(|ps| {
            (0..s)
                .map(|lr| {
                    (0..t)
                        .map(|f| bce_term(labels.at(lr, f), posteriors.at(ps, f)))
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Permutation minimising the summed cost. Ties go to the
/// lexicographically smallest permutation on the exhaustive path.
pub fn best_permutation(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    if cost.len() <= EXHAUSTIVE_MAX_SPEAKERS {
        exhaustive_min(cost)
    } else {
        let perm: Vec<usize> = hungarian(cost)
            .into_iter()
            .map(|c| c.expect("square matrix assigns every row"))
            .collect();
        let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        (perm, total)
    }
}

/// Permutation-free loss for `S x T` labels and posteriors:
/// `min_perm sum_t H(y_t^perm, p_t) / (T S)`.
pub fn pit_loss(labels: &Tensor, posteriors: &Tensor) -> Result<(f64, PermutationAssignment)> {
    let (s, t) = labels.dims2()?;
    let cost = pairwise_cost(labels, posteriors)?;
    if s == 0 || t == 0 {
        return Ok((0.0, PermutationAssignment { perm: Vec::new(), loss: 0.0 }));
    }
    let (perm, total) = best_permutation(&cost);
    let loss = total / (s * t) as f64;
    Ok((loss, PermutationAssignment { perm, loss }))
}

/// Graph version for `[T, S]` posteriors `p` and `S x T` labels.
/// Gradient flows through the minimising permutation.
pub fn pit_loss_graph(
    g: &mut Graph,
    p: Var,
    labels: &Tensor,
) -> Result<(Var, PermutationAssignment)> {
    let (s, t) = labels.dims2()?;
    let (pt, ps) = g.value(p).dims2()?;
    if (pt, ps) != (t, s) {
        return Err(Error::dim(
            "pit_loss",
            format!("posteriors [{pt}, {ps}] for labels [{s}, {t}]"),
        ));
    }
    if s == 0 || t == 0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok((zero, PermutationAssignment { perm: Vec::new(), loss: 0.0 }));
    }
    let (_, assignment) = pit_loss(labels, &g.value(p).transpose()?)?;
    // Target laid out like p: frame-major, column s holds label row perm[s].
    let mut target = Tensor::zeros(t, s);
    for (col, &row) in assignment.perm.iter().enumerate() {
        for f in 0..t {
            target.set(f, col, labels.at(row, f));
        }
    }
    let total = g.bce(&target, p)?;
    let loss = g.scale(total, 1.0 / (s * t) as f64);
    Ok((loss, assignment))
}

/// Existence labels `[1, ..., 1, 0]` for `n` probabilities.
pub fn existence_labels(n: usize) -> Tensor {
    let mut l = vec![1.0; n];
    if let Some(last) = l.last_mut() {
        *last = 0.0;
    }
    Tensor::matrix(n, 1, l).expect("n x 1")
}

/// Mean BCE of `S + 1` existence probabilities against `[1, ..., 1, 0]`.
pub fn existence_loss(q: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::Input("existence loss needs at least one probability".into()));
    }
    let n = q.len();
    let total: f64 = q
        .iter()
        .enumerate()
        .map(|(i, &p)| bce_term(if i + 1 < n { 1.0 } else { 0.0 }, p))
        .sum();
    Ok(total / n as f64)
}

/// Graph version for an `[S + 1, 1]` node.
pub fn existence_loss_graph(g: &mut Graph, q: Var) -> Result<Var> {
    let (n, c) = g.value(q).dims2()?;
    if n == 0 || c != 1 {
        return Err(Error::Input(format!("existence probabilities shaped [{n}, {c}]")));
    }
    let total = g.bce(&existence_labels(n), q)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

pub fn total_loss(diar: f64, exist: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("loss weight {alpha} must be non-negative")));
    }
    Ok(LossBreakdown {
        diar,
        exist,
        total: diar + alpha * exist,
        alpha,
    })
}
