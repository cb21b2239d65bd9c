use crate::error::{Error, Result};
use crate::numerics::assignment::{min_cost_assignment, permutations};
use crate::numerics::{bce_logit, bce_prob, Graph, NodeId, Tensor};

/// Largest speaker count searched exhaustively; above it the Hungarian
/// solver is used on the pairwise cost matrix.
pub const EXHAUSTIVE_MAX: usize = 6;

/// Pads `reference` with silent columns up to `k`.
pub fn pad_reference(reference: &Tensor, k: usize) -> Result<Tensor> {
    let (t, r) = (reference.rows(), reference.cols());
    if r > k {
        return Err(Error::Data(format!("reference has {r} speakers, model predicts {k}")));
    }
    let mut out = Tensor::zeros(&[t, k]);
    for i in 0..t {
        out.row_mut(i)[..r].copy_from_slice(reference.row(i));
    }
    Ok(out)
}

fn check(pred: &Tensor, reference: &Tensor) -> Result<(usize, usize)> {
    if pred.ndim() != 2 || reference.ndim() != 2 || pred.rows() != reference.rows() {
        return Err(Error::shape(
            "pit_bce",
            format!("prediction {:?} vs reference {:?}", pred.shape(), reference.shape()),
        ));
    }
    Ok((pred.rows(), pred.cols()))
}

/// `cost[k][j]`: BCE of output `k` against reference column `j`, scaled so
/// that summing one entry per row gives the mean over all `T·K` cells.
pub fn pit_cost_matrix(pred: &Tensor, reference: &Tensor, from_logits: bool) -> Result<Vec<Vec<f64>>> {
    let (t, k) = check(pred, reference)?;
    let reference = pad_reference(reference, k)?;
    let norm = (t * k).max(1) as f64;
    let f = if from_logits { bce_logit } else { bce_prob };
    Ok((0..k)
        .map(|a| {
            (0..k)
                .map(|b| (0..t).map(|i| f(pred.at(i, a), reference.at(i, b))).sum::<f64>() / norm)
                .collect()
        })
        .collect())
}

fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(a, &b)| cost[a][b]).sum()
}

/// Best permutation by trying all `K!` of them. `perm[k]` is the reference
/// column matched to output `k`.
pub fn pit_exhaustive(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(cost.len()) {
        let v = total(cost, &p);
        if v < best.0 {
            best = (v, p);
        }
    }
    best
}

pub fn pit_hungarian(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let perm: Vec<usize> = min_cost_assignment(cost).into_iter().map(|c| c.expect("square cost")).collect();
    (total(cost, &perm), perm)
}

fn solve(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    if cost.len() <= EXHAUSTIVE_MAX {
        pit_exhaustive(cost)
    } else {
        pit_hungarian(cost)
    }
}

/// Permutation-invariant BCE of probabilities `[T, K]` against a binary
/// reference (padded to `K` columns). Returns the loss and the best
/// permutation.
pub fn pit_bce(probs: &Tensor, reference: &Tensor) -> Result<(f64, Vec<usize>)> {
    Ok(solve(&pit_cost_matrix(probs, reference, false)?))
}

/// Reference columns reordered so that column `k` is the one matched to output `k`.
pub fn permute_reference(reference: &Tensor, k: usize, perm: &[usize]) -> Result<Tensor> {
    let padded = pad_reference(reference, k)?;
    let mut out = Tensor::zeros(&[padded.rows(), k]);
    for i in 0..padded.rows() {
        for (a, &b) in perm.iter().enumerate() {
            out.set(i, a, padded.at(i, b));
        }
    }
    Ok(out)
}

/// Graph form over a probability node; the permutation is chosen on the
/// current values and held fixed for the gradient.
pub fn pit_bce_loss(g: &mut Graph, probs: NodeId, reference: &Tensor) -> Result<(NodeId, Vec<usize>)> {
    let (_, perm) = pit_bce(g.value(probs), reference)?;
    let target = permute_reference(reference, g.value(probs).cols(), &perm)?;
    Ok((g.bce(probs, &target)?, perm))
}

/// As [`pit_bce_loss`] but over logits, which is what training uses.
pub fn pit_bce_with_logits(g: &mut Graph, logits: NodeId, reference: &Tensor) -> Result<(NodeId, Vec<usize>)> {
    let (_, perm) = solve(&pit_cost_matrix(g.value(logits), reference, true)?);
    let target = permute_reference(reference, g.value(logits).cols(), &perm)?;
    Ok((g.bce_with_logits(logits, &target)?, perm))
}
