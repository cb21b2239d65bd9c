use rand::Rng as _;

use super::BlockDVector;
use crate::error::{Error, Result};
use crate::numerics::assignment::min_cost_assignment;
use crate::numerics::linalg::{dot, normalized};
use crate::numerics::rng_for;

pub const KMEANS_MAX_ITER: usize = 100;

/// Cosine k-means in which vectors of the same block never share a cluster.
/// Each assignment step solves a one-to-one matching of a block's vectors to
/// the `n` centroids. Returns one label per input vector.
pub fn overlap_aware_kmeans(dvectors: &[BlockDVector], n: usize, seed: u64) -> Result<Vec<usize>> {
    overlap_aware_kmeans_traced(dvectors, n, seed, |_| {})
}

/// As [`overlap_aware_kmeans`], calling `trace` with the labels of every
/// iteration.
pub fn overlap_aware_kmeans_traced(
    dvectors: &[BlockDVector],
    n: usize,
    seed: u64,
    mut trace: impl FnMut(&[usize]),
) -> Result<Vec<usize>> {
    if dvectors.is_empty() {
        return Ok(Vec::new());
    }
    if n == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one cluster".into()));
    }
    let blocks = dvectors.iter().map(|d| d.block).max().unwrap() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); blocks];
    for (i, d) in dvectors.iter().enumerate() {
        members[d.block].push(i);
    }
    if let Some((b, m)) = members.iter().enumerate().find(|(_, m)| m.len() > n) {
        return Err(Error::InvalidArgument(format!(
            "block {b} has {} active speakers but only {n} clusters were requested",
            m.len()
        )));
    }
    let x: Vec<Vec<f64>> = dvectors.iter().map(|d| normalized(&d.vector)).collect();
    let dist = |a: &[f64], b: &[f64]| (1.0 - dot(a, b)).max(0.0);

    // k-means++ seeding
    let mut rng = rng_for(seed, 0xC1u64);
    let mut cent: Vec<Vec<f64>> = vec![x[rng.gen_range(0..x.len())].clone()];
    while cent.len() < n {
        let d2: Vec<f64> = x
            .iter()
            .map(|v| cent.iter().map(|c| dist(v, c)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..x.len())
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut i = 0;
            while i + 1 < d2.len() && r >= d2[i] {
                r -= d2[i];
                i += 1;
            }
            i
        };
        cent.push(x[pick].clone());
    }

    let mut labels = vec![usize::MAX; x.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut next = vec![0; x.len()];
        for m in members.iter().filter(|m| !m.is_empty()) {
            let cost: Vec<Vec<f64>> = m.iter().map(|&i| cent.iter().map(|c| dist(&x[i], c)).collect()).collect();
            for (r, c) in min_cost_assignment(&cost).into_iter().enumerate() {
                next[m[r]] = c.expect("rows never exceed clusters");
            }
        }
        trace(&next);
        if next == labels {
            break;
        }
        labels = next;
        for (k, c) in cent.iter_mut().enumerate() {
            let mut s = vec![0.0; c.len()];
            let mut any = false;
            for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == k) {
                any = true;
                for (a, b) in s.iter_mut().zip(&x[i]) {
                    *a += b;
                }
            }
            if any && s.iter().any(|v| *v != 0.0) {
                *c = normalized(&s);
            }
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dv(block: usize, local: usize, v: Vec<f64>) -> BlockDVector {
        BlockDVector {
            block,
            local,
            active_frames: 10,
            vector: v,
        }
    }

    fn same_block_separated(d: &[BlockDVector], labels: &[usize]) -> bool {
        (0..d.len()).all(|i| (i + 1..d.len()).all(|j| d[i].block != d[j].block || labels[i] != labels[j]))
    }

    #[test]
    fn separable_directions() {
        let d: Vec<BlockDVector> = (0..6)
            .flat_map(|b| {
                let flip = b % 2 == 1;
                [
                    dv(b, 0, if flip { vec![0.0, 1.0, 0.05] } else { vec![1.0, 0.0, 0.05] }),
                    dv(b, 1, if flip { vec![1.0, 0.02, 0.0] } else { vec![0.02, 1.0, 0.0] }),
                ]
            })
            .collect();
        let l = overlap_aware_kmeans(&d, 2, 1).unwrap();
        for (x, &lab) in d.iter().zip(&l) {
            let dir = if x.vector[0] > 0.5 { 0 } else { 1 };
            assert_eq!(lab == l[0], dir == if d[0].vector[0] > 0.5 { 0 } else { 1 });
        }
    }

    #[test]
    fn identical_vectors_in_one_block_are_split() {
        let d = vec![dv(0, 0, vec![1.0, 0.0]), dv(0, 1, vec![1.0, 0.0])];
        let l = overlap_aware_kmeans(&d, 2, 0).unwrap();
        assert_ne!(l[0], l[1]);
    }

    #[test]
    fn single_block_gets_a_permutation() {
        let d: Vec<BlockDVector> = (0..3).map(|k| dv(0, k, vec![k as f64, 1.0, -(k as f64)])).collect();
        let mut l = overlap_aware_kmeans(&d, 3, 5).unwrap();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
    }

    #[test]
    fn too_many_speakers_names_the_block() {
        let d = vec![dv(0, 0, vec![1.0]), dv(1, 0, vec![1.0]), dv(1, 1, vec![-1.0]), dv(1, 2, vec![0.5])];
        let e = overlap_aware_kmeans(&d, 2, 0).unwrap_err().to_string();
        assert!(e.contains("block 1"), "{e}");
        assert!(overlap_aware_kmeans(&[], 2, 0).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn constraint_holds_every_iteration(seed in 0u64..200, blocks in 1usize..6, n in 2usize..5) {
            let mut rng = rng_for(seed, 3);
            let mut d = Vec::new();
            for b in 0..blocks {
                for k in 0..rng.gen_range(1..=n) {
                    d.push(dv(b, k, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()));
                }
            }
            let mut ok = true;
            let l = overlap_aware_kmeans_traced(&d, n, seed, |lab| ok &= same_block_separated(&d, lab)).unwrap();
            prop_assert!(ok);
            prop_assert!(same_block_separated(&d, &l));
            prop_assert!(l.iter().all(|&x| x < n));
        }
    }
}
