use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::linalg::{dot, norm};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDistances {
    /// `1 − cos(d(t), d(t+1))`, length `T − 1`.
    pub values: Vec<f64>,
    /// Pairs involving a zero-norm frame; their distance is recorded as 1.
    pub zero_norm_pairs: usize,
}

impl LocalDistances {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Cosine distance between consecutive rows of a `[T, E]` sequence.
pub fn local_cosine_distances(seq: &Tensor) -> Result<LocalDistances> {
    if seq.ndim() != 2 || seq.rows() < 2 {
        return Err(Error::InvalidArgument("need a [T, E] sequence with T >= 2".into()));
    }
    let norms: Vec<f64> = (0..seq.rows()).map(|t| norm(seq.row(t))).collect();
    let mut values = Vec::with_capacity(seq.rows() - 1);
    let mut zero = 0;
    for t in 0..seq.rows() - 1 {
        if norms[t] == 0.0 || norms[t + 1] == 0.0 {
            zero += 1;
            values.push(1.0);
        } else {
            let c = dot(seq.row(t), seq.row(t + 1)) / (norms[t] * norms[t + 1]);
            values.push(1.0 - c.clamp(-1.0, 1.0));
        }
    }
    if zero > 0 {
        log::warn!("{zero} consecutive pairs involve zero-norm frames");
    }
    Ok(LocalDistances {
        values,
        zero_norm_pairs: zero,
    })
}

/// Density histogram: `(bin centre, density)` over `bins` equal bins of
/// `[lo, hi]`; values outside the range are dropped.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut n = 0usize;
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
        n += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let d = if n == 0 { 0.0 } else { c as f64 / (n as f64 * width) };
            (lo + (i as f64 + 0.5) * width, d)
        })
        .collect()
}

pub fn write_histogram_csv(path: &Path, hist: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["bin_center", "density"]).map_err(|e| csv_err(path, e))?;
    for (c, d) in hist {
        w.write_record([c.to_string(), d.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sequence_has_zero_distance() {
        let s = Tensor::matrix(4, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8]);
        assert!(local_cosine_distances(&s).unwrap().values.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn alternating_orthogonal_vectors_have_unit_distance() {
        let s = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0, 1.0]);
        assert_eq!(local_cosine_distances(&s).unwrap().values, vec![1.0; 3]);
    }

    #[test]
    fn zero_frames_are_counted() {
        let s = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let d = local_cosine_distances(&s).unwrap();
        assert_eq!(d.zero_norm_pairs, 2);
        assert_eq!(d.values, vec![1.0, 1.0]);
        assert!(local_cosine_distances(&Tensor::matrix(1, 2, vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn histogram_integrates_to_one() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let h = histogram(&v, 10, 0.0, 1.0);
        let area: f64 = h.iter().map(|(_, d)| d * 0.1).sum();
        assert!((area - 1.0).abs() < 1e-12);
    }
}
