//! Forward/backward kernels shared by graph ops that are too large to inline.

use super::linalg::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub len_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dGeom {
    pub fn len_out(&self) -> usize {
        (self.len_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.kernel * self.c_in
    }
}

/// Gathers `[len_out, kernel*c_in]` patches from a time-major `[len_in, c_in]` input.
pub fn im2col_1d(x: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let (lo, patch) = (g.len_out(), g.patch());
    let mut cols = vec![0.0; lo * patch];
    for t in 0..lo {
        let row = &mut cols[t * patch..(t + 1) * patch];
        for k in 0..g.kernel {
            let src = (t * g.stride + k) as isize - g.pad as isize;
            if src >= 0 && (src as usize) < g.len_in {
                let s = src as usize;
                row[k * g.c_in..(k + 1) * g.c_in].copy_from_slice(&x[s * g.c_in..(s + 1) * g.c_in]);
            }
        }
    }
    cols
}

pub fn col2im_1d(cols: &[f64], g: &Conv1dGeom, dx: &mut [f64]) {
    let (lo, patch) = (g.len_out(), g.patch());
    for t in 0..lo {
        let row = &cols[t * patch..(t + 1) * patch];
        for k in 0..g.kernel {
            let src = (t * g.stride + k) as isize - g.pad as isize;
            if src >= 0 && (src as usize) < g.len_in {
                let s = src as usize;
                for (d, c) in dx[s * g.c_in..(s + 1) * g.c_in]
                    .iter_mut()
                    .zip(&row[k * g.c_in..(k + 1) * g.c_in])
                {
                    *d += c;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Conv2dGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }
}

/// Patches of a channels-last `[h, w, c_in]` input, one row per output pixel.
pub fn im2col_2d(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo, patch) = (g.h_out(), g.w_out(), g.patch());
    let mut cols = vec![0.0; ho * wo * patch];
    for i in 0..ho {
        for j in 0..wo {
            let row = &mut cols[(i * wo + j) * patch..(i * wo + j + 1) * patch];
            for a in 0..g.kh {
                let si = (i * g.sh + a) as isize - g.ph as isize;
                if si < 0 || si as usize >= g.h {
                    continue;
                }
                for b in 0..g.kw {
                    let sj = (j * g.sw + b) as isize - g.pw as isize;
                    if sj < 0 || sj as usize >= g.w {
                        continue;
                    }
                    let src = (si as usize * g.w + sj as usize) * g.c_in;
                    let dst = (a * g.kw + b) * g.c_in;
                    row[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                }
            }
        }
    }
    cols
}

pub fn col2im_2d(cols: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let (ho, wo, patch) = (g.h_out(), g.w_out(), g.patch());
    for i in 0..ho {
        for j in 0..wo {
            let row = &cols[(i * wo + j) * patch..(i * wo + j + 1) * patch];
            for a in 0..g.kh {
                let si = (i * g.sh + a) as isize - g.ph as isize;
                if si < 0 || si as usize >= g.h {
                    continue;
                }
                for b in 0..g.kw {
                    let sj = (j * g.sw + b) as isize - g.pw as isize;
                    if sj < 0 || sj as usize >= g.w {
                        continue;
                    }
                    let src = (si as usize * g.w + sj as usize) * g.c_in;
                    let dst = (a * g.kw + b) * g.c_in;
                    for (d, c) in dx[src..src + g.c_in].iter_mut().zip(&row[dst..dst + g.c_in]) {
                        *d += c;
                    }
                }
            }
        }
    }
}

/// `y = cols·w + b` for `cols: [n, patch]`, `w: [patch, c_out]`.
pub fn patches_times_weight(cols: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, patch: usize, c_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * c_out];
    if let Some(b) = b {
        for row in y.chunks_mut(c_out) {
            row.copy_from_slice(b);
        }
        gemm(n, patch, c_out, cols, false, w, false, 1.0, &mut y);
    } else {
        gemm(n, patch, c_out, cols, false, w, false, 0.0, &mut y);
    }
    y
}

/// In-place row softmax of an `r × c` buffer.
pub fn softmax_rows(x: &mut [f64], c: usize) {
    for row in x.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Inclusive window bounds of a centred, edge-truncated window.
#[inline]
pub fn window_bounds(t: usize, half: usize, len: usize) -> (usize, usize) {
    (t.saturating_sub(half), (t + half).min(len - 1))
}

/// Centred sliding mean over rows of a `[len, c]` buffer with truncated edges.
pub fn sliding_mean_rows(x: &[f64], len: usize, c: usize, window: usize) -> Vec<f64> {
    let half = window / 2;
    // prefix[t] holds the sum of rows 0..t
    let mut prefix = vec![0.0; (len + 1) * c];
    for t in 0..len {
        for j in 0..c {
            prefix[(t + 1) * c + j] = prefix[t * c + j] + x[t * c + j];
        }
    }
    let mut y = vec![0.0; len * c];
    for t in 0..len {
        let (lo, hi) = window_bounds(t, half, len);
        let n = (hi - lo + 1) as f64;
        for j in 0..c {
            y[t * c + j] = (prefix[(hi + 1) * c + j] - prefix[lo * c + j]) / n;
        }
    }
    y
}

/// Centred sliding max (or min) over rows, returning values and source rows.
pub fn sliding_extreme_rows(x: &[f64], len: usize, c: usize, window: usize, take_min: bool) -> (Vec<f64>, Vec<usize>) {
    let half = window / 2;
    let mut y = vec![0.0; len * c];
    let mut arg = vec![0usize; len * c];
    for j in 0..c {
        for t in 0..len {
            let (lo, hi) = window_bounds(t, half, len);
            let mut best = lo;
            for s in lo + 1..=hi {
                let v = x[s * c + j];
                let b = x[best * c + j];
                if (take_min && v < b) || (!take_min && v > b) {
                    best = s;
                }
            }
            y[t * c + j] = x[best * c + j];
            arg[t * c + j] = best;
        }
    }
    (y, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_geometry() {
        let g = Conv1dGeom { len_in: 10, c_in: 2, c_out: 3, kernel: 3, stride: 2, pad: 1 };
        assert_eq!(g.len_out(), 5);
        let g = Conv1dGeom { stride: 1, ..g };
        assert_eq!(g.len_out(), 10);
    }

    #[test]
    fn sliding_mean_truncates_at_edges() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = sliding_mean_rows(&x, 5, 1, 3);
        assert_eq!(y, vec![1.5, 2.0, 3.0, 4.0, 4.5]);
    }

    #[test]
    fn sliding_min_removes_spike() {
        let x = [0.0, 0.0, 0.9, 0.0, 0.0];
        let (y, _) = sliding_extreme_rows(&x, 5, 1, 3, true);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
