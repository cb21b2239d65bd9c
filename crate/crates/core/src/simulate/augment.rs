use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::numerics::Rng;

/// Synthetic room response with exponential decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverbConfig {
    /// Range of T60 values in seconds.
    pub t60_s: [f64; 2],
    /// Level of the reverberant tail relative to the direct path (dB).
    #[serde(default = "default_tail_db")]
    pub tail_db: f64,
}

fn default_tail_db() -> f64 {
    -12.0
}

/// Impulse response: unit direct path followed by decaying Gaussian noise
/// reaching −60 dB at `t60` seconds.
pub fn synthetic_rir(t60: f64, tail_db: f64, sample_rate: u32, rng: &mut Rng) -> Vec<f64> {
    let n = (t60 * sample_rate as f64).floor() as usize;
    let mut h = vec![1.0];
    if n <= 1 {
        return h;
    }
    let tail = 10f64.powf(tail_db / 20.0) / (n as f64).sqrt();
    for i in 1..n {
        let decay = 10f64.powf(-3.0 * i as f64 / n as f64);
        let g: f64 = StandardNormal.sample(rng);
        h.push(tail * g * decay);
    }
    h
}

/// Linear convolution truncated to `x.len()`.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if h.len() == 1 {
        return x.iter().map(|v| v * h[0]).collect();
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

/// Reverberates (optional) then adds noise at an SNR drawn from
/// `snr_db_range`. An infinite lower bound disables the noise.
pub fn augment(
    wave: &Waveform,
    noise_pool: &[Waveform],
    snr_db_range: [f64; 2],
    reverb: Option<&ReverbConfig>,
    rng: &mut Rng,
) -> Result<Waveform> {
    let mut out = wave.clone();
    if let Some(r) = reverb {
        let [lo, hi] = r.t60_s;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid T60 range [{lo}, {hi}]")));
        }
        let t60 = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let h = synthetic_rir(t60, r.tail_db, wave.sample_rate, rng);
        out.samples = fft_convolve(&wave.samples, &h);
    }
    let [lo, hi] = snr_db_range;
    if lo == f64::INFINITY {
        return Ok(out);
    }
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!("invalid SNR range [{lo}, {hi}]")));
    }
    if noise_pool.is_empty() {
        return Err(Error::Data("noise augmentation enabled but the noise pool is empty".into()));
    }
    let noise = &noise_pool[rng.gen_range(0..noise_pool.len())];
    if noise.is_empty() || noise.power() == 0.0 {
        return Err(Error::Data("noise recording is empty or silent".into()));
    }
    let snr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let offset = rng.gen_range(0..noise.len());
    let n = out.len();
    let piece: Vec<f64> = (0..n).map(|i| noise.samples[(offset + i) % noise.len()]).collect();
    let p_noise = piece.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let g = (out.power() / (p_noise * 10f64.powf(snr / 10.0))).sqrt();
    for (o, v) in out.samples.iter_mut().zip(&piece) {
        *o += g * v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = rng_for(seed, 0);
        Waveform::new((0..n).map(|_| StandardNormal.sample(&mut rng)).collect(), 16000).unwrap()
    }

    #[test]
    fn infinite_snr_is_identity() {
        let w = noise(1000, 1);
        let out = augment(&w, &[], [f64::INFINITY; 2], None, &mut rng_for(0, 0)).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn zero_db_doubles_power() {
        let w = noise(160000, 1);
        let n = noise(160000, 2);
        let out = augment(&w, &[n], [0.0, 0.0], None, &mut rng_for(0, 0)).unwrap();
        let ratio_db = 10.0 * (out.power() / w.power()).log10();
        assert!((ratio_db - 10.0 * 2f64.log10()).abs() < 0.5, "{ratio_db}");
    }

    #[test]
    fn zero_t60_is_identity() {
        let w = noise(1000, 3);
        let r = ReverbConfig {
            t60_s: [0.0, 0.0],
            tail_db: -12.0,
        };
        let out = augment(&w, &[], [f64::INFINITY; 2], Some(&r), &mut rng_for(0, 0)).unwrap();
        assert!(out.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let x = [1.0, 2.0, -1.0, 0.5];
        let h = [0.5, 0.25, -0.125];
        let y = fft_convolve(&x, &h);
        for i in 0..x.len() {
            let d: f64 = (0..h.len()).filter(|&j| j <= i).map(|j| h[j] * x[i - j]).sum();
            assert!((y[i] - d).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_noise_pool_is_an_error() {
        let w = noise(100, 1);
        assert!(augment(&w, &[], [0.0, 10.0], None, &mut rng_for(0, 0)).is_err());
    }
}
