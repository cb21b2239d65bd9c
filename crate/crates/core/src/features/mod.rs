//! Log-mel filterbank front end: Hann-windowed STFT followed by triangular
//! mel filters and a floored logarithm.

mod wave;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

pub use wave::Waveform;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Floor added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub frame_shift: f64,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16000,
            frame_length: 0.025,
            frame_shift: 0.010,
            fft_size: 512,
            mel_bins: 64,
            f_min: 20.0,
            f_max: 7600.0,
        }
    }
}

impl FeatureConfig {
    pub fn frame_samples(&self) -> usize {
        (self.frame_length * self.sample_rate as f64).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.frame_shift * self.sample_rate as f64).round() as usize
    }

    /// Frames produced for a signal of `n` samples (0 if shorter than a frame).
    pub fn num_frames(&self, n: usize) -> usize {
        let fl = self.frame_samples();
        if n < fl {
            0
        } else {
            1 + (n - fl) / self.shift_samples()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_samples() == 0 || self.shift_samples() == 0 {
            return Err(Error::Config("frame length, shift and sample rate must be positive".into()));
        }
        if self.frame_samples() > self.fft_size {
            return Err(Error::Config(format!(
                "frame of {} samples exceeds FFT size {}",
                self.frame_samples(),
                self.fft_size
            )));
        }
        if self.mel_bins == 0 {
            return Err(Error::Config("mel_bins must be at least 1".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "invalid band edges {}..{} Hz (Nyquist {nyquist})",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

/// `T × (fft_size/2 + 1)` complex spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex<f64>>,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub frame_shift: f64,
    pub frame_length: f64,
}

impl Spectrogram {
    pub fn power(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// `T × F` log-mel features, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor,
    pub frame_shift: f64,
    pub frame_length: f64,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.slice_rows(start, end),
            frame_shift: self.frame_shift,
            frame_length: self.frame_length,
        }
    }
}

/// Periodic Hann window of `n` samples.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time Fourier transform with a Hann window, zero-padded to `fft_size`.
pub fn stft(wave: &Waveform, frame_length: f64, frame_shift: f64, fft_size: usize) -> Result<Spectrogram> {
    let cfg = FeatureConfig {
        sample_rate: wave.sample_rate,
        frame_length,
        frame_shift,
        fft_size,
        ..FeatureConfig::default()
    };
    if cfg.frame_samples() == 0 || cfg.shift_samples() == 0 {
        return Err(Error::InvalidArgument("frame length and shift must be positive".into()));
    }
    if cfg.frame_samples() > fft_size {
        return Err(Error::InvalidArgument(format!(
            "frame of {} samples exceeds FFT size {fft_size}",
            cfg.frame_samples()
        )));
    }
    let frames = cfg.num_frames(wave.len());
    if frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "signal of {} samples is shorter than one frame ({} samples)",
            wave.len(),
            cfg.frame_samples()
        )));
    }
    let fl = cfg.frame_samples();
    let hop = cfg.shift_samples();
    let window = hann(fl);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(fft_size);
    let bins = fft_size / 2 + 1;
    let mut values = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let seg = &wave.samples[t * hop..t * hop + fl];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < fl { Complex::new(seg[i] * window[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        values,
        sample_rate: wave.sample_rate,
        fft_size,
        frame_shift,
        frame_length,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over FFT bins, `[mel_bins, fft_size/2+1]`, each
/// row normalised to unit sum.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, mel_bins: usize, f_min: f64, f_max: f64) -> Result<Vec<Vec<f64>>> {
    let nyquist = sample_rate as f64 / 2.0;
    if mel_bins == 0 || !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "invalid mel band: {mel_bins} bins over {f_min}..{f_max} Hz (Nyquist {nyquist})"
        )));
    }
    let bins = fft_size / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;
    let mut filters = Vec::with_capacity(mel_bins);
    for m in 0..mel_bins {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row: Vec<f64> = (0..bins)
            .map(|k| {
                let f = bin_hz(k);
                if f <= lo || f >= hi {
                    0.0
                } else if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                }
            })
            .collect();
        let mut s: f64 = row.iter().sum();
        if s == 0.0 {
            // narrower than the bin spacing: take the bin nearest the centre
            let k = ((mid * fft_size as f64 / sample_rate as f64).round() as usize).min(bins - 1);
            row[k] = 1.0;
            s = 1.0;
        }
        for v in &mut row {
            *v /= s;
        }
        filters.push(row);
    }
    Ok(filters)
}

/// `log(mel(|X|²) + 1e-10)`.
pub fn logmel(spec: &Spectrogram, mel_bins: usize, f_min: f64, f_max: f64) -> Result<FeatureMatrix> {
    let filters = mel_filterbank(spec.sample_rate, spec.fft_size, mel_bins, f_min, f_max)?;
    let power = spec.power();
    let mut out = Vec::with_capacity(spec.frames * mel_bins);
    for t in 0..spec.frames {
        let p = &power[t * spec.bins..(t + 1) * spec.bins];
        for f in &filters {
            let e: f64 = f.iter().zip(p).map(|(a, b)| a * b).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    Ok(FeatureMatrix {
        values: Tensor::matrix(spec.frames, mel_bins, out),
        frame_shift: spec.frame_shift,
        frame_length: spec.frame_length,
    })
}

/// Reusable extractor holding a validated configuration and the filterbank.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub config: FeatureConfig,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        Ok(FeatureExtractor { config })
    }

    pub fn extract(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(Error::Data(format!(
                "expected {} Hz audio, got {} Hz (resampling is not supported)",
                self.config.sample_rate, wave.sample_rate
            )));
        }
        let c = &self.config;
        let spec = stft(wave, c.frame_length, c.frame_shift, c.fft_size)?;
        logmel(&spec, c.mel_bins, c.f_min, c.f_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn sine(freq: f64, seconds: f64, amp: f64) -> Waveform {
        let sr = 16000;
        let n = (seconds * sr as f64) as usize;
        Waveform::new(
            (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()).collect(),
            sr,
        )
        .unwrap()
    }

    fn noise(seconds: f64, seed: u64) -> Waveform {
        let mut rng = crate::numerics::Rng::seed_from_u64(seed);
        let n = (seconds * 16000.0) as usize;
        Waveform::new((0..n).map(|_| StandardNormal.sample(&mut rng)).collect(), 16000).unwrap()
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let spec = stft(&sine(1000.0, 0.5, 1.0), 0.025, 0.010, 512).unwrap();
        let expected = (1000.0f64 * 512.0 / 16000.0).round() as usize;
        assert_eq!(expected, 32);
        let p = spec.power();
        for t in 0..spec.frames {
            let row = &p[t * spec.bins..(t + 1) * spec.bins];
            let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, expected);
        }
    }

    #[test]
    fn frame_count_and_boundaries() {
        let one = Waveform::new(vec![0.1; 400], 16000).unwrap();
        assert_eq!(stft(&one, 0.025, 0.010, 512).unwrap().frames, 1);
        let short = Waveform::new(vec![0.1; 399], 16000).unwrap();
        assert!(stft(&short, 0.025, 0.010, 512).is_err());
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let s = stft(&w, 0.025, 0.010, 512).unwrap();
        assert_eq!(s.frames, 1 + (16000 - 400) / 160);
        assert!(s.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn zero_spectrogram_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let f = fx.extract(&w).unwrap();
        assert!(f.values.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn filter_rows_are_positive() {
        let fb = mel_filterbank(16000, 512, 64, 20.0, 7600.0).unwrap();
        assert_eq!(fb.len(), 64);
        for row in fb {
            assert!(row.iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn invalid_band_edges_are_rejected() {
        assert!(mel_filterbank(16000, 512, 64, 500.0, 100.0).is_err());
        assert!(mel_filterbank(16000, 512, 64, 0.0, 9000.0).is_err());
        assert!(mel_filterbank(16000, 512, 0, 0.0, 8000.0).is_err());
    }

    #[test]
    fn doubling_amplitude_adds_log_four() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let a = noise(1.0, 1);
        let b = Waveform::new(a.samples.iter().map(|s| 2.0 * s).collect(), 16000).unwrap();
        let (fa, fb) = (fx.extract(&a).unwrap(), fx.extract(&b).unwrap());
        for (x, y) in fa.values.data().iter().zip(fb.values.data()) {
            assert!((y - x - 4f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn white_noise_is_flat_across_mel_bins() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let f = fx.extract(&noise(10.0, 2)).unwrap();
        let (t, c) = (f.frames(), f.bins());
        let means: Vec<f64> = (0..c).map(|j| (0..t).map(|i| f.values.at(i, j)).sum::<f64>() / t as f64).collect();
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo > 0.0 && hi <= 1.2 * lo, "means span {lo}..{hi}");
    }

    #[test]
    fn shifting_by_one_hop_shifts_rows() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let a = noise(1.0, 3);
        let shifted = Waveform::new(a.samples[160..].to_vec(), 16000).unwrap();
        let (fa, fs) = (fx.extract(&a).unwrap(), fx.extract(&shifted).unwrap());
        for t in 0..fs.frames() {
            for j in 0..fs.bins() {
                assert!((fa.values.at(t + 1, j) - fs.values.at(t, j)).abs() < 1e-6);
            }
        }
    }
}
