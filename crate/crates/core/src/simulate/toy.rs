//! Synthetic "speakers": stationary-per-syllable noise shaped by a
//! formant-like spectral envelope with syllabic amplitude modulation.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::features::{hz_to_mel, Waveform};
use crate::numerics::{rng_for, Rng};

const SYNTH_FFT: usize = 512;
const SYNTH_HOP: usize = 256;
/// Utterance RMS before gains.
pub const TOY_RMS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    /// Centre on a 0..1 mel axis spanning 0..Nyquist.
    pub centre: f64,
    pub width: f64,
    pub gain_db: f64,
}

/// Spectral identity of one toy speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVoice {
    pub formants: Vec<Formant>,
    pub tilt_db: f64,
}

/// Per-utterance variability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoiceVariation {
    /// Std-dev of formant centre jitter per syllable.
    pub centre_jitter: f64,
    /// Std-dev of formant gain jitter per syllable (dB).
    pub gain_jitter_db: f64,
    /// Std-dev of the per-utterance channel tilt (dB).
    pub channel_tilt_db: f64,
    pub syllable_s: [f64; 2],
    /// Size of the phone inventory shared by all voices (0 disables it).
    pub phones: usize,
    /// Std-dev of the per-phone formant centre shifts.
    pub phone_shift: f64,
    /// Std-dev of the per-phone formant gain offsets (dB).
    pub phone_gain_db: f64,
}

impl Default for VoiceVariation {
    fn default() -> Self {
        VoiceVariation {
            centre_jitter: 0.01,
            gain_jitter_db: 2.0,
            channel_tilt_db: 2.0,
            syllable_s: [0.12, 0.30],
            phones: 0,
            phone_shift: 0.04,
            phone_gain_db: 6.0,
        }
    }
}

/// Per-formant `(centre shift, gain offset)` of every phone. The inventory
/// depends only on the variation settings, so all corpora share it.
pub fn phone_inventory(var: &VoiceVariation) -> Vec<Vec<(f64, f64)>> {
    let mut rng = rng_for(0x9404E, var.phones as u64);
    let c = Normal::new(0.0, var.phone_shift.max(1e-12)).unwrap();
    let g = Normal::new(0.0, var.phone_gain_db.max(1e-12)).unwrap();
    (0..var.phones)
        .map(|_| FORMANT_RANGES.iter().map(|_| (c.sample(&mut rng), g.sample(&mut rng))).collect())
        .collect()
}

const FORMANT_RANGES: [(f64, f64); 3] = [(0.15, 0.38), (0.42, 0.65), (0.68, 0.88)];

impl ToyVoice {
    pub fn random(rng: &mut Rng) -> Self {
        let formants = FORMANT_RANGES
            .iter()
            .map(|&(lo, hi)| Formant {
                centre: rng.gen_range(lo..hi),
                width: rng.gen_range(0.03..0.06),
                gain_db: rng.gen_range(15.0..25.0),
            })
            .collect();
        ToyVoice {
            formants,
            tilt_db: rng.gen_range(-10.0..0.0),
        }
    }

    /// Amplitude response at each of `bins` FFT bins.
    fn envelope(&self, bins: usize, sample_rate: u32, jitter: &[(f64, f64)], channel_tilt_db: f64) -> Vec<f64> {
        let nyq_mel = hz_to_mel(sample_rate as f64 / 2.0);
        (0..bins)
            .map(|k| {
                let f = k as f64 * sample_rate as f64 / (2.0 * (bins - 1) as f64);
                let m = hz_to_mel(f) / nyq_mel;
                let mut db = -25.0 + (self.tilt_db + channel_tilt_db) * m;
                for (fm, &(dc, dg)) in self.formants.iter().zip(jitter) {
                    let z = (m - fm.centre - dc) / fm.width;
                    db += (fm.gain_db + dg) * (-0.5 * z * z).exp();
                }
                10f64.powf(db / 20.0)
            })
            .collect()
    }
}

/// Renders `seconds` of speech-like noise for `voice`.
pub fn synthesize(voice: &ToyVoice, var: &VoiceVariation, seconds: f64, sample_rate: u32, rng: &mut Rng) -> Waveform {
    let n = (seconds * sample_rate as f64).round() as usize;
    let bins = SYNTH_FFT / 2 + 1;
    let ifft = FftPlanner::new().plan_fft_inverse(SYNTH_FFT);
    let window: Vec<f64> = crate::features::hann(SYNTH_FFT).iter().map(|w| w.sqrt()).collect();
    let channel_tilt = Normal::new(0.0, var.channel_tilt_db.max(1e-12)).unwrap().sample(rng);
    let cj = Normal::new(0.0, var.centre_jitter.max(1e-12)).unwrap();
    let gj = Normal::new(0.0, var.gain_jitter_db.max(1e-12)).unwrap();
    let phones = phone_inventory(var);

    // syllable plan: (start sample, length, peak amplitude, envelope)
    let mut syllables: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
    let mut pos = 0usize;
    while pos < n + SYNTH_FFT {
        let len = ((rng.gen_range(var.syllable_s[0]..var.syllable_s[1])) * sample_rate as f64) as usize;
        let phone = (!phones.is_empty()).then(|| &phones[rng.gen_range(0..phones.len())]);
        let jitter: Vec<(f64, f64)> = (0..voice.formants.len())
            .map(|k| {
                let (pc, pg) = phone.and_then(|p| p.get(k)).copied().unwrap_or((0.0, 0.0));
                (pc + cj.sample(rng), pg + gj.sample(rng))
            })
            .collect();
        let env = voice.envelope(bins, sample_rate, &jitter, channel_tilt);
        syllables.push((pos, len.max(1), rng.gen_range(0.6..1.0), env));
        pos += len.max(1);
    }

    let mut out = vec![0.0; n + SYNTH_FFT];
    let mut buf = vec![Complex::new(0.0, 0.0); SYNTH_FFT];
    let mut syl = 0;
    let mut start = 0usize;
    while start < n {
        let centre = start + SYNTH_FFT / 2;
        while syl + 1 < syllables.len() && syllables[syl + 1].0 <= centre {
            syl += 1;
        }
        let env = &syllables[syl].3;
        for k in 0..bins {
            let z = Complex::new(StandardNormal.sample(rng), StandardNormal.sample(rng)) * env[k];
            buf[k] = z;
            if k > 0 && k < SYNTH_FFT / 2 {
                buf[SYNTH_FFT - k] = z.conj();
            }
        }
        buf[0].im = 0.0;
        buf[SYNTH_FFT / 2].im = 0.0;
        ifft.process(&mut buf);
        for i in 0..SYNTH_FFT {
            out[start + i] += buf[i].re * window[i];
        }
        start += SYNTH_HOP;
    }
    out.truncate(n);
    // syllabic amplitude: raised half-sine per syllable, never below 0.3·peak
    for (s0, len, peak, _) in &syllables {
        for i in *s0..(*s0 + *len).min(n) {
            let tau = (i - s0) as f64 / *len as f64;
            out[i] *= peak * (0.3 + 0.7 * (std::f64::consts::PI * tau).sin());
        }
    }
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|x| *x *= TOY_RMS / rms);
    }
    Waveform {
        samples: out,
        sample_rate,
    }
}

/// A named set of toy voices generated from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub speakers: Vec<(String, ToyVoice)>,
    pub variation: VoiceVariation,
    pub sample_rate: u32,
    pub seed: u64,
}

impl ToyCorpus {
    /// `count` speakers named `{prefix}00`, `{prefix}01`, ...
    pub fn new(prefix: &str, count: usize, seed: u64, sample_rate: u32) -> Self {
        let mut rng = rng_for(seed, 0x7011);
        let speakers = (0..count)
            .map(|i| (format!("{prefix}{i:02}"), ToyVoice::random(&mut rng)))
            .collect();
        ToyCorpus {
            speakers,
            variation: VoiceVariation::default(),
            sample_rate,
            seed,
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.speakers.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Deterministic utterance `index` of speaker `spk`.
    pub fn utterance(&self, spk: usize, index: u64, seconds: f64) -> Waveform {
        let mut rng = rng_for(self.seed ^ ((spk as u64 + 1) << 40), index);
        synthesize(&self.speakers[spk].1, &self.variation, seconds, self.sample_rate, &mut rng)
    }
}

/// Brown-ish background noise (integrated white noise with leakage).
pub fn toy_noise(seconds: f64, sample_rate: u32, rng: &mut Rng) -> Waveform {
    let n = (seconds * sample_rate as f64).round() as usize;
    let mut y = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            y = 0.98 * y + w;
            y
        })
        .collect();
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|x| *x *= TOY_RMS / rms);
    }
    Waveform {
        samples: out,
        sample_rate,
    }
}
