use std::path::Path;

use crate::error::{Error, Result};

/// Mono PCM signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; (seconds * sample_rate as f64).round() as usize],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    /// Samples in `[start_s, end_s)`, clipped to the signal.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> Waveform {
        let sr = self.sample_rate as f64;
        let a = ((start_s * sr).round().max(0.0) as usize).min(self.len());
        let b = ((end_s * sr).round().max(0.0) as usize).clamp(a, self.len());
        Waveform {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn concat(&self, other: &Waveform) -> Waveform {
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    /// Reads a mono 16-bit PCM or 32-bit float WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Data(format!(
                "{}: {} channels; only mono input is accepted",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?,
            (hound::SampleFormat::Float, 32) => reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?,
            (fmt, bits) => {
                return Err(Error::Data(format!(
                    "{}: unsupported sample format {fmt:?}/{bits} bit",
                    path.display()
                )))
            }
        };
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM; samples are clipped to `[-1, 1)`.
    pub fn write_wav_pcm16(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
        for &s in &self.samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).map_err(|e| wav_err(path, e))?;
        }
        w.finalize().map_err(|e| wav_err(path, e))
    }

    pub fn write_wav_f32(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
        for &s in &self.samples {
            w.write_sample(s as f32).map_err(|e| wav_err(path, e))?;
        }
        w.finalize().map_err(|e| wav_err(path, e))
    }

    /// Same signal after a PCM-16 write/read cycle.
    pub fn quantized_pcm16(&self) -> Waveform {
        Waveform {
            samples: self
                .samples
                .iter()
                .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0)
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}
