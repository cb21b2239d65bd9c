use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::meeting::{simulate_meeting, MeetingSpec, PoolUtterance, UtterancePool};
use crate::error::{Error, Result};
use crate::eval::{read_rttm_single, SegmentList};
use crate::features::Waveform;

/// One utterance of a speaker-labelled corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceEntry {
    pub id: String,
    pub speaker: String,
    pub wav_path: String,
    pub duration_s: f64,
}

/// One simulated meeting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeetingEntry {
    pub meeting_id: String,
    pub wav_path: String,
    pub rttm_path: String,
    pub spec: MeetingSpec,
    pub seed: u64,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(rows)
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

impl UtterancePool {
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let entries: Vec<UtteranceEntry> = read_jsonl(path)?;
        let utterances = entries
            .into_iter()
            .map(|e| {
                Ok(PoolUtterance {
                    wave: Waveform::read_wav(&resolve(path, &e.wav_path))?,
                    id: e.id,
                    speaker: e.speaker,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if utterances.is_empty() {
            return Err(Error::Data(format!("{}: empty utterance manifest", path.display())));
        }
        Ok(UtterancePool { utterances })
    }

    /// Writes `<id>.wav` files under `dir` plus `manifest.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<Vec<UtteranceEntry>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for u in &self.utterances {
            let name = format!("{}.wav", u.id);
            u.wave.write_wav_pcm16(&dir.join(&name))?;
            entries.push(UtteranceEntry {
                id: u.id.clone(),
                speaker: u.speaker.clone(),
                wav_path: name,
                duration_s: u.wave.duration(),
            });
        }
        write_jsonl(&dir.join("manifest.jsonl"), &entries)?;
        Ok(entries)
    }
}

/// Simulates every `MeetingSpec` and writes `<id>.wav`, `<id>.rttm` and
/// `meetings.jsonl` under `out_dir`.
pub fn emit_dataset(
    specs: &[MeetingSpec],
    pool: &UtterancePool,
    noise_pool: &[Waveform],
    out_dir: &Path,
) -> Result<Vec<MeetingEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for spec in specs {
        let m = simulate_meeting(spec, pool, noise_pool)?;
        let wav = format!("{}.wav", spec.id);
        let rttm = format!("{}.rttm", spec.id);
        m.mixture.write_wav_pcm16(&out_dir.join(&wav))?;
        m.reference.write_rttm(&out_dir.join(&rttm), &spec.id)?;
        entries.push(MeetingEntry {
            meeting_id: spec.id.clone(),
            wav_path: wav,
            rttm_path: rttm,
            spec: spec.clone(),
            seed: spec.seed,
        });
    }
    write_jsonl(&out_dir.join("meetings.jsonl"), &entries)?;
    Ok(entries)
}

/// Loads the audio and reference of a manifest entry.
pub fn load_meeting(manifest: &Path, entry: &MeetingEntry) -> Result<(Waveform, SegmentList)> {
    Ok((
        Waveform::read_wav(&resolve(manifest, &entry.wav_path))?,
        read_rttm_single(&resolve(manifest, &entry.rttm_path))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::ToyCorpus;

    #[test]
    fn emit_is_reproducible() {
        let c = ToyCorpus::new("s", 2, 1, 8000);
        let utterances = (0..2)
            .flat_map(|s| (0..12).map(move |i| (s, i)))
            .map(|(s, i)| PoolUtterance {
                id: format!("u{s}_{i}"),
                speaker: c.speakers[s].0.clone(),
                wave: c.utterance(s, i, 2.0),
            })
            .collect();
        let pool = UtterancePool { utterances };
        let specs: Vec<MeetingSpec> = (0..3)
            .map(|i| {
                let mut s = MeetingSpec::preset(format!("m{i}"), 2, i);
                s.duration_s = 10.0;
                s
            })
            .collect();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ea = emit_dataset(&specs, &pool, &[], a.path()).unwrap();
        let eb = emit_dataset(&specs, &pool, &[], b.path()).unwrap();
        assert_eq!(ea.len(), 3);
        assert_eq!(ea, eb);
        for name in ["meetings.jsonl", "m0.wav", "m2.rttm"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let manifest = a.path().join("meetings.jsonl");
        let rows: Vec<MeetingEntry> = read_jsonl(&manifest).unwrap();
        let (w, r) = load_meeting(&manifest, &rows[1]).unwrap();
        assert_eq!(w.len(), 80000);
        assert!(!r.is_empty());
    }
}
