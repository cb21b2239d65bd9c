use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::augment::{augment, ReverbConfig};
use crate::error::{Error, Result};
use crate::eval::{Segment, SegmentList};
use crate::features::Waveform;
use crate::numerics::rng_for;

/// Turn-taking sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurnConfig {
    /// Mean of the exponential pause between turns (s).
    pub mean_gap_s: f64,
    /// Range of overlap durations when a turn overlaps the previous one (s).
    pub overlap_s: [f64; 2],
    /// Per-utterance gain range (dB).
    pub gain_db: [f64; 2],
    /// Attempts (with derived seeds) to land inside the overlap band.
    pub max_attempts: u64,
}

impl Default for TurnConfig {
    fn default() -> Self {
        TurnConfig {
            mean_gap_s: 0.5,
            overlap_s: [0.8, 3.0],
            gain_db: [-3.0, 3.0],
            max_attempts: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeetingSpec {
    pub id: String,
    pub speakers: usize,
    pub duration_s: f64,
    /// Target band for overlapped speech time / total speech time.
    pub overlap: [f64; 2],
    pub seed: u64,
    /// SNR range in dB; absent means no additive noise.
    #[serde(default)]
    pub snr_db: Option<[f64; 2]>,
    #[serde(default)]
    pub reverb: Option<ReverbConfig>,
    #[serde(default)]
    pub turns: TurnConfig,
}

impl MeetingSpec {
    /// 2-minute meeting with 15-20 % overlap.
    pub fn preset(id: impl Into<String>, speakers: usize, seed: u64) -> Self {
        MeetingSpec {
            id: id.into(),
            speakers,
            duration_s: 120.0,
            overlap: [0.15, 0.20],
            seed,
            snr_db: None,
            reverb: None,
            turns: TurnConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.overlap;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("overlap range [{lo}, {hi}] must lie in [0, 1)")));
        }
        if !(self.duration_s > 0.0) || self.speakers == 0 {
            return Err(Error::Config("duration must be positive and speakers at least 1".into()));
        }
        let t = &self.turns;
        if !(t.mean_gap_s >= 0.0 && 0.0 <= t.overlap_s[0] && t.overlap_s[0] <= t.overlap_s[1]) {
            return Err(Error::Config("invalid turn sampler settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolUtterance {
    pub id: String,
    pub speaker: String,
    pub wave: Waveform,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UtterancePool {
    pub utterances: Vec<PoolUtterance>,
}

impl UtterancePool {
    /// Speaker ids in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            m.entry(u.speaker.as_str()).or_default().push(i);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceInfo {
    pub utterance: String,
    pub speaker: String,
    pub offset_s: f64,
    pub duration_s: f64,
    pub gain_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeetingArtifact {
    pub mixture: Waveform,
    pub reference: SegmentList,
    pub sources: Vec<SourceInfo>,
    /// Attempt index that produced this meeting.
    pub attempt: u64,
}

/// One placement in samples.
struct Placement {
    utt: usize,
    offset: usize,
    len: usize,
    gain_db: f64,
}

fn overlap_ratio(p: &[Placement], pool: &UtterancePool) -> f64 {
    let segs: Vec<Segment> = p
        .iter()
        .map(|x| Segment::new(pool.utterances[x.utt].speaker.clone(), x.offset as f64, (x.offset + x.len) as f64))
        .collect();
    SegmentList::merged(segs).overlap_ratio()
}

/// Places utterances by alternating turns; each next turn either overlaps the
/// previous one or follows a pause, steering the running overlap ratio toward
/// the middle of the target band.
fn sample_turns(spec: &MeetingSpec, pool: &UtterancePool, attempt: u64) -> Result<Vec<Placement>> {
    let mut rng = rng_for(spec.seed, attempt);
    let sr = pool.utterances[0].wave.sample_rate as f64;
    let total = (spec.duration_s * sr).round() as usize;
    let by_spk = pool.by_speaker();
    let mut names: Vec<&str> = by_spk.keys().copied().collect();
    names.shuffle(&mut rng);
    names.truncate(spec.speakers);
    let mut queues: Vec<Vec<usize>> = names
        .iter()
        .map(|n| {
            let mut q = by_spk[n].clone();
            q.shuffle(&mut rng);
            q
        })
        .collect();
    let target = 0.5 * (spec.overlap[0] + spec.overlap[1]);
    let gap = Exp::new(1.0 / spec.turns.mean_gap_s.max(1e-6)).unwrap();
    let mut last_end = vec![0usize; names.len()];
    let mut placed: Vec<Placement> = Vec::new();
    let mut cur = rng.gen_range(0..names.len());
    let mut start = (rng.gen_range(0.0..=spec.turns.mean_gap_s) * sr) as usize;
    loop {
        let Some(utt) = queues[cur].pop() else {
            return Err(Error::Data(format!(
                "utterance pool exhausted: speaker {} has no utterances left at {:.1}s of {:.1}s ({} utterances placed)",
                names[cur],
                start as f64 / sr,
                spec.duration_s,
                placed.len()
            )));
        };
        let len = pool.utterances[utt].wave.len().min(total - start);
        let gain_db = rng.gen_range(spec.turns.gain_db[0]..=spec.turns.gain_db[1]);
        placed.push(Placement {
            utt,
            offset: start,
            len,
            gain_db,
        });
        last_end[cur] = start + len;
        if start + len >= total {
            break;
        }
        let next = if names.len() == 1 {
            cur
        } else {
            let mut k = rng.gen_range(0..names.len() - 1);
            if k >= cur {
                k += 1;
            }
            k
        };
        let end = start + len;
        let next_len = queues[next].last().map_or(0, |&u| pool.utterances[u].wave.len());
        let want_overlap = names.len() > 1 && overlap_ratio(&placed, pool) < target;
        let mut next_start = if want_overlap {
            let d = rng.gen_range(spec.turns.overlap_s[0]..=spec.turns.overlap_s[1]) * sr;
            let cap = 0.9 * len.min(next_len) as f64;
            end - d.min(cap) as usize
        } else {
            end + (gap.sample(&mut rng) * sr) as usize
        };
        next_start = next_start.max(last_end[next]).max(start);
        if next_start >= total {
            break;
        }
        start = next_start;
        cur = next;
    }
    Ok(placed)
}

/// Simulates one meeting. Retries with derived seeds until the achieved
/// overlap ratio lies in the configured band; if no attempt does, the closest one
/// is returned.
pub fn simulate_meeting(
    spec: &MeetingSpec,
    pool: &UtterancePool,
    noise_pool: &[Waveform],
) -> Result<MeetingArtifact> {
    spec.validate()?;
    let speakers = pool.speakers();
    if speakers.len() < spec.speakers {
        return Err(Error::Data(format!(
            "pool has {} distinct speakers, meeting needs {}",
            speakers.len(),
            spec.speakers
        )));
    }
    let sr = pool.utterances[0].wave.sample_rate;
    if pool.utterances.iter().any(|u| u.wave.sample_rate != sr) {
        return Err(Error::Data("pool mixes sample rates".into()));
    }
    let [lo, hi] = spec.overlap;
    let mut best: Option<(f64, u64, Vec<Placement>)> = None;
    for attempt in 0..spec.turns.max_attempts.max(1) {
        let placed = sample_turns(spec, pool, attempt)?;
        let r = overlap_ratio(&placed, pool);
        let miss = if r < lo { lo - r } else if r > hi { r - hi } else { 0.0 };
        if best.as_ref().map_or(true, |b| miss < b.0) {
            best = Some((miss, attempt, placed));
        }
        if miss == 0.0 {
            break;
        }
    }
    let (miss, attempt, placed) = best.unwrap();
    if miss > 0.0 {
        log::warn!("meeting {}: overlap ratio misses the target band by {miss:.3}", spec.id);
    }

    let total = (spec.duration_s * sr as f64).round() as usize;
    let mut mix = vec![0.0; total];
    let mut segs = Vec::new();
    let mut sources = Vec::new();
    for p in &placed {
        let u = &pool.utterances[p.utt];
        let g = 10f64.powf(p.gain_db / 20.0);
        for (o, s) in mix[p.offset..p.offset + p.len].iter_mut().zip(&u.wave.samples) {
            *o += g * s;
        }
        let (a, b) = (p.offset as f64 / sr as f64, (p.offset + p.len) as f64 / sr as f64);
        segs.push(Segment::new(u.speaker.clone(), a, b));
        sources.push(SourceInfo {
            utterance: u.id.clone(),
            speaker: u.speaker.clone(),
            offset_s: a,
            duration_s: b - a,
            gain_db: p.gain_db,
        });
    }
    let mixture = Waveform {
        samples: mix,
        sample_rate: sr,
    };
    let snr = spec.snr_db.unwrap_or([f64::INFINITY; 2]);
    let mut rng = rng_for(spec.seed, 0xA06 + attempt);
    let mixture = augment(&mixture, noise_pool, snr, spec.reverb.as_ref(), &mut rng)?;
    Ok(MeetingArtifact {
        mixture,
        reference: SegmentList::new(segs)?,
        sources,
        attempt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::ToyCorpus;

    fn pool(speakers: usize, per: usize) -> UtterancePool {
        let c = ToyCorpus::new("p", speakers, 3, 8000);
        let mut utterances = Vec::new();
        for s in 0..speakers {
            for i in 0..per {
                utterances.push(PoolUtterance {
                    id: format!("p{s}_{i}"),
                    speaker: c.speakers[s].0.clone(),
                    wave: c.utterance(s, i as u64, 1.5 + (i % 4) as f64 * 0.5),
                });
            }
        }
        UtterancePool { utterances }
    }

    #[test]
    fn single_speaker_has_no_overlap() {
        let p = pool(1, 30);
        let mut spec = MeetingSpec::preset("m", 1, 1);
        spec.duration_s = 30.0;
        spec.overlap = [0.0, 0.0];
        let m = simulate_meeting(&spec, &p, &[]).unwrap();
        assert_eq!(m.reference.overlap_ratio(), 0.0);
        assert!(m.reference.segments().iter().all(|s| s.end <= 30.0));
    }

    #[test]
    fn exhausted_pool_reports_shortfall() {
        let p = pool(2, 2);
        let spec = MeetingSpec::preset("m", 2, 1);
        let err = simulate_meeting(&spec, &p, &[]).unwrap_err().to_string();
        assert!(err.contains("exhausted"), "{err}");
    }

    #[test]
    fn reference_matches_sources() {
        let p = pool(3, 40);
        let mut spec = MeetingSpec::preset("m", 3, 4);
        spec.duration_s = 40.0;
        let m = simulate_meeting(&spec, &p, &[]).unwrap();
        assert_eq!(m.mixture.len(), 40 * 8000);
        assert_eq!(m.sources.len(), m.reference.len());
        for s in &m.sources {
            assert!(m.reference.segments().iter().any(|r| r.speaker == s.speaker
                && r.start == s.offset_s
                && (r.end - s.offset_s - s.duration_s).abs() < 1e-12));
        }
    }
}
