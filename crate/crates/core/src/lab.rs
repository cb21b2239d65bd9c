//! Self-contained toy laboratory: synthetic voices, a small roster for the
//! embedding models, meetings with fresh voices for the diarization head and
//! held-out material for scoring. Everything is derived from one seed.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eend::{
    meeting_probabilities, prepare_examples, train_eend, DevMeeting, Eend, EendConfig, EendExample, Frontend,
};
use crate::embedder::{label_utterances, LabeledFeatures, StudentConfig, TeacherConfig};
use crate::error::Result;
use crate::eval::{SegmentList, Trial, TrialList};
use crate::features::{FeatureConfig, FeatureExtractor, Waveform};
use crate::simulate::{simulate_meeting, MeetingEntry, MeetingSpec, PoolUtterance, ToyCorpus, UtterancePool};
use crate::training::TrainOptions;

/// One simulated meeting with the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Meeting {
    pub spec: MeetingSpec,
    pub wave: Waveform,
    pub reference: SegmentList,
}

impl Meeting {
    fn simulate(spec: MeetingSpec, pool: &UtterancePool) -> Result<Self> {
        let m = simulate_meeting(&spec, pool, &[])?;
        Ok(Meeting {
            spec,
            wave: m.mixture,
            reference: m.reference,
        })
    }

    /// Writes `<id>.wav` and `<id>.rttm` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<MeetingEntry> {
        let (wav, rttm) = (format!("{}.wav", self.spec.id), format!("{}.rttm", self.spec.id));
        self.wave.write_wav_pcm16(&dir.join(&wav))?;
        self.reference.write_rttm(&dir.join(&rttm), &self.spec.id)?;
        Ok(MeetingEntry {
            meeting_id: self.spec.id.clone(),
            wav_path: wav,
            rttm_path: rttm,
            spec: self.spec.clone(),
            seed: self.spec.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLabConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub roster_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_s: f64,
    pub heldout_speakers: usize,
    pub heldout_utterances: usize,
    /// Meetings used to train the diarization head; each has its own voices.
    pub train_meetings: usize,
    pub train_meeting_s: f64,
    pub eval_meeting_s: f64,
    /// Voices the evaluation meetings draw from.
    pub eval_pool_speakers: usize,
}

impl Default for ToyLabConfig {
    fn default() -> Self {
        ToyLabConfig {
            seed: 1,
            sample_rate: 16000,
            roster_speakers: 8,
            utterances_per_speaker: 12,
            utterance_s: 3.0,
            heldout_speakers: 10,
            heldout_utterances: 4,
            train_meetings: 600,
            train_meeting_s: 60.0,
            eval_meeting_s: 120.0,
            eval_pool_speakers: 10,
        }
    }
}

/// Encoder sizes that train in seconds on one core.
pub fn toy_teacher_config(seed: u64) -> TeacherConfig {
    let mut c = TeacherConfig::default();
    c.encoder.channels = vec![16, 32, 64, 128];
    c.encoder.embedding_dim = 128;
    c.seed = seed;
    c
}

/// The student regresses a fixed target at a small learning rate, so it
/// needs many more steps than the teacher to settle.
pub fn toy_student_config(teacher: &TeacherConfig) -> StudentConfig {
    StudentConfig {
        encoder: teacher.encoder.clone(),
        features: teacher.features,
        steps: 3000,
        seed: teacher.seed,
        ..StudentConfig::default()
    }
}

pub fn toy_eend_config(frontend: &Frontend, speakers: usize, seed: u64) -> EendConfig {
    EendConfig {
        frontend: frontend.kind(),
        features: frontend.features(),
        speakers,
        steps: 1500,
        seed,
        ..EendConfig::default()
    }
}

/// Pool of `per` utterances for each of `count` new voices; lengths cycle
/// through 1.5 to 4 s.
pub fn voice_pool(prefix: &str, count: usize, seed: u64, per: usize, sample_rate: u32) -> UtterancePool {
    let c = ToyCorpus::new(prefix, count, seed, sample_rate);
    let mut utterances = Vec::with_capacity(count * per);
    for s in 0..count {
        for i in 0..per as u64 {
            utterances.push(PoolUtterance {
                id: format!("{prefix}{s:02}_{i}"),
                speaker: c.speakers[s].0.clone(),
                wave: c.utterance(s, i, 1.5 + (i % 6) as f64 * 0.5),
            });
        }
    }
    UtterancePool { utterances }
}

impl ToyLabConfig {
    pub fn roster(&self) -> ToyCorpus {
        ToyCorpus::new("spk", self.roster_speakers, self.seed, self.sample_rate)
    }

    /// Roster training utterances.
    pub fn roster_pool(&self) -> UtterancePool {
        let c = self.roster();
        let mut utterances = Vec::new();
        for (s, (name, _)) in c.speakers.iter().enumerate() {
            for i in 0..self.utterances_per_speaker as u64 {
                utterances.push(PoolUtterance {
                    id: format!("{name}_{i}"),
                    speaker: name.clone(),
                    wave: c.utterance(s, i, self.utterance_s),
                });
            }
        }
        UtterancePool { utterances }
    }

    /// Roster training utterances as labelled features.
    pub fn roster_data(&self, features: &FeatureConfig) -> Result<(Vec<LabeledFeatures>, Vec<String>)> {
        let fx = FeatureExtractor::new(*features)?;
        let items = self
            .roster_pool()
            .utterances
            .into_iter()
            .map(|u| Ok((u.id, u.speaker, fx.extract(&u.wave)?.values)))
            .collect::<Result<Vec<_>>>()?;
        Ok(label_utterances(items))
    }

    /// Utterances of voices never seen in training plus all pairwise trials.
    pub fn heldout_pool(&self) -> (UtterancePool, TrialList) {
        let c = ToyCorpus::new("held", self.heldout_speakers, self.seed + 7, self.sample_rate);
        let mut utterances: Vec<PoolUtterance> = Vec::new();
        for (s, (name, _)) in c.speakers.iter().enumerate() {
            for i in 0..self.heldout_utterances as u64 {
                utterances.push(PoolUtterance {
                    id: format!("{name}_{i}"),
                    speaker: name.clone(),
                    wave: c.utterance(s, i, self.utterance_s),
                });
            }
        }
        let mut trials = Vec::new();
        for (a, x) in utterances.iter().enumerate() {
            for y in &utterances[a + 1..] {
                trials.push(Trial {
                    target: x.speaker == y.speaker,
                    enroll: x.id.clone(),
                    test: y.id.clone(),
                });
            }
        }
        (UtterancePool { utterances }, TrialList { trials })
    }

    pub fn heldout_trials(&self) -> (HashMap<String, Waveform>, TrialList) {
        let (pool, trials) = self.heldout_pool();
        (pool.utterances.into_iter().map(|u| (u.id, u.wave)).collect(), trials)
    }

    /// Training meeting `index` with `speakers` voices of its own.
    pub fn train_meeting(&self, speakers: usize, index: usize) -> Result<Meeting> {
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(1000 + index as u64);
        let prefix = format!("t{index}_");
        let per = (self.train_meeting_s / 4.0) as usize + 2;
        let pool = voice_pool(&prefix, speakers, seed, per, self.sample_rate);
        let mut spec = MeetingSpec::preset(format!("train{index}"), speakers, seed);
        spec.duration_s = self.train_meeting_s;
        Meeting::simulate(spec, &pool)
    }

    /// Shared pool for evaluation meetings; disjoint from every other voice.
    /// Long meetings get proportionally more utterances per speaker.
    pub fn eval_pool(&self) -> UtterancePool {
        let per = ((self.eval_meeting_s / 2.0).ceil() as usize).max(60);
        voice_pool("ev", self.eval_pool_speakers, self.seed + 3, per, self.sample_rate)
    }

    /// `count` evaluation meetings; `tag` separates dev from test.
    pub fn eval_meetings(&self, pool: &UtterancePool, speakers: usize, count: usize, tag: &str) -> Result<Vec<Meeting>> {
        let base = match tag {
            "dev" => 200,
            _ => 300,
        } + 10 * speakers as u64;
        (0..count)
            .map(|i| {
                let mut spec = MeetingSpec::preset(format!("{tag}{speakers}_{i}"), speakers, self.seed * 7919 + base + i as u64 * 97);
                spec.duration_s = self.eval_meeting_s;
                Meeting::simulate(spec, pool)
            })
            .collect()
    }

    /// Meetings drawn from roster voices (fresh utterances) with clean
    /// prototypes for every speaker.
    pub fn roster_meetings(&self, speakers: usize, count: usize) -> Result<(Vec<Meeting>, HashMap<String, Waveform>)> {
        let c = self.roster();
        let mut utterances = Vec::new();
        let mut enroll = HashMap::new();
        for s in 0..c.speakers.len() {
            let name = c.speakers[s].0.clone();
            enroll.insert(name.clone(), c.utterance(s, 10_000, 6.0));
            for i in 0..40u64 {
                utterances.push(PoolUtterance {
                    id: format!("{name}_m{i}"),
                    speaker: name.clone(),
                    wave: c.utterance(s, 1000 + i, 1.5 + (i % 6) as f64 * 0.5),
                });
            }
        }
        let pool = UtterancePool { utterances };
        let meetings = (0..count)
            .map(|i| {
                let spec = MeetingSpec {
                    duration_s: self.eval_meeting_s,
                    ..MeetingSpec::preset(format!("roster{i}"), speakers, self.seed * 31 + 500 + i as u64)
                };
                Meeting::simulate(spec, &pool)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((meetings, enroll))
    }

    /// Frontend outputs for the training meetings, generated one at a time
    /// so that only pooled inputs stay in memory.
    pub fn eend_examples(&self, frontend: &Frontend, speakers: usize, subsample: usize) -> Result<Vec<EendExample>> {
        let mut out = Vec::with_capacity(self.train_meetings);
        for i in 0..self.train_meetings {
            let m = self.train_meeting(speakers, i)?;
            let item = [(m.spec.id, m.wave, m.reference)];
            out.extend(prepare_examples(&item, frontend, subsample)?);
        }
        Ok(out)
    }

    pub fn train_eend(&self, frontend: &Frontend, config: &EendConfig, opts: &TrainOptions) -> Result<Eend> {
        let ex = self.eend_examples(frontend, config.speakers, config.subsample)?;
        Ok(train_eend(&ex, config, opts, None)?.0)
    }
}

/// Activity probabilities of every meeting, ready for tuning or scoring.
pub fn dev_meetings(meetings: &[Meeting], frontend: &Frontend, model: &Eend) -> Result<Vec<DevMeeting>> {
    meetings
        .iter()
        .map(|m| {
            let (probs, frame_s) = meeting_probabilities(&m.wave, frontend, model)?;
            Ok(DevMeeting {
                probs,
                frame_s,
                reference: m.reference.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyLabConfig {
        ToyLabConfig {
            roster_speakers: 3,
            utterances_per_speaker: 2,
            utterance_s: 1.0,
            heldout_speakers: 3,
            heldout_utterances: 2,
            train_meeting_s: 20.0,
            eval_meeting_s: 20.0,
            eval_pool_speakers: 3,
            ..ToyLabConfig::default()
        }
    }

    #[test]
    fn trials_cover_all_pairs() {
        let (w, t) = small().heldout_trials();
        assert_eq!(w.len(), 6);
        assert_eq!(t.trials.len(), 15);
        assert_eq!(t.trials.iter().filter(|x| x.target).count(), 3);
    }

    #[test]
    fn meetings_are_reproducible_and_distinct() {
        let c = small();
        let a = c.train_meeting(2, 0).unwrap();
        assert_eq!(a, c.train_meeting(2, 0).unwrap());
        let b = c.train_meeting(2, 1).unwrap();
        assert_ne!(a.reference.speakers(), b.reference.speakers());
        let pool = c.eval_pool();
        let d = c.eval_meetings(&pool, 2, 1, "dev").unwrap();
        let t = c.eval_meetings(&pool, 2, 1, "test").unwrap();
        assert_ne!(d[0].wave, t[0].wave);
        let dir = tempfile::tempdir().unwrap();
        let e = d[0].write(dir.path()).unwrap();
        let (w, r) = crate::simulate::load_meeting(&dir.path().join("x.jsonl"), &e).unwrap();
        for (x, y) in r.segments().iter().zip(d[0].reference.segments()) {
            assert_eq!(x.speaker, y.speaker);
            assert!((x.start - y.start).abs() <= 5e-4 && (x.end - y.end).abs() <= 5e-4);
        }
        assert_eq!(w.len(), d[0].wave.len());
    }

    #[test]
    fn roster_meetings_have_prototypes() {
        let (m, enroll) = small().roster_meetings(3, 1).unwrap();
        for s in m[0].reference.speakers() {
            assert!(enroll.contains_key(&s));
        }
    }
}
