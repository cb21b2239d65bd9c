use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::numerics::linalg::cosine;

/// Anything that maps audio to a fixed-length embedding.
pub trait Extractor {
    fn embed(&self, wave: &Waveform) -> Result<Vec<f64>>;

    /// Embedding of `[start_s, end_s)` of a longer recording.
    fn embed_segment(&self, wave: &Waveform, start_s: f64, end_s: f64) -> Result<Vec<f64>> {
        self.embed(&wave.slice_seconds(start_s, end_s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// Parses whitespace-separated `<0|1> <enroll-id> <test-id>` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let target = match (f.len(), f[0]) {
                (3, "1") => true,
                (3, "0") => false,
                _ => {
                    return Err(Error::Format(format!(
                        "trial line {}: expected `<0|1> <enroll> <test>`",
                        i + 1
                    )))
                }
            };
            trials.push(Trial {
                target,
                enroll: f[1].into(),
                test: f[2].into(),
            });
        }
        Ok(TrialList { trials })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        self.trials
            .iter()
            .map(|t| format!("{} {} {}\n", t.target as u8, t.enroll, t.test))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredTrials {
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::InvalidArgument("scores and labels differ in length".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite trial score".into()));
        }
        Ok(ScoredTrials { scores, targets })
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let nt = self.targets.iter().filter(|&&t| t).count();
        let nn = self.targets.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(Error::InvalidArgument(
                "both target and non-target trials are required".into(),
            ));
        }
        Ok((nt, nn))
    }

    /// ROC operating points `(p_fa, p_miss)` from "reject all" to "accept
    /// all", one per distinct score.
    pub fn roc(&self) -> Result<Vec<(f64, f64)>> {
        let (nt, nn) = self.counts()?;
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut pts = vec![(0.0, 1.0)];
        let (mut acc_t, mut acc_n) = (0usize, 0usize);
        let mut i = 0;
        while i < idx.len() {
            let s = self.scores[idx[i]];
            while i < idx.len() && self.scores[idx[i]] == s {
                if self.targets[idx[i]] {
                    acc_t += 1;
                } else {
                    acc_n += 1;
                }
                i += 1;
            }
            pts.push((acc_n as f64 / nn as f64, 1.0 - acc_t as f64 / nt as f64));
        }
        Ok(pts)
    }
}

/// Equal error rate on the convex hull of the ROC.
pub fn eer(trials: &ScoredTrials) -> Result<f64> {
    let pts = trials.roc()?;
    let hull = lower_hull(&pts);
    for w in hull.windows(2) {
        let ((x1, y1), (x2, y2)) = (w[0], w[1]);
        let (d1, d2) = (y1 - x1, y2 - x2);
        if d1 >= 0.0 && d2 <= 0.0 {
            if d1 == d2 {
                return Ok(x1);
            }
            let t = d1 / (d1 - d2);
            return Ok(x1 + t * (x2 - x1));
        }
    }
    Err(Error::InvalidArgument("ROC does not cross the diagonal".into()))
}

/// Lower-left convex hull of points sorted by increasing p_fa.
fn lower_hull(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut h: Vec<(f64, f64)> = Vec::new();
    for &p in pts {
        while h.len() >= 2 {
            let (a, b) = (h[h.len() - 2], h[h.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= 0.0 {
                h.pop();
            } else {
                break;
            }
        }
        h.push(p);
    }
    h
}

/// Normalised minimum detection cost.
pub fn min_dcf(trials: &ScoredTrials, p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(0.0 < p_target && p_target < 1.0) || c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::InvalidArgument("p_target must lie in (0,1) and costs be positive".into()));
    }
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    Ok(trials
        .roc()?
        .iter()
        .map(|&(pfa, pmiss)| (c_miss * p_target * pmiss + c_fa * (1.0 - p_target) * pfa) / norm)
        .fold(f64::INFINITY, f64::min))
}

/// Cosine scores of every trial; ids are resolved through `wavs`.
pub fn score_trials(wavs: &HashMap<String, Waveform>, extractor: &dyn Extractor, trials: &TrialList) -> Result<ScoredTrials> {
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut scores = Vec::with_capacity(trials.trials.len());
    let mut targets = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        for id in [&t.enroll, &t.test] {
            if !cache.contains_key(id.as_str()) {
                let w = wavs
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("trial references unknown utterance {id:?}")))?;
                cache.insert(id, extractor.embed(w)?);
            }
        }
        scores.push(cosine(&cache[t.enroll.as_str()], &cache[t.test.as_str()]));
        targets.push(t.target);
    }
    ScoredTrials::new(scores, targets)
}
