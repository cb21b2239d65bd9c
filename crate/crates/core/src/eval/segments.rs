use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(speaker: impl Into<String>, start: f64, end: f64) -> Self {
        Segment {
            speaker: speaker.into(),
            start,
            end,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Speaker-attributed segments sorted by start time; segments of one speaker
/// never overlap.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentList {
    segments: Vec<Segment>,
}

impl SegmentList {
    /// Validates and sorts. Same-speaker overlaps are an error.
    pub fn new(mut segments: Vec<Segment>) -> Result<Self> {
        for s in &segments {
            if !(s.start.is_finite() && s.end.is_finite()) || s.end <= s.start || s.start < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "segment {} [{}, {}) is empty or invalid",
                    s.speaker, s.start, s.end
                )));
            }
        }
        sort(&mut segments);
        let mut last_end: BTreeMap<&str, f64> = BTreeMap::new();
        for s in &segments {
            if let Some(&e) = last_end.get(s.speaker.as_str()) {
                if s.start < e {
                    return Err(Error::InvalidArgument(format!(
                        "speaker {} has overlapping segments at {:.3}s",
                        s.speaker, s.start
                    )));
                }
            }
            last_end.insert(&s.speaker, s.end);
        }
        Ok(SegmentList { segments })
    }

    /// Merges overlapping or touching segments of the same speaker and drops
    /// empty ones.
    pub fn merged(segments: Vec<Segment>) -> Self {
        let mut by_spk: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for s in segments.into_iter().filter(|s| s.end > s.start) {
            by_spk.entry(s.speaker).or_default().push((s.start, s.end));
        }
        let mut out = Vec::new();
        for (spk, mut iv) in by_spk {
            iv.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut cur = iv[0];
            for &(a, b) in &iv[1..] {
                if a <= cur.1 {
                    cur.1 = cur.1.max(b);
                } else {
                    out.push(Segment::new(spk.clone(), cur.0, cur.1));
                    cur = (a, b);
                }
            }
            out.push(Segment::new(spk.clone(), cur.0, cur.1));
        }
        sort(&mut out);
        SegmentList { segments: out }
    }

    /// Converts a `[T][K]` activity matrix at `frame_s` resolution into
    /// segments; column k is labelled `names[k]`.
    pub fn from_activity(activity: &[Vec<bool>], frame_s: f64, names: &[String]) -> Self {
        let mut out = Vec::new();
        let k = names.len();
        for (j, name) in names.iter().enumerate() {
            let mut start: Option<usize> = None;
            for t in 0..=activity.len() {
                let on = t < activity.len() && j < activity[t].len() && activity[t][j];
                match (on, start) {
                    (true, None) => start = Some(t),
                    (false, Some(s)) => {
                        out.push(Segment::new(name.clone(), s as f64 * frame_s, t as f64 * frame_s));
                        start = None;
                    }
                    _ => {}
                }
            }
        }
        debug_assert!(activity.iter().all(|r| r.len() >= k));
        sort(&mut out);
        SegmentList { segments: out }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Distinct speakers in first-appearance order.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.segments {
            if !out.contains(&s.speaker) {
                out.push(s.speaker.clone());
            }
        }
        out
    }

    pub fn end_time(&self) -> f64 {
        self.segments.iter().map(|s| s.end).fold(0.0, f64::max)
    }

    pub fn speech_time(&self) -> f64 {
        self.segments.iter().map(Segment::duration).sum()
    }

    /// `[n_frames][speakers.len()]` activity; frame i is active for a segment
    /// when its midpoint `(i + 0.5)·frame_s` lies in `[start, end)`.
    pub fn to_frames(&self, frame_s: f64, n_frames: usize, speakers: &[String]) -> Vec<Vec<bool>> {
        let mut out = vec![vec![false; speakers.len()]; n_frames];
        for s in &self.segments {
            let Some(j) = speakers.iter().position(|x| *x == s.speaker) else {
                continue;
            };
            let (a, b) = frame_range(s.start, s.end, frame_s, n_frames);
            for row in &mut out[a..b] {
                row[j] = true;
            }
        }
        out
    }

    /// Fraction of speech time covered by two or more speakers.
    pub fn overlap_ratio(&self) -> f64 {
        let mut events: Vec<(f64, i32)> = Vec::new();
        for s in &self.segments {
            events.push((s.start, 1));
            events.push((s.end, -1));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut active, mut prev, mut speech, mut overlap) = (0i32, 0.0, 0.0, 0.0);
        for (t, d) in events {
            let dt = t - prev;
            if active >= 1 {
                speech += dt;
            }
            if active >= 2 {
                overlap += dt;
            }
            active += d;
            prev = t;
        }
        if speech == 0.0 {
            0.0
        } else {
            overlap / speech
        }
    }

    /// Segments clipped to `[start, end)` and shifted to start at zero.
    pub fn window(&self, start: f64, end: f64) -> SegmentList {
        let segments = self
            .segments
            .iter()
            .filter(|s| s.end > start && s.start < end)
            .map(|s| Segment::new(s.speaker.clone(), s.start.max(start) - start, s.end.min(end) - start))
            .filter(|s| s.end > s.start)
            .collect();
        SegmentList { segments }
    }

    pub fn to_rttm(&self, meeting_id: &str) -> String {
        let mut out = String::new();
        for s in &self.segments {
            writeln!(
                out,
                "SPEAKER {meeting_id} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                s.start,
                s.duration(),
                s.speaker
            )
            .unwrap();
        }
        out
    }

    pub fn write_rttm(&self, path: &Path, meeting_id: &str) -> Result<()> {
        fs::write(path, self.to_rttm(meeting_id)).map_err(|e| Error::io(path, e))
    }
}

fn sort(v: &mut [Segment]) {
    v.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.end.total_cmp(&b.end))
            .then(a.speaker.cmp(&b.speaker))
    });
}

/// Frames `[a, b)` whose midpoints fall in `[start, end)`.
pub(crate) fn frame_range(start: f64, end: f64, frame_s: f64, n_frames: usize) -> (usize, usize) {
    // midpoint (i + 0.5)·f ≥ start  ⇔  i ≥ start/f − 0.5
    let a = (start / frame_s - 0.5).ceil().max(0.0) as usize;
    let b = (end / frame_s - 0.5).ceil().max(0.0) as usize;
    (a.min(n_frames), b.min(n_frames).max(a.min(n_frames)))
}

/// Parses RTTM text into one list per recording id. Non-`SPEAKER` lines and
/// zero-length turns are skipped.
pub fn parse_rttm(text: &str) -> Result<BTreeMap<String, SegmentList>> {
    let mut raw: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0] != "SPEAKER" {
            continue;
        }
        if f.len() < 8 {
            return Err(Error::Format(format!("RTTM line {}: expected at least 8 fields", i + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("RTTM line {}: bad number {s:?}", i + 1)))
        };
        let (start, dur) = (num(f[3])?, num(f[4])?);
        if dur <= 0.0 {
            continue;
        }
        raw.entry(f[1].to_string()).or_default().push(Segment::new(f[7], start, start + dur));
    }
    raw.into_iter()
        .map(|(id, segs)| Ok((id, SegmentList::new(segs)?)))
        .collect()
}

pub fn read_rttm(path: &Path) -> Result<BTreeMap<String, SegmentList>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm(&text)
}

/// Reads an RTTM holding a single recording (an empty file gives an empty list).
pub fn read_rttm_single(path: &Path) -> Result<SegmentList> {
    let mut all = read_rttm(path)?;
    match all.len() {
        0 => Ok(SegmentList::default()),
        1 => Ok(all.pop_first().unwrap().1),
        n => Err(Error::Data(format!("{}: expected one recording, found {n}", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rttm_round_trip() {
        let l = SegmentList::new(vec![Segment::new("b", 1.5, 2.25), Segment::new("a", 0.0, 3.0)]).unwrap();
        let text = l.to_rttm("m1");
        assert_eq!(text.lines().next().unwrap(), "SPEAKER m1 1 0.000 3.000 <NA> <NA> a <NA> <NA>");
        let back = parse_rttm(&text).unwrap();
        assert_eq!(back["m1"], l);
    }

    #[test]
    fn same_speaker_overlap_is_rejected_but_can_be_merged() {
        let segs = vec![Segment::new("a", 0.0, 2.0), Segment::new("a", 1.0, 3.0)];
        assert!(SegmentList::new(segs.clone()).is_err());
        let m = SegmentList::merged(segs);
        assert_eq!(m.segments(), &[Segment::new("a", 0.0, 3.0)]);
    }

    #[test]
    fn activity_round_trip() {
        let names = vec!["x".to_string(), "y".to_string()];
        let act = vec![vec![true, false], vec![true, true], vec![false, true], vec![false, false]];
        let l = SegmentList::from_activity(&act, 0.1, &names);
        assert_eq!(l.to_frames(0.1, 4, &names), act);
    }

    #[test]
    fn overlap_ratio_counts_shared_time() {
        let l = SegmentList::new(vec![Segment::new("a", 0.0, 4.0), Segment::new("b", 3.0, 5.0)]).unwrap();
        assert!((l.overlap_ratio() - 0.2).abs() < 1e-12);
    }
}
