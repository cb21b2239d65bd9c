use std::collections::HashMap;

use serde::Serialize;

use super::segments::SegmentList;
use super::verification::Extractor;
use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::numerics::linalg::cosine;

/// Resolution used to label windows from the reference.
const LABEL_FRAME_S: f64 = 0.01;

/// One recording with its reference and clean-speech prototypes.
pub struct ProtoMeeting<'a> {
    pub wave: &'a Waveform,
    pub reference: &'a SegmentList,
    pub prototypes: &'a HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProtoIdReport {
    pub single_acc: f64,
    pub overlap_acc: f64,
    pub single_windows: usize,
    pub overlap_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WindowLabel {
    Single(String),
    Overlap(String, String),
    Mixed,
}

/// A window is `Single(s)` when at least `purity` of its frames have exactly
/// speaker `s` active, `Overlap(a, b)` when at least `purity` of its frames
/// have exactly `a` and `b` active, and `Mixed` otherwise.
pub fn label_window(reference: &SegmentList, start: f64, end: f64, purity: f64) -> WindowLabel {
    let w = reference.window(start, end);
    let n = ((end - start) / LABEL_FRAME_S).round() as usize;
    let spk = w.speakers();
    let frames = w.to_frames(LABEL_FRAME_S, n, &spk);
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for row in &frames {
        let active: Vec<usize> = (0..spk.len()).filter(|&j| row[j]).collect();
        if active.len() == 1 || active.len() == 2 {
            *counts.entry(active).or_default() += 1;
        }
    }
    let need = (purity * n as f64).ceil() as usize;
    let mut best: Option<(&Vec<usize>, usize)> = None;
    for (k, &c) in &counts {
        if c >= need && best.map_or(true, |(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    match best {
        Some((k, _)) if k.len() == 1 => WindowLabel::Single(spk[k[0]].clone()),
        Some((k, _)) => {
            let (mut a, mut b) = (spk[k[0]].clone(), spk[k[1]].clone());
            if b < a {
                std::mem::swap(&mut a, &mut b);
            }
            WindowLabel::Overlap(a, b)
        }
        None => WindowLabel::Mixed,
    }
}

/// Prototype-based identification over sliding windows. Single-speaker
/// windows are correct when the most similar prototype is the true speaker;
/// overlap windows when the two most similar prototypes are the true pair.
pub fn prototype_id_accuracy(
    meetings: &[ProtoMeeting],
    extractor: &dyn Extractor,
    window_s: f64,
    hop_s: f64,
    purity: f64,
) -> Result<ProtoIdReport> {
    if !(window_s > 0.0 && hop_s > 0.0) {
        return Err(Error::InvalidArgument("window and hop must be positive".into()));
    }
    let (mut s_ok, mut s_n, mut o_ok, mut o_n) = (0usize, 0usize, 0usize, 0usize);
    for m in meetings {
        for spk in m.reference.speakers() {
            if !m.prototypes.contains_key(&spk) {
                return Err(Error::Data(format!("no prototype for speaker {spk:?}")));
            }
        }
        let mut names: Vec<&String> = m.prototypes.keys().collect();
        names.sort();
        let dur = m.wave.duration();
        let mut start = 0.0;
        while start + window_s <= dur + 1e-9 {
            let label = label_window(m.reference, start, start + window_s, purity);
            if label != WindowLabel::Mixed {
                let e = m.extractor_embed(extractor, start, start + window_s)?;
                let mut sims: Vec<(f64, &String)> = names.iter().map(|&n| (cosine(&e, &m.prototypes[n]), n)).collect();
                sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
                match label {
                    WindowLabel::Single(s) => {
                        s_n += 1;
                        s_ok += (*sims[0].1 == s) as usize;
                    }
                    WindowLabel::Overlap(a, b) => {
                        o_n += 1;
                        if sims.len() >= 2 {
                            let top = [sims[0].1, sims[1].1];
                            o_ok += (top.contains(&&a) && top.contains(&&b)) as usize;
                        }
                    }
                    WindowLabel::Mixed => unreachable!(),
                }
            }
            start += hop_s;
        }
    }
    let ratio = |ok: usize, n: usize| if n == 0 { f64::NAN } else { ok as f64 / n as f64 };
    Ok(ProtoIdReport {
        single_acc: ratio(s_ok, s_n),
        overlap_acc: ratio(o_ok, o_n),
        single_windows: s_n,
        overlap_windows: o_n,
    })
}

impl ProtoMeeting<'_> {
    fn extractor_embed(&self, ex: &dyn Extractor, a: f64, b: f64) -> Result<Vec<f64>> {
        ex.embed_segment(self.wave, a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Segment;

    #[test]
    fn purity_rule() {
        let r = SegmentList::new(vec![Segment::new("a", 0.0, 2.0), Segment::new("b", 1.7, 4.0)]).unwrap();
        assert_eq!(label_window(&r, 0.0, 2.0, 0.8), WindowLabel::Single("a".into()));
        assert_eq!(label_window(&r, 1.0, 3.0, 0.8), WindowLabel::Mixed);
        let o = SegmentList::new(vec![Segment::new("b", 0.0, 3.0), Segment::new("a", 0.2, 3.0)]).unwrap();
        assert_eq!(label_window(&o, 0.0, 2.0, 0.8), WindowLabel::Overlap("a".into(), "b".into()));
    }
}
