use serde::Serialize;

use super::segments::{frame_range, SegmentList};
use crate::error::{Error, Result};
use crate::numerics::assignment::max_weight_assignment;

/// DER breakdown. Times are in seconds; the `*_frames` fields hold the exact
/// integer counts they derive from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerReport {
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub reference_speech: f64,
    pub miss_frames: u64,
    pub false_alarm_frames: u64,
    pub confusion_frames: u64,
    pub reference_frames: u64,
    /// `(reference, hypothesis)` speaker pairs of the optimal mapping.
    pub mapping: Vec<(String, String)>,
}

impl DerReport {
    pub fn miss_rate(&self) -> f64 {
        self.miss_frames as f64 / self.reference_frames as f64
    }

    pub fn false_alarm_rate(&self) -> f64 {
        self.false_alarm_frames as f64 / self.reference_frames as f64
    }

    pub fn confusion_rate(&self) -> f64 {
        self.confusion_frames as f64 / self.reference_frames as f64
    }
}

/// Frame-based diarization error rate with an optimal one-to-one speaker
/// mapping. Frames whose midpoint lies within `collar_s` of a reference
/// boundary are not scored; overlapped speech is scored.
pub fn der(reference: &SegmentList, hypothesis: &SegmentList, frame_s: f64, collar_s: f64) -> Result<DerReport> {
    if !(frame_s > 0.0) || !(collar_s >= 0.0) {
        return Err(Error::InvalidArgument("frame_s must be positive and collar_s non-negative".into()));
    }
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference: DER is undefined".into()));
    }
    let end = reference.end_time().max(hypothesis.end_time());
    let n = (end / frame_s).ceil() as usize + 1;
    let ref_spk = reference.speakers();
    let hyp_spk = hypothesis.speakers();
    let r = reference.to_frames(frame_s, n, &ref_spk);
    let h = hypothesis.to_frames(frame_s, n, &hyp_spk);

    let mut scored = vec![true; n];
    if collar_s > 0.0 {
        for s in reference.segments() {
            for b in [s.start, s.end] {
                let (lo, hi) = frame_range(b - collar_s, b + collar_s, frame_s, n);
                scored[lo..hi].iter_mut().for_each(|x| *x = false);
            }
        }
    }

    let mut co = vec![vec![0u64; hyp_spk.len()]; ref_spk.len()];
    let (mut miss, mut fa, mut both, mut total) = (0u64, 0u64, 0u64, 0u64);
    for t in (0..n).filter(|&t| scored[t]) {
        let nr = r[t].iter().filter(|&&x| x).count() as u64;
        let nh = h[t].iter().filter(|&&x| x).count() as u64;
        total += nr;
        miss += nr.saturating_sub(nh);
        fa += nh.saturating_sub(nr);
        both += nr.min(nh);
        for (i, &ri) in r[t].iter().enumerate() {
            if ri {
                for (j, &hj) in h[t].iter().enumerate() {
                    if hj {
                        co[i][j] += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("reference has no scored speech".into()));
    }
    let weights: Vec<Vec<f64>> = co.iter().map(|row| row.iter().map(|&c| c as f64).collect()).collect();
    let mut matched = 0u64;
    let mut mapping = Vec::new();
    if !hyp_spk.is_empty() {
        for (i, j) in max_weight_assignment(&weights).into_iter().enumerate() {
            if let Some(j) = j {
                matched += co[i][j];
                mapping.push((ref_spk[i].clone(), hyp_spk[j].clone()));
            }
        }
    }
    let conf = both - matched;
    Ok(DerReport {
        der: (miss + fa + conf) as f64 / total as f64,
        miss: miss as f64 * frame_s,
        false_alarm: fa as f64 * frame_s,
        confusion: conf as f64 * frame_s,
        reference_speech: total as f64 * frame_s,
        miss_frames: miss,
        false_alarm_frames: fa,
        confusion_frames: conf,
        reference_frames: total,
        mapping,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Segment;

    #[test]
    fn identical_hypothesis_scores_zero() {
        let r = SegmentList::new(vec![Segment::new("a", 0.0, 3.0), Segment::new("b", 2.0, 5.0)]).unwrap();
        let h = SegmentList::new(vec![Segment::new("x", 0.0, 3.0), Segment::new("y", 2.0, 5.0)]).unwrap();
        let d = der(&r, &h, 0.01, 0.0).unwrap();
        assert_eq!(d.der, 0.0);
        assert_eq!((d.miss_frames, d.false_alarm_frames, d.confusion_frames), (0, 0, 0));
    }

    #[test]
    fn empty_hypothesis_is_all_miss() {
        let r = SegmentList::new(vec![Segment::new("a", 0.0, 10.0)]).unwrap();
        let d = der(&r, &SegmentList::default(), 0.01, 0.0).unwrap();
        assert_eq!(d.der, 1.0);
        assert_eq!(d.miss_rate(), 1.0);
    }

    #[test]
    fn swapped_labels_count_as_confusion() {
        let r = SegmentList::new(vec![Segment::new("a", 0.0, 1.0), Segment::new("b", 1.0, 2.0)]).unwrap();
        let h = SegmentList::new(vec![Segment::new("x", 0.0, 2.0)]).unwrap();
        let d = der(&r, &h, 0.1, 0.0).unwrap();
        assert_eq!(d.confusion_frames, 10);
        assert!((d.der - 0.5).abs() < 1e-12);
    }

    #[test]
    fn collar_removes_boundary_frames() {
        let r = SegmentList::new(vec![Segment::new("a", 1.0, 3.0)]).unwrap();
        let h = SegmentList::new(vec![Segment::new("x", 1.2, 3.0)]).unwrap();
        assert!(der(&r, &h, 0.01, 0.0).unwrap().der > 0.0);
        assert_eq!(der(&r, &h, 0.01, 0.25).unwrap().der, 0.0);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(der(&SegmentList::default(), &SegmentList::default(), 0.01, 0.0).is_err());
    }
}
