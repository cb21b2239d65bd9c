use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{der, SegmentList, DER_FRAME_S};
use crate::numerics::kernels::sliding_extreme_rows;
use crate::numerics::Tensor;

/// Binary activity, `[T][K]`.
pub type Activity = Vec<Vec<bool>>;

/// Threshold plus erosion (min pooling) and dilation (max pooling) windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostConfig {
    pub threshold: f64,
    pub erosion: usize,
    pub dilation: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            threshold: 0.5,
            erosion: 1,
            dilation: 1,
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        for (name, w) in [("erosion", self.erosion), ("dilation", self.dilation)] {
            if w == 0 || w % 2 == 0 {
                return Err(Error::Config(format!("{name} window {w} must be odd and at least 1")));
            }
        }
        Ok(())
    }
}

/// Sliding min, then sliding max, then `>= threshold`, per column.
pub fn postprocess(probs: &Tensor, post: &PostConfig) -> Activity {
    let (t, k) = (probs.rows(), probs.cols());
    if t == 0 {
        return Vec::new();
    }
    let mut v = probs.data().to_vec();
    if post.erosion > 1 {
        v = sliding_extreme_rows(&v, t, k, post.erosion, true).0;
    }
    if post.dilation > 1 {
        v = sliding_extreme_rows(&v, t, k, post.dilation, false).0;
    }
    v.chunks(k).map(|r| r.iter().map(|&p| p >= post.threshold).collect()).collect()
}

pub fn speaker_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("spk{i}")).collect()
}

pub fn activity_to_segments(activity: &Activity, frame_s: f64, k: usize) -> SegmentList {
    SegmentList::from_activity(activity, frame_s, &speaker_names(k))
}

/// Probabilities for one meeting at `frame_s` resolution plus its reference.
#[derive(Debug, Clone)]
pub struct DevMeeting {
    pub probs: Tensor,
    pub frame_s: f64,
    pub reference: SegmentList,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub post: PostConfig,
    /// Pooled DER over the dev meetings.
    pub der: f64,
}

pub const THRESHOLD_GRID: [f64; 9] = [0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7];
pub const WINDOW_GRID: [usize; 5] = [1, 3, 5, 7, 11];

/// Pooled DER (error frames over reference frames) for one setting.
pub fn pooled_der(dev: &[DevMeeting], post: &PostConfig) -> Result<f64> {
    let (mut err, mut total) = (0u64, 0u64);
    for m in dev {
        let hyp = activity_to_segments(&postprocess(&m.probs, post), m.frame_s, m.probs.cols());
        let r = der(&m.reference, &hyp, DER_FRAME_S, 0.0)?;
        err += r.miss_frames + r.false_alarm_frames + r.confusion_frames;
        total += r.reference_frames;
    }
    if total == 0 {
        return Err(Error::Data("dev set has no reference speech".into()));
    }
    Ok(err as f64 / total as f64)
}

/// Grid search over threshold, erosion and dilation; ties keep the first
/// setting in grid order.
pub fn tune_postprocess(dev: &[DevMeeting], thresholds: &[f64], windows: &[usize]) -> Result<TuneResult> {
    let mut best: Option<TuneResult> = None;
    for &threshold in thresholds {
        for &erosion in windows {
            for &dilation in windows {
                let post = PostConfig {
                    threshold,
                    erosion,
                    dilation,
                };
                post.validate()?;
                let d = pooled_der(dev, &post)?;
                if best.map_or(true, |b| d < b.der) {
                    best = Some(TuneResult { post, der: d });
                }
            }
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty tuning grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec())
    }

    fn ones(a: &Activity) -> usize {
        a.iter().flatten().filter(|&&b| b).count()
    }

    #[test]
    fn unit_windows_only_threshold() {
        let p = col(&[0.1, 0.6, 0.5, 0.49]);
        let a = postprocess(&p, &PostConfig::default());
        assert_eq!(a, vec![vec![false], vec![true], vec![true], vec![false]]);
    }

    #[test]
    fn erosion_removes_a_spike() {
        let p = col(&[0.0, 0.0, 0.9, 0.0, 0.0]);
        for threshold in [0.01, 0.5, 0.89] {
            let post = PostConfig {
                threshold,
                erosion: 3,
                dilation: 1,
            };
            assert_eq!(ones(&postprocess(&p, &post)), 0);
        }
    }

    #[test]
    fn constant_column_survives_any_windows() {
        let p = col(&[0.7; 9]);
        for (e, d) in [(1, 1), (3, 7), (11, 5)] {
            let post = PostConfig {
                threshold: 0.5,
                erosion: e,
                dilation: d,
            };
            assert_eq!(ones(&postprocess(&p, &post)), 9);
        }
    }

    #[test]
    fn dilation_fills_short_gaps() {
        let p = col(&[0.9, 0.9, 0.1, 0.9, 0.9]);
        let post = PostConfig {
            threshold: 0.5,
            erosion: 1,
            dilation: 3,
        };
        assert_eq!(ones(&postprocess(&p, &post)), 5);
    }

    #[test]
    fn config_validation() {
        assert!(PostConfig::default().validate().is_ok());
        for bad in [
            PostConfig { threshold: 1.0, ..PostConfig::default() },
            PostConfig { erosion: 2, ..PostConfig::default() },
            PostConfig { dilation: 0, ..PostConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn tuning_finds_a_perfect_setting() {
        let reference = SegmentList::new(vec![crate::eval::Segment::new("a", 1.0, 3.0)]).unwrap();
        let mut v = vec![0.1; 50];
        for x in &mut v[10..30] {
            *x = 0.62;
        }
        v[40] = 0.95;
        let dev = vec![DevMeeting {
            probs: col(&v),
            frame_s: 0.1,
            reference,
        }];
        let r = tune_postprocess(&dev, &THRESHOLD_GRID, &WINDOW_GRID).unwrap();
        assert_eq!(r.der, 0.0);
        assert!(r.post.erosion >= 3 || r.post.threshold > 0.62);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_frames(v in proptest::collection::vec(0.0f64..1.0, 1..60), lo in 0.05f64..0.5, gap in 0.0f64..0.45, e in 0usize..4, d in 0usize..4) {
            let p = Tensor::matrix(v.len(), 1, v);
            let a = PostConfig { threshold: lo, erosion: 2 * e + 1, dilation: 2 * d + 1 };
            let b = PostConfig { threshold: lo + gap, ..a };
            let (pa, pb) = (postprocess(&p, &a), postprocess(&p, &b));
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert!(x[0] || !y[0]);
            }
        }
    }
}
