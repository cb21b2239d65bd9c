//! Scoring: diarization error rate, verification metrics, prototype-based
//! identification and local embedding smoothness.

mod der;
mod local;
mod protoid;
mod segments;
mod verification;

pub use der::{der, DerReport};
pub use local::{histogram, local_cosine_distances, write_histogram_csv, LocalDistances};
pub(crate) use local::csv_err;
pub use protoid::{label_window, prototype_id_accuracy, ProtoIdReport, ProtoMeeting, WindowLabel};
pub use segments::{parse_rttm, read_rttm, read_rttm_single, Segment, SegmentList};
pub use verification::{eer, min_dcf, score_trials, Extractor, ScoredTrials, Trial, TrialList};

/// Default DER frame resolution in seconds.
pub const DER_FRAME_S: f64 = 0.01;
/// Default minDCF operating point.
pub const DCF_P_TARGET: f64 = 0.05;
/// Fraction of a window that must share one speaker set.
pub const WINDOW_PURITY: f64 = 0.8;
