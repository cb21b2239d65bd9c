//! Diarization of long meetings in overlapping blocks: per-block activity and
//! speaker vectors, constrained clustering of those vectors across blocks,
//! and stitching of block centres into one global activity matrix.

mod kmeans;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kmeans::{overlap_aware_kmeans, overlap_aware_kmeans_traced, KMEANS_MAX_ITER};

use crate::eend::{
    activity_to_segments, meeting_probabilities, pool_frames, postprocess, segments_from_probabilities, Activity, Eend,
    Frontend, FrontendKind, PostConfig,
};
use crate::embedder::DVector;
use crate::error::{Error, Result};
use crate::eval::SegmentList;
use crate::features::Waveform;
use crate::numerics::linalg::{cosine, normalized};
use crate::numerics::Tensor;
use crate::simulate::write_jsonl;

/// Blocks shorter than this are dropped unless they are the only block.
pub const MIN_BLOCK_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StitchConfig {
    pub block_s: f64,
    pub advance_s: f64,
    /// Speakers active for less than this are dropped from a block.
    pub min_active_s: f64,
    /// Number of global speakers N.
    pub speakers: usize,
    pub seed: u64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            block_s: 30.0,
            advance_s: 10.0,
            min_active_s: 0.25,
            speakers: 2,
            seed: 0,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.advance_s > 0.0 && self.advance_s <= self.block_s) {
            return Err(Error::Config(format!(
                "block advance {} must be in (0, {}]",
                self.advance_s, self.block_s
            )));
        }
        if self.speakers == 0 {
            return Err(Error::Config("at least one global speaker is needed".into()));
        }
        Ok(())
    }
}

/// Time span of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Blocks `[b·advance, b·advance + length)` while they fit, then one final
/// partial block up to the end if it lasts at least a second.
pub fn split_blocks(duration_s: f64, length_s: f64, advance_s: f64) -> Result<Vec<BlockSpan>> {
    if !(advance_s > 0.0 && advance_s <= length_s) {
        return Err(Error::InvalidArgument(format!("advance {advance_s} must be in (0, {length_s}]")));
    }
    if duration_s <= length_s {
        return Ok(vec![BlockSpan {
            index: 0,
            start_s: 0.0,
            end_s: duration_s,
        }]);
    }
    let mut out = Vec::new();
    let mut b = 0usize;
    loop {
        let start = b as f64 * advance_s;
        let end = start + length_s;
        if end <= duration_s + 1e-9 {
            out.push(BlockSpan {
                index: b,
                start_s: start,
                end_s: end.min(duration_s),
            });
            b += 1;
            continue;
        }
        if duration_s - start >= MIN_BLOCK_S {
            out.push(BlockSpan {
                index: b,
                start_s: start,
                end_s: duration_s,
            });
        }
        break;
    }
    Ok(out)
}

/// How block vectors are normalised by activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DVectorScaling {
    /// Divide by the block length T.
    Frames,
    /// Divide by the number of active frames.
    ActiveFrames,
}

/// Activity-weighted mean of the block's frame embeddings for every speaker
/// column with at least `min_active` active frames.
pub fn block_dvector(
    activity: &Activity,
    embeddings: &Tensor,
    min_active: usize,
    scaling: DVectorScaling,
) -> Result<Vec<(usize, DVector)>> {
    let t = activity.len();
    if embeddings.rows() != t {
        return Err(Error::shape(
            "block_dvector",
            format!("{t} activity frames vs {} embedding frames", embeddings.rows()),
        ));
    }
    let k = activity.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for j in 0..k {
        let active: Vec<usize> = (0..t).filter(|&i| activity[i][j]).collect();
        if active.is_empty() || active.len() < min_active {
            continue;
        }
        let mut d = vec![0.0; embeddings.cols()];
        for &i in &active {
            for (a, b) in d.iter_mut().zip(embeddings.row(i)) {
                *a += b;
            }
        }
        let div = match scaling {
            DVectorScaling::Frames => t,
            DVectorScaling::ActiveFrames => active.len(),
        } as f64;
        d.iter_mut().for_each(|x| *x /= div);
        out.push((j, d));
    }
    Ok(out)
}

/// Pairwise cosine similarities.
pub fn cosine_matrix(vectors: &[DVector]) -> Vec<Vec<f64>> {
    vectors.iter().map(|a| vectors.iter().map(|b| cosine(a, b)).collect()).collect()
}

/// One retained speaker vector of a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDVector {
    pub block: usize,
    pub local: usize,
    pub active_frames: usize,
    pub vector: DVector,
}

/// `mapping[b][k]`: global speaker of local column `k` in block `b`.
pub type BlockMapping = Vec<Vec<Option<usize>>>;

pub fn resolve_permutation(
    blocks: usize,
    local_speakers: usize,
    dvectors: &[BlockDVector],
    labels: &[usize],
) -> BlockMapping {
    let mut out = vec![vec![None; local_speakers]; blocks];
    for (d, &l) in dvectors.iter().zip(labels) {
        out[d.block][d.local] = Some(l);
    }
    out
}

/// Frame-level view of one block: first frame index in the meeting and its
/// rows (possibly fewer than the nominal block length at the end).
#[derive(Debug, Clone)]
pub struct BlockFrames<T> {
    pub start: usize,
    pub rows: Vec<Vec<T>>,
}

/// Concatenates block centres. With blocks of `length` frames advancing by
/// `advance`, block `b` owns `[start + (length - advance) / 2, +advance)`;
/// the first block also owns its leading edge and the last one everything to
/// `total`. Rows missing from a block are left at `T::default()`.
pub fn stitch<T: Copy + Default>(
    blocks: &[BlockFrames<T>],
    mapping: &BlockMapping,
    length: usize,
    advance: usize,
    total: usize,
    speakers: usize,
) -> Result<Vec<Vec<T>>> {
    if blocks.len() != mapping.len() {
        return Err(Error::InvalidArgument(format!("{} blocks but {} mappings", blocks.len(), mapping.len())));
    }
    let mut out = vec![vec![T::default(); speakers]; total];
    let mut owner = vec![0u32; total];
    let margin = length.saturating_sub(advance) / 2;
    for (b, blk) in blocks.iter().enumerate() {
        let lo = if b == 0 { 0 } else { (blk.start + margin).min(total) };
        let hi = if b + 1 == blocks.len() {
            total
        } else {
            (blocks[b + 1].start + margin).min(total)
        };
        for (t, own) in owner.iter_mut().enumerate().take(hi).skip(lo) {
            *own += 1;
            let Some(row) = blk.rows.get(t - blk.start) else { continue };
            for (k, &g) in mapping[b].iter().enumerate() {
                if let Some(g) = g {
                    if g >= speakers {
                        return Err(Error::InvalidArgument(format!("block {b} maps to speaker {g} of {speakers}")));
                    }
                    out[t][g] = row[k];
                }
            }
        }
    }
    if let Some(t) = owner.iter().position(|&c| c != 1) {
        return Err(Error::InvalidArgument(format!("stitching covered frame {t} {} times", owner[t])));
    }
    Ok(out)
}

/// Per-block result kept for inspection.
#[derive(Debug, Clone)]
pub struct Block {
    pub span: BlockSpan,
    pub start_frame: usize,
    pub activity: Activity,
    pub embeddings: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDump {
    pub block: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub local_speaker: usize,
    pub active_frames: usize,
    pub label: usize,
    pub dvector: DVector,
}

#[derive(Debug, Clone)]
pub struct BlockwiseOutput {
    pub segments: SegmentList,
    pub activity: Activity,
    pub frame_s: f64,
    pub dump: Vec<BlockDump>,
}

impl BlockwiseOutput {
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.dump)
    }
}

/// Splits, diarizes every block with the frozen pipeline, clusters the
/// block vectors under the same-block constraint and stitches the centres.
pub fn diarize_blockwise(
    meeting: &Waveform,
    frontend: &Frontend,
    model: &Eend,
    post: &PostConfig,
    config: &StitchConfig,
) -> Result<BlockwiseOutput> {
    config.validate()?;
    post.validate()?;
    if frontend.kind() == FrontendKind::Filterbank {
        return Err(Error::Config("block-wise diarization needs an embedding frontend".into()));
    }
    let frame_s = model.frame_shift(frontend.frame_shift());
    let duration = meeting.duration();
    if frontend.kind() != model.config.frontend {
        return Err(Error::Config(format!(
            "model was trained on the {} frontend, got {}",
            model.config.frontend,
            frontend.kind()
        )));
    }
    if duration <= config.block_s {
        let (probs, _) = meeting_probabilities(meeting, frontend, model)?;
        let activity = postprocess(&probs, post);
        return Ok(BlockwiseOutput {
            segments: segments_from_probabilities(&probs, frame_s, post, duration),
            activity,
            frame_s,
            dump: Vec::new(),
        });
    }
    let to_frames = |s: f64| (s / frame_s).round() as usize;
    let spans = split_blocks(duration, config.block_s, config.advance_s)?;
    let min_active = (config.min_active_s / frame_s).ceil() as usize;
    let mut blocks = Vec::with_capacity(spans.len());
    let mut dvecs = Vec::new();
    for span in spans {
        let wave = meeting.slice_seconds(span.start_s, span.end_s);
        let (_, frames) = frontend.process(&wave)?;
        let probs = model.probabilities(&frames)?;
        let activity = postprocess(&probs, post);
        let embeddings = pool_frames(&frames, model.config.subsample);
        for (local, v) in block_dvector(&activity, &embeddings, min_active, DVectorScaling::Frames)? {
            let active_frames = activity.iter().filter(|r| r[local]).count();
            dvecs.push(BlockDVector {
                block: blocks.len(),
                local,
                active_frames,
                vector: v,
            });
        }
        blocks.push(Block {
            start_frame: to_frames(span.start_s),
            span,
            activity,
            embeddings,
        });
    }
    let labels = overlap_aware_kmeans(&dvecs, config.speakers, config.seed)?;
    let mapping = resolve_permutation(blocks.len(), model.speakers(), &dvecs, &labels);
    let frames: Vec<BlockFrames<bool>> = blocks
        .iter()
        .map(|b| BlockFrames {
            start: b.start_frame,
            rows: b.activity.clone(),
        })
        .collect();
    let total = frontend.features().num_frames(meeting.len()).div_ceil(model.config.subsample);
    let activity = stitch(
        &frames,
        &mapping,
        to_frames(config.block_s),
        to_frames(config.advance_s),
        total,
        config.speakers,
    )?;
    let segments = activity_to_segments(&activity, frame_s, config.speakers).window(0.0, duration);
    let dump = dvecs
        .iter()
        .zip(&labels)
        .map(|(d, &label)| BlockDump {
            block: d.block,
            start_s: blocks[d.block].span.start_s,
            end_s: blocks[d.block].span.end_s,
            local_speaker: d.local,
            active_frames: d.active_frames,
            label,
            dvector: normalized(&d.vector),
        })
        .collect();
    Ok(BlockwiseOutput {
        segments,
        activity,
        frame_s,
        dump,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn starts(v: &[BlockSpan]) -> Vec<f64> {
        v.iter().map(|b| b.start_s).collect()
    }

    #[test]
    fn seventy_seconds_in_thirty_ten_blocks() {
        let b = split_blocks(70.0, 30.0, 10.0).unwrap();
        assert_eq!(starts(&b), vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0]);
        assert!(b[..5].iter().all(|s| s.end_s - s.start_s == 30.0));
        assert_eq!(b[5].end_s, 70.0);
    }

    #[test]
    fn tiling_and_short_inputs() {
        let b = split_blocks(90.5, 30.0, 30.0).unwrap();
        assert_eq!(starts(&b), vec![0.0, 30.0, 60.0]);
        let b = split_blocks(92.0, 30.0, 30.0).unwrap();
        assert_eq!(starts(&b), vec![0.0, 30.0, 60.0, 90.0]);
        assert_eq!(split_blocks(20.0, 30.0, 10.0).unwrap().len(), 1);
        assert_eq!(split_blocks(0.4, 30.0, 10.0).unwrap()[0].end_s, 0.4);
        assert!(split_blocks(60.0, 10.0, 20.0).is_err());
    }

    #[test]
    fn dvector_scaling_examples() {
        let emb = Tensor::matrix(4, 2, vec![3.0, 4.0].repeat(4));
        let full: Activity = vec![vec![true, true, false]; 4];
        let mut half = full.clone();
        half[0][1] = false;
        half[1][1] = false;
        let out = block_dvector(&half, &emb, 1, DVectorScaling::Frames).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], (0, vec![3.0, 4.0]));
        assert_eq!(out[1], (1, vec![1.5, 2.0]));
        assert!((cosine(&out[1].1, &[3.0, 4.0]) - 1.0).abs() < 1e-12);
        let scaled = block_dvector(&half, &emb, 1, DVectorScaling::ActiveFrames).unwrap();
        assert_eq!(scaled[1].1, vec![3.0, 4.0]);
        assert_eq!(block_dvector(&half, &emb, 3, DVectorScaling::Frames).unwrap().len(), 1);
        assert!(block_dvector(&half, &Tensor::zeros(&[3, 2]), 1, DVectorScaling::Frames).is_err());
    }

    #[test]
    fn mapping_cases() {
        let d = |block, local| BlockDVector {
            block,
            local,
            active_frames: 5,
            vector: vec![1.0],
        };
        let m = resolve_permutation(2, 2, &[d(0, 0), d(0, 1), d(1, 0), d(1, 1)], &[0, 1, 0, 1]);
        assert_eq!(m, vec![vec![Some(0), Some(1)], vec![Some(0), Some(1)]]);
        let m = resolve_permutation(2, 2, &[d(0, 0), d(0, 1), d(1, 0), d(1, 1)], &[0, 1, 1, 0]);
        assert_eq!(m[1], vec![Some(1), Some(0)]);
        let m = resolve_permutation(3, 2, &[d(0, 0), d(2, 1)], &[1, 0]);
        assert_eq!(m[1], vec![None, None]);
    }

    fn slices(full: &[Vec<u8>], length: usize, advance: usize) -> Vec<BlockFrames<u8>> {
        let mut out = Vec::new();
        let mut s = 0;
        loop {
            let e = (s + length).min(full.len());
            out.push(BlockFrames {
                start: s,
                rows: full[s..e].to_vec(),
            });
            if e == full.len() {
                break;
            }
            s += advance;
        }
        out
    }

    #[test]
    fn oracle_slices_stitch_back_exactly() {
        let full: Vec<Vec<u8>> = (0..737).map(|t| vec![(t % 3 == 0) as u8, (t % 7 < 2) as u8]).collect();
        let blocks = slices(&full, 300, 100);
        let mapping = vec![vec![Some(0), Some(1)]; blocks.len()];
        assert_eq!(stitch(&blocks, &mapping, 300, 100, full.len(), 2).unwrap(), full);
    }

    #[test]
    fn swapped_block_columns_are_restored() {
        let full: Vec<Vec<u8>> = (0..500).map(|t| vec![(t < 250) as u8, (t >= 200) as u8]).collect();
        let mut blocks = slices(&full, 300, 100);
        for r in &mut blocks[1].rows {
            r.swap(0, 1);
        }
        let mut mapping = vec![vec![Some(0), Some(1)]; blocks.len()];
        mapping[1] = vec![Some(1), Some(0)];
        assert_eq!(stitch(&blocks, &mapping, 300, 100, 500, 2).unwrap(), full);
    }

    #[test]
    fn silent_block_leaves_zeros() {
        let full: Vec<Vec<u8>> = vec![vec![1, 1]; 500];
        let mut blocks = slices(&full, 300, 100);
        blocks[1].rows.iter_mut().for_each(|r| *r = vec![0, 0]);
        let mapping = vec![vec![Some(0), Some(1)]; blocks.len()];
        let out = stitch(&blocks, &mapping, 300, 100, 500, 2).unwrap();
        assert!(out[200..300].iter().all(|r| r == &vec![0, 0]));
        assert!(out[..200].iter().chain(&out[300..]).all(|r| r == &vec![1, 1]));
    }

    #[test]
    fn constant_blocks_extend_pattern() {
        let pattern = vec![1u8, 0];
        let blocks: Vec<BlockFrames<u8>> = (0..4)
            .map(|b| BlockFrames {
                start: b * 10,
                rows: vec![pattern.clone(); 30],
            })
            .collect();
        let mapping = vec![vec![Some(0), Some(1)]; 4];
        let out = stitch(&blocks, &mapping, 30, 10, 60, 2).unwrap();
        assert!(out.iter().all(|r| *r == pattern));
    }

    #[test]
    fn stitch_rejects_bad_mappings() {
        let blocks = vec![BlockFrames {
            start: 0,
            rows: vec![vec![1u8]; 5],
        }];
        assert!(stitch(&blocks, &vec![vec![Some(3)]], 5, 5, 5, 2).is_err());
        assert!(stitch(&blocks, &vec![], 5, 5, 5, 2).is_err());
    }
}
