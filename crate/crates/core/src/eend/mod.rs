//! Self-attention diarization head predicting per-frame speaker activity,
//! fed either with filterbank features or with a frozen embedding frontend.

mod pit;
mod post;

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use pit::{
    pad_reference, permute_reference, pit_bce, pit_bce_loss, pit_bce_with_logits, pit_cost_matrix, pit_exhaustive,
    pit_hungarian, EXHAUSTIVE_MAX,
};
pub use post::{
    activity_to_segments, pooled_der, postprocess, speaker_names, tune_postprocess, Activity, DevMeeting, PostConfig,
    TuneResult, THRESHOLD_GRID, WINDOW_GRID,
};

use crate::embedder::{feature_stats, student_embed, Student, Teacher};
use crate::error::{Error, Result};
use crate::eval::SegmentList;
use crate::features::{FeatureConfig, FeatureExtractor, FeatureMatrix, Waveform};
use crate::numerics::{rng_for, sigmoid, Adam, AdamConfig, Checkpoint, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::training::{
    adam_arrays, adam_from_checkpoint, batch_gradients, config_json, meta_json, parse_config, run_steps_scheduled,
    History, LrSchedule, TrainMeta, TrainOptions,
};

pub const EEND_KIND: &str = "eend";
pub const PROBS_KIND: &str = "probabilities";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    Filterbank,
    Student,
    TeacherPreTap,
}

impl std::fmt::Display for FrontendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrontendKind::Filterbank => "filterbank",
            FrontendKind::Student => "student",
            FrontendKind::TeacherPreTap => "teacher_pre_tap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EendConfig {
    pub frontend: FrontendKind,
    /// Feature settings of the filterbank frontend.
    pub features: FeatureConfig,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    /// Maximum number of speakers K.
    pub speakers: usize,
    /// Frontend frames averaged into one attention frame.
    pub subsample: usize,
    pub post: PostConfig,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub chunk_s: f64,
    pub seed: u64,
}

impl Default for EendConfig {
    fn default() -> Self {
        EendConfig {
            frontend: FrontendKind::Student,
            features: FeatureConfig::default(),
            layers: 2,
            heads: 4,
            dim: 64,
            ff_dim: 128,
            speakers: 4,
            subsample: 10,
            post: PostConfig::default(),
            optimizer: AdamConfig::with_lr(1e-3),
            schedule: LrSchedule {
                warmup_steps: 50,
                final_fraction: 0.05,
            },
            steps: 300,
            batch_size: 4,
            chunk_s: 60.0,
            seed: 0,
        }
    }
}

impl EendConfig {
    pub fn validate(&self) -> Result<()> {
        self.post.validate()?;
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.speakers == 0 || self.subsample == 0 || self.ff_dim == 0 {
            return Err(Error::Config("speakers, subsample and ff_dim must be positive".into()));
        }
        if self.chunk_s <= 0.0 {
            return Err(Error::Config(format!("chunk length {} must be positive", self.chunk_s)));
        }
        Ok(())
    }
}

/// Produces the frame-level inputs of the diarization head. Model-backed
/// frontends are only ever run in inference mode.
pub enum Frontend {
    Filterbank(FeatureConfig),
    Student(Student),
    TeacherPreTap(Teacher),
}

impl Frontend {
    pub fn kind(&self) -> FrontendKind {
        match self {
            Frontend::Filterbank(_) => FrontendKind::Filterbank,
            Frontend::Student(_) => FrontendKind::Student,
            Frontend::TeacherPreTap(_) => FrontendKind::TeacherPreTap,
        }
    }

    /// Loads the frontend named by `kind`; model kinds need a checkpoint.
    pub fn load(kind: FrontendKind, checkpoint: Option<&Path>, features: FeatureConfig) -> Result<Self> {
        let need = || Error::Config(format!("the {kind} frontend needs a checkpoint"));
        Ok(match kind {
            FrontendKind::Filterbank => Frontend::Filterbank(features),
            FrontendKind::Student => Frontend::Student(Student::load(checkpoint.ok_or_else(need)?)?),
            FrontendKind::TeacherPreTap => Frontend::TeacherPreTap(Teacher::load(checkpoint.ok_or_else(need)?)?),
        })
    }

    pub fn features(&self) -> FeatureConfig {
        match self {
            Frontend::Filterbank(f) => *f,
            Frontend::Student(s) => s.config.features,
            Frontend::TeacherPreTap(t) => t.config.features,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Frontend::Filterbank(f) => f.mel_bins,
            Frontend::Student(s) => s.config.encoder.embedding_dim,
            Frontend::TeacherPreTap(t) => t.config.encoder.embedding_dim,
        }
    }

    fn stride(&self) -> usize {
        match self {
            Frontend::Filterbank(_) => 1,
            Frontend::Student(s) => s.config.encoder.stride,
            Frontend::TeacherPreTap(t) => t.config.encoder.stride,
        }
    }

    pub fn frame_shift(&self) -> f64 {
        self.features().frame_shift * self.stride() as f64
    }

    pub fn apply(&self, feats: &FeatureMatrix) -> Result<Tensor> {
        match self {
            Frontend::Filterbank(_) => Ok(feats.values.clone()),
            Frontend::Student(s) => Ok(student_embed(feats, s)?.values),
            Frontend::TeacherPreTap(t) => t.frames(&feats.values),
        }
    }

    /// Features and frontend output of a waveform.
    pub fn process(&self, wave: &Waveform) -> Result<(FeatureMatrix, Tensor)> {
        let feats = FeatureExtractor::new(self.features())?.extract(wave)?;
        if feats.frames() == 0 {
            return Err(Error::Data(format!("{:.4} s of audio is shorter than one frame", wave.duration())));
        }
        let out = self.apply(&feats)?;
        Ok((feats, out))
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    qkv: Dense,
    out: Dense,
    norm1: Affine,
    ff1: Dense,
    ff2: Dense,
    norm2: Affine,
}

/// Frozen standardisation, input projection, post-norm transformer layers
/// without positional encoding, and a K-way sigmoid classifier.
pub struct Eend {
    pub config: EendConfig,
    pub input_dim: usize,
    pub store: ParamStore,
    input_mean: ParamId,
    input_scale: ParamId,
    input: Dense,
    input_norm: Affine,
    layers: Vec<Layer>,
    head: Dense,
}

fn dense(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut crate::numerics::Rng) -> Dense {
    Dense {
        w: store.add_he_uniform(format!("{name}.w"), &[i, o], i, rng),
        b: store.add_zeros(format!("{name}.b"), &[o]),
    }
}

fn affine(store: &mut ParamStore, name: &str, c: usize) -> Affine {
    Affine {
        gain: store.add_ones(format!("{name}.gain"), &[c]),
        bias: store.add_zeros(format!("{name}.bias"), &[c]),
    }
}

impl Eend {
    pub fn new(config: EendConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("eend input dimension must be positive".into()));
        }
        let mut rng = rng_for(config.seed, 0xEE2D);
        let mut store = ParamStore::new();
        let input_mean = store.add_zeros("input.mean", &[input_dim]);
        let input_scale = store.add_ones("input.scale", &[input_dim]);
        store.set_trainable(input_mean, false);
        store.set_trainable(input_scale, false);
        let d = config.dim;
        let input = dense(&mut store, "in", input_dim, d, &mut rng);
        let input_norm = affine(&mut store, "in_norm", d);
        let layers = (0..config.layers)
            .map(|l| Layer {
                qkv: dense(&mut store, &format!("layer{l}.qkv"), d, 3 * d, &mut rng),
                out: dense(&mut store, &format!("layer{l}.out"), d, d, &mut rng),
                norm1: affine(&mut store, &format!("layer{l}.norm1"), d),
                ff1: dense(&mut store, &format!("layer{l}.ff1"), d, config.ff_dim, &mut rng),
                ff2: dense(&mut store, &format!("layer{l}.ff2"), config.ff_dim, d, &mut rng),
                norm2: affine(&mut store, &format!("layer{l}.norm2"), d),
            })
            .collect();
        let head = dense(&mut store, "head", d, config.speakers, &mut rng);
        Ok(Eend {
            config,
            input_dim,
            store,
            input_mean,
            input_scale,
            input,
            input_norm,
            layers,
            head,
        })
    }

    pub fn speakers(&self) -> usize {
        self.config.speakers
    }

    /// Output frame shift for a frontend running at `frontend_shift`.
    pub fn frame_shift(&self, frontend_shift: f64) -> f64 {
        frontend_shift * self.config.subsample as f64
    }

    pub fn set_input_stats(&mut self, mean: &[f64], std: &[f64]) {
        *self.store.value_mut(self.input_mean) = Tensor::vector(mean.iter().map(|m| -m).collect());
        *self.store.value_mut(self.input_scale) = Tensor::vector(std.iter().map(|s| 1.0 / s).collect());
    }

    fn dense(g: &mut Graph, x: NodeId, d: Dense) -> Result<NodeId> {
        let (w, b) = (g.param(d.w), g.param(d.b));
        g.linear(x, w, Some(b))
    }

    fn norm(g: &mut Graph, x: NodeId, a: Affine) -> Result<NodeId> {
        let y = g.layer_norm_rows(x, 1e-5)?;
        let (gain, bias) = (g.param(a.gain), g.param(a.bias));
        let y = g.mul_cols(y, gain)?;
        g.add_bias(y, bias)
    }

    /// `[T, input_dim]` frontend frames to `[ceil(T / subsample), K]` logits.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.check_input(g.shape(x))?;
        let x = g.group_mean(x, self.config.subsample)?;
        self.forward_pooled(g, x)
    }

    fn check_input(&self, s: &[usize]) -> Result<()> {
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::shape(
                "eend_forward",
                format!("{} frontend produced {:?}, model expects {} columns", self.config.frontend, s, self.input_dim),
            ));
        }
        if s[0] == 0 {
            return Err(Error::InvalidArgument("eend input has no frames".into()));
        }
        Ok(())
    }

    /// As [`Eend::forward`] for inputs already averaged over `subsample` frames.
    pub fn forward_pooled(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.check_input(g.shape(x))?;
        let (m, sc) = (g.param(self.input_mean), g.param(self.input_scale));
        let x = g.add_bias(x, m)?;
        let x = g.mul_cols(x, sc)?;
        let x = Self::dense(g, x, self.input)?;
        let mut h = Self::norm(g, x, self.input_norm)?;
        let d = self.config.dim;
        for l in &self.layers {
            let qkv = Self::dense(g, h, l.qkv)?;
            let q = g.slice_cols(qkv, 0, d)?;
            let k = g.slice_cols(qkv, d, d)?;
            let v = g.slice_cols(qkv, 2 * d, d)?;
            let a = g.attention(q, k, v, self.config.heads)?;
            let a = Self::dense(g, a, l.out)?;
            let r = g.add(h, a)?;
            h = Self::norm(g, r, l.norm1)?;
            let f = Self::dense(g, h, l.ff1)?;
            let f = g.relu(f);
            let f = Self::dense(g, f, l.ff2)?;
            let r = g.add(h, f)?;
            h = Self::norm(g, r, l.norm2)?;
        }
        Self::dense(g, h, self.head)
    }

    /// Activity probabilities `[T', K]`.
    pub fn probabilities(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(inputs.clone());
        let z = self.forward(&mut g, x)?;
        Ok(g.value(z).map(sigmoid))
    }

    fn checkpoint(&self, store: &ParamStore, adam: Option<&Adam>, step: usize, history: &History) -> Checkpoint {
        let mut ck = Checkpoint::new(EEND_KIND, config_json(&self.config)).with_params("", store);
        if let Some(a) = adam {
            ck.arrays.extend(adam_arrays(a, store));
        }
        ck.meta_json = meta_json(step, history, serde_json::json!({ "input_dim": self.input_dim }));
        ck
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.checkpoint(&self.store, None, 0, &History::default())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: EendConfig = parse_config(ck, EEND_KIND, None)?;
        let meta = TrainMeta::from_checkpoint(ck)?;
        let dim = meta.extra["input_dim"]
            .as_u64()
            .ok_or_else(|| Error::Format("eend checkpoint lacks input_dim".into()))?;
        let mut m = Eend::new(config, dim as usize)?;
        m.store.load_from(&ck.params(""))?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

/// Probabilities `[T', K]` from frontend frames.
pub fn eend_forward(inputs: &Tensor, model: &Eend) -> Result<Tensor> {
    model.probabilities(inputs)
}

/// Means over consecutive groups of `group` rows; the last group may be short.
pub fn pool_frames(x: &Tensor, group: usize) -> Tensor {
    let (t, c) = (x.rows(), x.cols());
    let n = t.div_ceil(group.max(1));
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let (lo, hi) = (i * group, ((i + 1) * group).min(t));
        let row = out.row_mut(i);
        for r in lo..hi {
            for (o, v) in row.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        for o in row.iter_mut() {
            *o /= (hi - lo) as f64;
        }
    }
    out
}

/// Pooled frontend output of one meeting with its reference.
#[derive(Debug, Clone)]
pub struct EendExample {
    pub id: String,
    /// `[T', D]` at the head's frame rate.
    pub inputs: Tensor,
    pub frame_shift: f64,
    pub reference: SegmentList,
}

/// Runs the (frozen) frontend over every meeting once and pools its output
/// to the head's frame rate.
pub fn prepare_examples(
    meetings: &[(String, Waveform, SegmentList)],
    frontend: &Frontend,
    subsample: usize,
) -> Result<Vec<EendExample>> {
    meetings
        .iter()
        .map(|(id, wave, reference)| {
            Ok(EendExample {
                id: id.clone(),
                inputs: pool_frames(&frontend.process(wave)?.1, subsample),
                frame_shift: frontend.frame_shift() * subsample as f64,
                reference: reference.clone(),
            })
        })
        .collect()
}

/// Reference activity `[n, speakers]` for the frames of `[start_s, ...)` at
/// `frame_s`; a frame is active when its centre lies inside a segment.
pub fn reference_activity(reference: &SegmentList, speakers: &[String], start_s: f64, frame_s: f64, n: usize) -> Tensor {
    let w = reference.window(start_s, start_s + n as f64 * frame_s);
    let rows = w.to_frames(frame_s, n, speakers);
    Tensor::matrix(
        n,
        speakers.len(),
        rows.iter().flatten().map(|&b| b as u8 as f64).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct EendReport {
    pub history: History,
}

/// Trains on random chunks of `chunk_s` seconds with PIT-BCE. Frontend
/// outputs are precomputed so the frontend cannot change.
pub fn train_eend(
    examples: &[EendExample],
    config: &EendConfig,
    opts: &TrainOptions,
    resume: Option<&Checkpoint>,
) -> Result<(Eend, EendReport)> {
    let first = examples.first().ok_or_else(|| Error::Data("no training meetings".into()))?;
    let dim = first.inputs.cols();
    let mut speakers = Vec::with_capacity(examples.len());
    for e in examples {
        if e.inputs.cols() != dim || e.inputs.rows() == 0 {
            return Err(Error::Data(format!("meeting {}: inconsistent frontend output", e.id)));
        }
        let s = e.reference.speakers();
        if s.len() > config.speakers {
            return Err(Error::Data(format!(
                "meeting {} has {} speakers, model predicts {}",
                e.id,
                s.len(),
                config.speakers
            )));
        }
        speakers.push(s);
    }
    let mut model = Eend::new(config.clone(), dim)?;
    let (mut adam, start, mut history) = match resume {
        Some(ck) => {
            let meta = TrainMeta::from_checkpoint(ck)?;
            model.store.load_from(&ck.params(""))?;
            (adam_from_checkpoint(ck, &model.store, config.optimizer, meta.step as u64), meta.step, meta.history)
        }
        None => {
            let (m, s) = feature_stats(examples.iter().map(|e| &e.inputs), dim);
            model.set_input_stats(&m, &s);
            (Adam::new(config.optimizer, &model.store), 0, History::default())
        }
    };
    let b = config.batch_size.max(1);
    let mut store = std::mem::take(&mut model.store);
    {
        let m = &model;
        run_steps_scheduled(
            &mut store,
            &mut adam,
            start,
            config.steps,
            config.schedule,
            opts,
            &mut history,
            |params, step| {
                let mut rng = rng_for(config.seed, step as u64 + 1);
                let batch: Vec<(Tensor, Tensor)> = (0..b)
                    .map(|_| {
                        let i = rng.gen_range(0..examples.len());
                        let e = &examples[i];
                        let t = e.inputs.rows();
                        let want = ((config.chunk_s / e.frame_shift).round() as usize).max(1);
                        let (s, len) = if t <= want { (0, t) } else { (rng.gen_range(0..=t - want), want) };
                        let x = e.inputs.slice_rows(s, s + len);
                        let y = reference_activity(&e.reference, &speakers[i], s as f64 * e.frame_shift, e.frame_shift, len);
                        (x, y)
                    })
                    .collect();
                let (grads, loss, switched) = batch_gradients(params, &batch, opts.jobs, |g, (x, y)| {
                    let x = g.input(x.clone());
                    let z = m.forward_pooled(g, x)?;
                    let (l, perm) = pit_bce_with_logits(g, z, y)?;
                    let moved = perm.iter().enumerate().any(|(a, &p)| a != p);
                    Ok((g.scale(l, 1.0 / b as f64), moved as u8 as f64))
                })?;
                Ok((grads, loss, switched.iter().sum::<f64>() / b as f64))
            },
            |params, adam, step, hist| m.checkpoint(params, Some(adam), step, hist),
        )?;
    }
    model.store = store;
    Ok((model, EendReport { history }))
}

/// Probabilities and their frame shift for a waveform.
pub fn meeting_probabilities(meeting: &Waveform, frontend: &Frontend, model: &Eend) -> Result<(Tensor, f64)> {
    if frontend.kind() != model.config.frontend {
        return Err(Error::Config(format!(
            "model was trained on the {} frontend, got {}",
            model.config.frontend,
            frontend.kind()
        )));
    }
    let (_, inputs) = frontend.process(meeting)?;
    Ok((model.probabilities(&inputs)?, model.frame_shift(frontend.frame_shift())))
}

/// Features, frontend, head, post-processing and conversion to segments.
pub fn diarize(meeting: &Waveform, frontend: &Frontend, model: &Eend, post: &PostConfig) -> Result<SegmentList> {
    post.validate()?;
    let (probs, fs) = meeting_probabilities(meeting, frontend, model)?;
    Ok(segments_from_probabilities(&probs, fs, post, meeting.duration()))
}

/// Post-processes probabilities and clips the segments to `duration` seconds.
pub fn segments_from_probabilities(probs: &Tensor, frame_s: f64, post: &PostConfig, duration: f64) -> SegmentList {
    let segs = activity_to_segments(&postprocess(probs, post), frame_s, probs.cols());
    segs.window(0.0, duration)
}

/// Stores a probability matrix in the checkpoint container.
pub fn save_probabilities(path: &Path, probs: &Tensor, frame_s: f64) -> Result<()> {
    let mut ck = Checkpoint::new(PROBS_KIND, serde_json::json!({ "frame_shift": frame_s }).to_string());
    ck.arrays.push(("probs".into(), probs.clone()));
    ck.save(path)
}

pub fn load_probabilities(path: &Path) -> Result<(Tensor, f64)> {
    let ck = Checkpoint::load(path)?;
    let cfg: serde_json::Value = parse_config(&ck, PROBS_KIND, Some(path))?;
    let fs = cfg["frame_shift"]
        .as_f64()
        .ok_or_else(|| Error::Format(format!("{}: missing frame_shift", path.display())))?;
    let p = ck.array("probs").ok_or_else(|| Error::Format(format!("{}: missing probs", path.display())))?;
    Ok((p.clone(), fs))
}
