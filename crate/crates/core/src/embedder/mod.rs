//! Teacher d-vector extractor (residual encoder, global average pooling,
//! angular-margin classifier) and the frame-wise student trained to
//! reproduce the teacher's d-vector at every frame.

mod encoder;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use encoder::{feature_stats, Encoder, EncoderConfig, EncoderKind, NormKind};

use crate::error::{Error, Result};
use crate::eval::{csv_err, Extractor};
use crate::features::{FeatureConfig, FeatureExtractor, FeatureMatrix, Waveform};
use crate::numerics::linalg::normalized;
use crate::numerics::{rng_for, Adam, AdamConfig, Checkpoint, Graph, NodeId, ParamId, ParamStore, Rng, Tensor};
use crate::simulate::{read_jsonl, resolve, UtteranceEntry};
use crate::training::{
    adam_arrays, adam_from_checkpoint, batch_gradients, config_json, meta_json, parse_config, run_steps, History,
    TrainMeta, TrainOptions,
};

/// Length-E speaker embedding.
pub type DVector = Vec<f64>;

/// Frame-wise embeddings `[T, E]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub values: Tensor,
    pub frame_shift: f64,
}

impl EmbeddingSequence {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    /// Time average, length-normalised.
    pub fn pooled(&self) -> DVector {
        let (t, e) = (self.values.rows(), self.values.cols());
        let mut m = vec![0.0; e];
        for i in 0..t {
            for (a, b) in m.iter_mut().zip(self.values.row(i)) {
                *a += b;
            }
        }
        normalized(&m)
    }

    /// CSV with columns `t, e0, e1, ...`; `t` in seconds.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["t".to_string()];
        header.extend((0..self.values.cols()).map(|j| format!("e{j}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for t in 0..self.values.rows() {
            let mut row = vec![format!("{:.3}", t as f64 * self.frame_shift)];
            row.extend(self.values.row(t).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| crate::Error::io(path, e))
    }
}

/// Features of one utterance with its roster label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub id: String,
    pub speaker: String,
    pub label: usize,
    pub feats: Tensor,
}

/// Speaker roster (sorted) and labelled features.
pub fn label_utterances(items: Vec<(String, String, Tensor)>) -> (Vec<LabeledFeatures>, Vec<String>) {
    let mut speakers: Vec<String> = items.iter().map(|(_, s, _)| s.clone()).collect();
    speakers.sort();
    speakers.dedup();
    let data = items
        .into_iter()
        .map(|(id, speaker, feats)| LabeledFeatures {
            label: speakers.binary_search(&speaker).unwrap(),
            id,
            speaker,
            feats,
        })
        .collect();
    (data, speakers)
}

/// Reads an utterance manifest and extracts features for every entry.
pub fn load_dataset(manifest: &Path, fx: &FeatureExtractor) -> Result<(Vec<LabeledFeatures>, Vec<String>)> {
    let entries: Vec<UtteranceEntry> = read_jsonl(manifest)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: empty dataset", manifest.display())));
    }
    let mut items = Vec::with_capacity(entries.len());
    for e in entries {
        let w = Waveform::read_wav(&resolve(manifest, &e.wav_path))?;
        items.push((e.id, e.speaker, fx.extract(&w)?.values));
    }
    Ok(label_utterances(items))
}

fn crop(feats: &Tensor, frames: usize, rng: &mut Rng) -> Tensor {
    if frames == 0 || feats.rows() <= frames {
        return feats.clone();
    }
    let s = rng.gen_range(0..=feats.rows() - frames);
    feats.slice_rows(s, s + frames)
}

// ---- losses ------------------------------------------------------------

/// Additive angular margin softmax. `dvecs: [B, E]` (unit rows),
/// `weights: [C, E]` (normalised here). Mean over the batch.
pub fn aam_softmax_loss(
    g: &mut Graph,
    dvecs: NodeId,
    labels: &[usize],
    weights: NodeId,
    margin: f64,
    scale: f64,
) -> Result<NodeId> {
    let wn = g.l2_normalize_rows(weights, 1e-12)?;
    let cos = g.matmul_t(dvecs, wn)?;
    let logits = g.angular_margin(cos, labels, margin, scale)?;
    g.cross_entropy(logits, labels)
}

/// Mean squared error between every frame of `seq: [T, E]` and `target`.
pub fn similarity_loss(g: &mut Graph, seq: NodeId, target: &[f64]) -> Result<NodeId> {
    let s = g.shape(seq).to_vec();
    if s.len() != 2 || s[1] != target.len() {
        return Err(Error::shape("similarity_loss", format!("sequence {:?} vs target of {}", s, target.len())));
    }
    if s[0] == 0 {
        return Err(Error::InvalidArgument("similarity loss of an empty sequence".into()));
    }
    let tiled: Vec<f64> = (0..s[0]).flat_map(|_| target.iter().copied()).collect();
    g.mse(seq, &Tensor::matrix(s[0], s[1], tiled))
}

// ---- teacher -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub margin: f64,
    pub scale: f64,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Training crop length in feature frames (0 = whole utterance).
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            features: FeatureConfig::default(),
            encoder: EncoderConfig::default(),
            margin: 0.2,
            scale: 30.0,
            optimizer: AdamConfig::with_lr(1e-3),
            steps: 200,
            batch_size: 16,
            crop_frames: 200,
            seed: 0,
        }
    }
}

pub struct Teacher {
    pub config: TeacherConfig,
    pub speakers: Vec<String>,
    pub store: ParamStore,
    pub encoder: Encoder,
    weight: ParamId,
}

pub const TEACHER_KIND: &str = "teacher";
pub const STUDENT_KIND: &str = "student";

impl Teacher {
    pub fn new(config: TeacherConfig, speakers: Vec<String>) -> Result<Self> {
        if speakers.len() < 2 {
            return Err(Error::Data("teacher training needs at least two speakers".into()));
        }
        let mut rng = rng_for(config.seed, 0x7EAC);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, "encoder.", &config.encoder, &mut rng)?;
        let e = config.encoder.embedding_dim;
        let weight = store.add_he_uniform("aam.weight", &[speakers.len(), e], e, &mut rng);
        Ok(Teacher {
            config,
            speakers,
            store,
            encoder,
            weight,
        })
    }

    /// Frame activations before pooling, `[T', E]`.
    pub fn frames(&self, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(feats.clone());
        let y = self.encoder.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn embed(&self, feats: &Tensor) -> Result<DVector> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(feats.clone());
        let d = self.dvector_node(&mut g, x)?;
        Ok(g.value(d).data().to_vec())
    }

    fn dvector_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.encoder.forward(g, x)?;
        let m = g.mean_rows(h)?;
        g.l2_normalize_rows(m, 1e-12)
    }

    /// Cosine between a d-vector and every class weight.
    pub fn class_scores(&self, d: &[f64]) -> Vec<f64> {
        let w = self.store.value(self.weight);
        (0..w.rows()).map(|c| crate::numerics::linalg::cosine(d, w.row(c))).collect()
    }

    /// Fraction of utterances whose nearest class weight is the true speaker.
    pub fn accuracy(&self, data: &[LabeledFeatures]) -> Result<f64> {
        let mut ok = 0;
        for u in data {
            let s = self.class_scores(&self.embed(&u.feats)?);
            let arg = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            ok += (arg == u.label) as usize;
        }
        Ok(ok as f64 / data.len().max(1) as f64)
    }

    fn checkpoint(&self, adam: Option<&Adam>, step: usize, history: &History) -> Checkpoint {
        let mut ck = Checkpoint::new(TEACHER_KIND, config_json(&self.config)).with_params("", &self.store);
        if let Some(a) = adam {
            ck.arrays.extend(adam_arrays(a, &self.store));
        }
        ck.meta_json = meta_json(step, history, serde_json::json!({ "speakers": self.speakers }));
        ck
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.checkpoint(None, 0, &History::default())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TeacherConfig = parse_config(ck, TEACHER_KIND, None)?;
        let meta = TrainMeta::from_checkpoint(ck)?;
        let speakers: Vec<String> = serde_json::from_value(meta.extra["speakers"].clone())
            .map_err(|e| Error::Format(format!("teacher speakers: {e}")))?;
        let mut t = Teacher::new(config, speakers)?;
        t.store.load_from(&ck.params(""))?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

/// Temporal average pooling of `[T, E]` frames, length-normalised.
pub fn tap(frames: &Tensor) -> DVector {
    EmbeddingSequence {
        values: frames.clone(),
        frame_shift: 0.0,
    }
    .pooled()
}

/// Global average of encoder frames, length-normalised.
pub fn teacher_embed(features: &FeatureMatrix, model: &Teacher) -> Result<DVector> {
    model.embed(&features.values)
}

#[derive(Debug, Clone)]
pub struct TeacherReport {
    pub history: History,
    /// Classification accuracy on the (uncropped) training utterances.
    pub train_accuracy: f64,
}

/// Trains a teacher with AAM-softmax on random crops. When `resume` is given
/// the parameters, optimiser state and step counter continue from it.
pub fn train_teacher(
    data: &[LabeledFeatures],
    speakers: &[String],
    config: &TeacherConfig,
    opts: &TrainOptions,
    resume: Option<&Checkpoint>,
) -> Result<(Teacher, TeacherReport)> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut model = Teacher::new(config.clone(), speakers.to_vec())?;
    let (mut adam, start, mut history) = match resume {
        Some(ck) => {
            let meta = TrainMeta::from_checkpoint(ck)?;
            model.store.load_from(&ck.params(""))?;
            (adam_from_checkpoint(ck, &model.store, config.optimizer, meta.step as u64), meta.step, meta.history)
        }
        None => {
            let (m, s) = feature_stats(data.iter().map(|u| &u.feats), config.encoder.input_dim);
            model.encoder.set_input_stats(&mut model.store, &m, &s);
            (Adam::new(config.optimizer, &model.store), 0, History::default())
        }
    };
    let b = config.batch_size.max(1);
    let mut store = std::mem::take(&mut model.store);
    {
        let m = &model;
        run_steps(
            &mut store,
            &mut adam,
            start,
            config.steps,
            opts,
            &mut history,
            |params, step| {
                let mut rng = rng_for(config.seed, step as u64 + 1);
                let batch: Vec<(Tensor, usize)> = (0..b)
                    .map(|_| {
                        let u = &data[rng.gen_range(0..data.len())];
                        (crop(&u.feats, config.crop_frames, &mut rng), u.label)
                    })
                    .collect();
                let (grads, loss, correct) = batch_gradients(params, &batch, opts.jobs, |g, (x, y)| {
                    let x = g.input(x.clone());
                    let d = m.dvector_node(g, x)?;
                    let w = g.param(m.weight);
                    let l = aam_softmax_loss(g, d, &[*y], w, config.margin, config.scale)?;
                    let wn = g.value(w).clone();
                    let dv = g.value(d).data().to_vec();
                    let s: Vec<f64> = (0..wn.rows()).map(|c| crate::numerics::linalg::cosine(&dv, wn.row(c))).collect();
                    let arg = (0..s.len()).max_by(|&a, &c| s[a].total_cmp(&s[c])).unwrap();
                    Ok((g.scale(l, 1.0 / b as f64), (arg == *y) as usize))
                })?;
                Ok((grads, loss, correct.iter().sum::<usize>() as f64 / b as f64))
            },
            |params, adam, step, hist| {
                let t = Teacher {
                    config: m.config.clone(),
                    speakers: m.speakers.clone(),
                    store: params.clone(),
                    encoder: m.encoder.clone(),
                    weight: m.weight,
                };
                t.checkpoint(Some(adam), step, hist)
            },
        )?;
    }
    model.store = store;
    let train_accuracy = model.accuracy(data)?;
    Ok((
        model,
        TeacherReport {
            history,
            train_accuracy,
        },
    ))
}

// ---- student -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    SameUtterance,
    SameSpeakerOtherUtterance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    /// Odd window of the sliding average over encoder frames.
    pub local_tap: usize,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub target: TargetMode,
    /// Start from the teacher's encoder weights instead of a random init.
    pub init_from_teacher: bool,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            features: FeatureConfig::default(),
            encoder: EncoderConfig::default(),
            local_tap: 11,
            optimizer: AdamConfig::with_lr(1e-4),
            steps: 200,
            batch_size: 16,
            crop_frames: 200,
            target: TargetMode::SameUtterance,
            init_from_teacher: false,
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.local_tap == 0 || self.local_tap % 2 == 0 {
            return Err(Error::Config(format!("local TAP window {} must be odd", self.local_tap)));
        }
        Ok(())
    }
}

pub struct Student {
    pub config: StudentConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
}

impl Student {
    pub fn new(config: StudentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, 0x57D);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, "encoder.", &config.encoder, &mut rng)?;
        Ok(Student { config, store, encoder })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.embedding_dim
    }

    fn sequence_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.encoder.forward(g, x)?;
        g.sliding_mean(h, self.config.local_tap)
    }

    /// Encoder frames before the local average.
    pub fn raw_frames(&self, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(feats.clone());
        let y = self.encoder.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn embed_frames(&self, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(feats.clone());
        let y = self.sequence_node(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Time average of the frame embeddings, length-normalised.
    pub fn dvector(&self, feats: &Tensor) -> Result<DVector> {
        Ok(EmbeddingSequence {
            values: self.embed_frames(feats)?,
            frame_shift: 0.0,
        }
        .pooled())
    }

    fn checkpoint(&self, adam: Option<&Adam>, step: usize, history: &History, fallbacks: usize) -> Checkpoint {
        let mut ck = Checkpoint::new(STUDENT_KIND, config_json(&self.config)).with_params("", &self.store);
        if let Some(a) = adam {
            ck.arrays.extend(adam_arrays(a, &self.store));
        }
        ck.meta_json = meta_json(step, history, serde_json::json!({ "target_fallbacks": fallbacks }));
        ck
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.checkpoint(None, 0, &History::default(), 0)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: StudentConfig = parse_config(ck, STUDENT_KIND, None)?;
        let mut s = Student::new(config)?;
        s.store.load_from(&ck.params(""))?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

/// Encoder frames smoothed by the local average (truncated at the edges).
pub fn student_embed(features: &FeatureMatrix, model: &Student) -> Result<EmbeddingSequence> {
    Ok(EmbeddingSequence {
        values: model.embed_frames(&features.values)?,
        frame_shift: features.frame_shift * model.config.encoder.stride as f64,
    })
}

/// Precomputed teacher d-vectors of a training set.
#[derive(Debug, Clone)]
pub struct TargetRoster {
    pub dvectors: Vec<DVector>,
    by_speaker: BTreeMap<usize, Vec<usize>>,
    labels: Vec<usize>,
    /// Times the other-utterance mode fell back to the same utterance.
    pub fallbacks: usize,
}

impl TargetRoster {
    pub fn new(dvectors: Vec<DVector>, labels: Vec<usize>) -> Self {
        let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_speaker.entry(l).or_default().push(i);
        }
        TargetRoster {
            dvectors,
            by_speaker,
            labels,
            fallbacks: 0,
        }
    }

    pub fn build(teacher: &Teacher, data: &[LabeledFeatures]) -> Result<Self> {
        let dv = data.iter().map(|u| teacher.embed(&u.feats)).collect::<Result<Vec<_>>>()?;
        Ok(Self::new(dv, data.iter().map(|u| u.label).collect()))
    }

    /// Index of the target d-vector for utterance `utt`.
    pub fn select(&mut self, utt: usize, mode: TargetMode, rng: &mut Rng) -> usize {
        match mode {
            TargetMode::SameUtterance => utt,
            TargetMode::SameSpeakerOtherUtterance => {
                let sib = &self.by_speaker[&self.labels[utt]];
                if sib.len() < 2 {
                    self.fallbacks += 1;
                    log::warn!("utterance {utt} has no sibling; using its own d-vector");
                    return utt;
                }
                let k = rng.gen_range(0..sib.len() - 1);
                let pos = sib.iter().position(|&i| i == utt).unwrap();
                sib[if k >= pos { k + 1 } else { k }]
            }
        }
    }
}

/// Target d-vector for `utt` under `mode`.
pub fn select_target(utt: usize, roster: &mut TargetRoster, mode: TargetMode, rng: &mut Rng) -> DVector {
    let i = roster.select(utt, mode, rng);
    roster.dvectors[i].clone()
}

#[derive(Debug, Clone)]
pub struct StudentReport {
    pub history: History,
    pub target_fallbacks: usize,
}

/// Trains a student to reproduce frozen teacher d-vectors frame by frame.
pub fn train_student(
    data: &[LabeledFeatures],
    teacher: &Teacher,
    config: &StudentConfig,
    opts: &TrainOptions,
    resume: Option<&Checkpoint>,
) -> Result<(Student, StudentReport)> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if teacher.config.features != config.features {
        return Err(Error::Config("student and teacher feature settings differ".into()));
    }
    let mut roster = TargetRoster::build(teacher, data)?;
    let mut model = Student::new(config.clone())?;
    let (mut adam, start, mut history) = match resume {
        Some(ck) => {
            let meta = TrainMeta::from_checkpoint(ck)?;
            model.store.load_from(&ck.params(""))?;
            (adam_from_checkpoint(ck, &model.store, config.optimizer, meta.step as u64), meta.step, meta.history)
        }
        None => {
            if config.init_from_teacher {
                if config.encoder != teacher.config.encoder {
                    return Err(Error::Config("init_from_teacher needs identical encoder settings".into()));
                }
                let mut src = ParamStore::new();
                for (_, p) in teacher.store.iter().filter(|(_, p)| p.name.starts_with("encoder.")) {
                    src.add(p.name.clone(), p.value.clone());
                }
                model.store.load_from(&src)?;
            } else {
                let (m, s) = feature_stats(data.iter().map(|u| &u.feats), config.encoder.input_dim);
                model.encoder.set_input_stats(&mut model.store, &m, &s);
            }
            (Adam::new(config.optimizer, &model.store), 0, History::default())
        }
    };
    let b = config.batch_size.max(1);
    let mut store = std::mem::take(&mut model.store);
    {
        let m = &model;
        let roster = &mut roster;
        run_steps(
            &mut store,
            &mut adam,
            start,
            config.steps,
            opts,
            &mut history,
            |params, step| {
                let mut rng = rng_for(config.seed, step as u64 + 1);
                let batch: Vec<(Tensor, DVector)> = (0..b)
                    .map(|_| {
                        let i = rng.gen_range(0..data.len());
                        let x = crop(&data[i].feats, config.crop_frames, &mut rng);
                        (x, select_target(i, roster, config.target, &mut rng))
                    })
                    .collect();
                let (grads, loss, _) = batch_gradients(params, &batch, opts.jobs, |g, (x, d)| {
                    let x = g.input(x.clone());
                    let seq = m.sequence_node(g, x)?;
                    let l = similarity_loss(g, seq, d)?;
                    Ok((g.scale(l, 1.0 / b as f64), ()))
                })?;
                Ok((grads, loss, 0.0))
            },
            |params, adam, step, hist| {
                Student {
                    config: m.config.clone(),
                    store: params.clone(),
                    encoder: m.encoder.clone(),
                }
                .checkpoint(Some(adam), step, hist, 0)
            },
        )?;
    }
    model.store = store;
    Ok((
        model,
        StudentReport {
            history,
            target_fallbacks: roster.fallbacks,
        },
    ))
}

// ---- extractors --------------------------------------------------------

/// Teacher d-vectors from audio.
pub struct TeacherExtractor<'a> {
    pub model: &'a Teacher,
    pub features: FeatureExtractor,
}

impl<'a> TeacherExtractor<'a> {
    pub fn new(model: &'a Teacher) -> Result<Self> {
        Ok(TeacherExtractor {
            features: FeatureExtractor::new(model.config.features)?,
            model,
        })
    }
}

impl Extractor for TeacherExtractor<'_> {
    fn embed(&self, wave: &Waveform) -> Result<Vec<f64>> {
        self.model.embed(&self.features.extract(wave)?.values)
    }
}

/// Pooled student embeddings from audio.
pub struct StudentExtractor<'a> {
    pub model: &'a Student,
    pub features: FeatureExtractor,
}

impl<'a> StudentExtractor<'a> {
    pub fn new(model: &'a Student) -> Result<Self> {
        Ok(StudentExtractor {
            features: FeatureExtractor::new(model.config.features)?,
            model,
        })
    }
}

impl Extractor for StudentExtractor<'_> {
    fn embed(&self, wave: &Waveform) -> Result<Vec<f64>> {
        self.model.dvector(&self.features.extract(wave)?.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn loss_value(f: impl FnOnce(&mut Graph) -> NodeId) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = f(&mut g);
        g.value(l).item()
    }

    #[test]
    fn aam_closed_form() {
        let l = loss_value(|g| {
            let d = g.input(Tensor::matrix(1, 2, vec![1.0, 0.0]));
            let w = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
            aam_softmax_loss(g, d, &[0], w, 0.2, 30.0).unwrap()
        });
        let a = (30.0 * 0.2f64.cos()).exp();
        assert_abs_diff_eq!(l, -(a / (a + 1.0)).ln(), epsilon = 1e-9);
    }

    #[test]
    fn aam_without_margin_is_softmax_on_cosines() {
        let d = vec![0.6, 0.8];
        let w = [vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]];
        let l = loss_value(|g| {
            let dn = g.input(Tensor::matrix(1, 2, d.clone()));
            let wn = g.input(Tensor::from_rows(&w).unwrap());
            aam_softmax_loss(g, dn, &[2], wn, 0.0, 1.0).unwrap()
        });
        let cos: Vec<f64> = w.iter().map(|r| crate::numerics::linalg::cosine(&d, r)).collect();
        let z: f64 = cos.iter().map(|c| c.exp()).sum();
        assert_abs_diff_eq!(l, -(cos[2].exp() / z).ln(), epsilon = 1e-12);
    }

    #[test]
    fn similarity_loss_examples() {
        let one = loss_value(|g| {
            let s = g.input(Tensor::matrix(1, 2, vec![0.0, 1.0]));
            similarity_loss(g, s, &[1.0, 0.0]).unwrap()
        });
        assert_abs_diff_eq!(one, 1.0, epsilon = 1e-15);
        let zero = loss_value(|g| {
            let s = g.input(Tensor::matrix(3, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]));
            similarity_loss(g, s, &[0.6, 0.8]).unwrap()
        });
        assert_eq!(zero, 0.0);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let empty = g.input(Tensor::zeros(&[0, 2]));
        assert!(similarity_loss(&mut g, empty, &[1.0, 0.0]).is_err());
        let bad = g.input(Tensor::zeros(&[2, 3]));
        assert!(similarity_loss(&mut g, bad, &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn similarity_loss_is_quadratic(c in 0.1f64..5.0, r in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let target = [0.5, -0.5, 0.5];
            let at = |k: f64| loss_value(|g| {
                let v: Vec<f64> = r.iter().enumerate().map(|(i, x)| target[i % 3] + k * x).collect();
                let s = g.input(Tensor::matrix(2, 3, v));
                similarity_loss(g, s, &target).unwrap()
            });
            let (base, scaled) = (at(1.0), at(c));
            prop_assert!((scaled - c * c * base).abs() <= 1e-9 * (1.0 + scaled));
        }

        #[test]
        fn local_tap_is_linear(a in proptest::collection::vec(-2.0f64..2.0, 40), b in proptest::collection::vec(-2.0f64..2.0, 40)) {
            let smooth = |v: &[f64]| {
                let store = ParamStore::new();
                let mut g = Graph::new(&store);
                let x = g.input(Tensor::matrix(20, 2, v.to_vec()));
                let y = g.sliding_mean(x, 11).unwrap();
                g.value(y).data().to_vec()
            };
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let (sa, sb, ss) = (smooth(&a), smooth(&b), smooth(&sum));
            for i in 0..ss.len() {
                prop_assert!((ss[i] - sa[i] - sb[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tap_of_constant_frames_and_tiling() {
        let v = [3.0, 4.0];
        let frames = Tensor::matrix(5, 2, v.repeat(5));
        assert_eq!(tap(&frames), vec![0.6, 0.8]);
        let h = Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 0.3, 0.7, 0.1]);
        let mut tiled = h.data().to_vec();
        tiled.extend_from_slice(h.data());
        let a = tap(&h);
        let b = tap(&Tensor::matrix(6, 2, tiled));
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            input_dim: 8,
            channels: vec![4, 6],
            blocks: vec![1, 1],
            embedding_dim: 5,
            ..EncoderConfig::default()
        }
    }

    fn noise(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 1);
        Tensor::matrix(t, f, (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn teacher_dvectors_have_unit_norm() {
        let cfg = TeacherConfig {
            encoder: tiny_encoder(),
            ..TeacherConfig::default()
        };
        let t = Teacher::new(cfg, vec!["a".into(), "b".into()]).unwrap();
        for seed in 0..5 {
            let d = t.embed(&noise(17, 8, seed)).unwrap();
            assert_eq!(d.len(), 5);
            assert!((crate::numerics::linalg::norm(&d) - 1.0).abs() < 1e-6);
        }
        assert!(Teacher::new(TeacherConfig::default(), vec!["a".into()]).is_err());
    }

    #[test]
    fn student_frame_count_follows_stride() {
        for stride in [1, 2, 3] {
            let cfg = StudentConfig {
                encoder: EncoderConfig {
                    stride,
                    ..tiny_encoder()
                },
                ..StudentConfig::default()
            };
            let s = Student::new(cfg).unwrap();
            let feats = FeatureMatrix {
                values: noise(23, 8, 4),
                frame_shift: 0.01,
                frame_length: 0.025,
            };
            let seq = student_embed(&feats, &s).unwrap();
            assert_eq!(seq.frames(), s.config.encoder.output_frames(23));
            assert_abs_diff_eq!(seq.frame_shift, 0.01 * stride as f64, epsilon = 1e-15);
        }
        let even = StudentConfig {
            local_tap: 10,
            ..StudentConfig::default()
        };
        assert!(Student::new(even).is_err());
    }

    #[test]
    fn target_selection_modes() {
        let dv = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let mut roster = TargetRoster::new(dv.clone(), vec![0, 0, 1]);
        let mut rng = rng_for(3, 0);
        assert_eq!(select_target(1, &mut roster, TargetMode::SameUtterance, &mut rng), dv[1]);
        for _ in 0..5 {
            assert_eq!(select_target(0, &mut roster, TargetMode::SameSpeakerOtherUtterance, &mut rng), dv[1]);
            assert_eq!(select_target(1, &mut roster, TargetMode::SameSpeakerOtherUtterance, &mut rng), dv[0]);
        }
        assert_eq!(roster.fallbacks, 0);
        assert_eq!(select_target(2, &mut roster, TargetMode::SameSpeakerOtherUtterance, &mut rng), dv[2]);
        assert_eq!(roster.fallbacks, 1);
    }

    #[test]
    fn other_utterance_sampling_is_seeded_and_excludes_self() {
        let dv: Vec<DVector> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let pick = |seed| {
            let mut roster = TargetRoster::new(dv.clone(), vec![0; 5]);
            let mut rng = rng_for(seed, 0);
            (0..20).map(|_| roster.select(2, TargetMode::SameSpeakerOtherUtterance, &mut rng)).collect::<Vec<_>>()
        };
        let a = pick(7);
        assert_eq!(a, pick(7));
        assert!(a.iter().all(|&i| i != 2));
        assert!([0, 1, 3, 4].iter().all(|i| a.contains(i)));
    }

    #[test]
    fn checkpoints_round_trip_and_check_kind() {
        let t = Teacher::new(
            TeacherConfig {
                encoder: tiny_encoder(),
                ..TeacherConfig::default()
            },
            vec!["x".into(), "y".into(), "z".into()],
        )
        .unwrap();
        let ck = t.to_checkpoint();
        let back = Teacher::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.speakers, t.speakers);
        let x = noise(9, 8, 1);
        assert_eq!(back.embed(&x).unwrap(), t.embed(&x).unwrap());
        assert!(Student::from_checkpoint(&ck).is_err());
    }
}
