use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use speakerlab::blockwise::diarize_blockwise;
use speakerlab::eend::{
    diarize as diarize_full, meeting_probabilities, prepare_examples, save_probabilities, train_eend as fit_eend, tune_postprocess,
    DevMeeting, Eend, Frontend,
};
use speakerlab::embedder::{
    load_dataset, train_student as fit_student, train_teacher as fit_teacher, Student, StudentExtractor, Teacher,
    TeacherExtractor, STUDENT_KIND, TEACHER_KIND,
};
use speakerlab::eval::{der, eer, min_dcf, read_rttm, score_trials, Extractor, SegmentList, TrialList};
use speakerlab::features::{FeatureExtractor, Waveform};
use speakerlab::numerics::Checkpoint;
use speakerlab::simulate::{load_meeting, read_jsonl, resolve, write_jsonl, MeetingEntry, UtterancePool};
use speakerlab::training::TrainOptions;
use speakerlab::{Error, Result};

use crate::config::RunConfig;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Pretty JSON with a trailing newline; key order follows the struct.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

fn train_options(cfg: &RunConfig, checkpoint: PathBuf, every: usize) -> TrainOptions {
    TrainOptions {
        checkpoint: Some(checkpoint),
        checkpoint_every: every,
        jobs: cfg.jobs,
        max_steps: None,
    }
}

fn resume(path: &Option<PathBuf>) -> Result<Option<Checkpoint>> {
    path.as_deref().map(Checkpoint::load).transpose()
}

fn meeting_manifest(path: &Path) -> Result<Vec<MeetingEntry>> {
    let m: Vec<MeetingEntry> = read_jsonl(path)?;
    if m.is_empty() {
        return Err(Error::Data(format!("{}: no meetings", path.display())));
    }
    Ok(m)
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.simulate;
    let out = &cfg.out_dir;
    mkdir(out)?;
    cfg.write_snapshot("simulate")?;
    let lab = &s.lab;
    lab.roster_pool().write(&out.join("roster"))?;
    let (held, trials) = lab.heldout_pool();
    held.write(&out.join("heldout"))?;
    let tp = out.join("heldout").join("trials.txt");
    fs::write(&tp, trials.to_text()).map_err(|e| io_err(&tp, e))?;
    info!("roster and {} held-out trials written", trials.trials.len());

    let dir = out.join("train");
    mkdir(&dir)?;
    let mut entries = Vec::with_capacity(lab.train_meetings);
    for i in 0..lab.train_meetings {
        entries.push(lab.train_meeting(s.speakers, i)?.write(&dir)?);
    }
    write_jsonl(&dir.join("meetings.jsonl"), &entries)?;

    let pool = lab.eval_pool();
    for (tag, count) in [("dev", s.dev_meetings), ("test", s.test_meetings)] {
        let dir = out.join(tag);
        mkdir(&dir)?;
        let meetings = lab.eval_meetings(&pool, s.speakers, count, tag)?;
        let mut entries = Vec::new();
        let mut rttm = String::new();
        for m in &meetings {
            entries.push(m.write(&dir)?);
            rttm.push_str(&m.reference.to_rttm(&m.spec.id));
        }
        write_jsonl(&dir.join("meetings.jsonl"), &entries)?;
        let p = dir.join("reference.rttm");
        fs::write(&p, rttm).map_err(|e| io_err(&p, e))?;
    }
    info!("{} training meetings, {} dev, {} test", lab.train_meetings, s.dev_meetings, s.test_meetings);
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics {
    steps: usize,
    final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_accuracy: Option<f64>,
}

pub fn train_teacher(cfg: &RunConfig) -> Result<()> {
    let t = &cfg.teacher;
    mkdir(&cfg.out_dir)?;
    cfg.write_snapshot("train-teacher")?;
    let fx = FeatureExtractor::new(t.model.features)?;
    let (data, speakers) = load_dataset(&t.data, &fx)?;
    let opts = train_options(cfg, cfg.out_dir.join("teacher.train.ckpt"), t.checkpoint_every);
    let (model, report) = fit_teacher(&data, &speakers, &t.model, &opts, resume(&t.resume)?.as_ref())?;
    model.save(&cfg.out_dir.join("teacher.ckpt"))?;
    let m = TrainMetrics {
        steps: report.history.loss.len(),
        final_loss: report.history.tail_loss(20),
        train_accuracy: Some(report.train_accuracy),
    };
    info!("teacher accuracy {:.3}", report.train_accuracy);
    write_json(&cfg.out_dir.join("teacher.metrics.json"), &m)
}

pub fn train_student(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.student;
    mkdir(&cfg.out_dir)?;
    cfg.write_snapshot("train-student")?;
    let teacher = Teacher::load(&s.teacher)?;
    let fx = FeatureExtractor::new(s.model.features)?;
    let (data, _) = load_dataset(&s.data, &fx)?;
    let opts = train_options(cfg, cfg.out_dir.join("student.train.ckpt"), s.checkpoint_every);
    let (model, report) = fit_student(&data, &teacher, &s.model, &opts, resume(&s.resume)?.as_ref())?;
    model.save(&cfg.out_dir.join("student.ckpt"))?;
    let m = TrainMetrics {
        steps: report.history.loss.len(),
        final_loss: report.history.tail_loss(20),
        train_accuracy: None,
    };
    write_json(&cfg.out_dir.join("student.metrics.json"), &m)
}

pub fn train_eend(cfg: &RunConfig) -> Result<()> {
    let e = &cfg.eend;
    mkdir(&cfg.out_dir)?;
    cfg.write_snapshot("train-eend")?;
    let frontend = Frontend::load(e.model.frontend, e.frontend_checkpoint.as_deref(), e.model.features)?;
    let entries = meeting_manifest(&e.meetings)?;
    let mut examples = Vec::with_capacity(entries.len());
    for entry in &entries {
        let (w, r) = load_meeting(&e.meetings, entry)?;
        examples.extend(prepare_examples(&[(entry.meeting_id.clone(), w, r)], &frontend, e.model.subsample)?);
    }
    info!("prepared {} meetings with the {} frontend", examples.len(), frontend.kind());
    let opts = train_options(cfg, cfg.out_dir.join("eend.train.ckpt"), e.checkpoint_every);
    let (model, report) = fit_eend(&examples, &e.model, &opts, resume(&e.resume)?.as_ref())?;
    model.save(&cfg.out_dir.join("eend.ckpt"))?;
    let m = TrainMetrics {
        steps: report.history.loss.len(),
        final_loss: report.history.tail_loss(20),
        train_accuracy: None,
    };
    write_json(&cfg.out_dir.join("eend.metrics.json"), &m)
}

fn load_pipeline(eend: &Path, frontend_ck: Option<&Path>) -> Result<(Eend, Frontend)> {
    let model = Eend::load(eend)?;
    let frontend = Frontend::load(model.config.frontend, frontend_ck, model.config.features)?;
    Ok((model, frontend))
}

/// `(id, wav path)` of every recording to process.
fn recordings(wav: Option<&Path>, manifest: Option<&Path>) -> Result<Vec<(String, PathBuf)>> {
    if let Some(w) = wav {
        let id = w.file_stem().map_or("meeting".into(), |s| s.to_string_lossy().into_owned());
        return Ok(vec![(id, w.to_path_buf())]);
    }
    let m = manifest.ok_or_else(|| Error::Config("diarize needs a wav or a meeting manifest".into()))?;
    Ok(meeting_manifest(m)?
        .into_iter()
        .map(|e| (e.meeting_id, resolve(m, &e.wav_path)))
        .collect())
}

pub fn diarize(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.diarize;
    let rttm_dir = cfg.out_dir.join("rttm");
    mkdir(&rttm_dir)?;
    cfg.write_snapshot("diarize")?;
    let (model, frontend) = load_pipeline(&d.eend, d.frontend_checkpoint.as_deref())?;
    let post = d.post.unwrap_or(model.config.post);
    let mut all = String::new();
    for (id, path) in recordings(d.wav.as_deref(), d.meetings.as_deref())? {
        let wave = Waveform::read_wav(&path)?;
        let segs = if d.blockwise {
            let out = diarize_blockwise(&wave, &frontend, &model, &post, &d.block)?;
            out.write_dump(&rttm_dir.join(format!("{id}.blocks.jsonl")))?;
            out.segments
        } else {
            diarize_full(&wave, &frontend, &model, &post)?
        };
        if d.save_probabilities {
            let (p, fs) = meeting_probabilities(&wave, &frontend, &model)?;
            save_probabilities(&rttm_dir.join(format!("{id}.probs")), &p, fs)?;
        }
        segs.write_rttm(&rttm_dir.join(format!("{id}.rttm")), &id)?;
        all.push_str(&segs.to_rttm(&id));
        info!("{id}: {} segments over {:.1} s", segs.len(), wave.duration());
    }
    let p = cfg.out_dir.join("hypothesis.rttm");
    fs::write(&p, all).map_err(|e| io_err(&p, e))
}

#[derive(Serialize)]
struct DerMetrics {
    der: f64,
    miss: f64,
    fa: f64,
    confusion: f64,
    meetings: BTreeMap<String, f64>,
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let e = &cfg.evaluate;
    mkdir(&cfg.out_dir)?;
    cfg.write_snapshot("evaluate")?;
    let reference = read_rttm(&e.reference)?;
    let hypothesis = read_rttm(&e.hypothesis)?;
    if reference.is_empty() {
        return Err(Error::Data(format!("{}: no reference meetings", e.reference.display())));
    }
    let (mut miss, mut fa, mut conf, mut total) = (0u64, 0u64, 0u64, 0u64);
    let mut meetings = BTreeMap::new();
    let empty = SegmentList::default();
    for (id, r) in &reference {
        let h = hypothesis.get(id).unwrap_or(&empty);
        let d = der(r, h, e.frame_s, e.collar_s)?;
        miss += d.miss_frames;
        fa += d.false_alarm_frames;
        conf += d.confusion_frames;
        total += d.reference_frames;
        meetings.insert(id.clone(), d.der);
    }
    let t = total as f64;
    let m = DerMetrics {
        der: (miss + fa + conf) as f64 / t,
        miss: miss as f64 / t,
        fa: fa as f64 / t,
        confusion: conf as f64 / t,
        meetings,
    };
    println!("DER {:.2}% (miss {:.2}, fa {:.2}, confusion {:.2})", m.der * 100.0, m.miss * 100.0, m.fa * 100.0, m.confusion * 100.0);
    write_json(&cfg.out_dir.join("metrics.json"), &m)
}

#[derive(Serialize)]
struct VerifyMetrics {
    eer: f64,
    min_dcf: f64,
    trials: usize,
}

pub fn verify(cfg: &RunConfig) -> Result<()> {
    let v = &cfg.verify;
    mkdir(&cfg.out_dir)?;
    cfg.write_snapshot("verify")?;
    let pool = UtterancePool::from_manifest(&v.utterances)?;
    let wavs: HashMap<String, Waveform> = pool.utterances.into_iter().map(|u| (u.id, u.wave)).collect();
    let trials = TrialList::read(&v.trials)?;
    let ck = Checkpoint::load(&v.checkpoint)?;
    let (teacher, student);
    let extractor: Box<dyn Extractor + '_> = match ck.kind.as_str() {
        TEACHER_KIND => {
            teacher = Teacher::from_checkpoint(&ck)?;
            Box::new(TeacherExtractor::new(&teacher)?)
        }
        STUDENT_KIND => {
            student = Student::from_checkpoint(&ck)?;
            Box::new(StudentExtractor::new(&student)?)
        }
        other => return Err(Error::Config(format!("{}: a {other} checkpoint cannot embed utterances", v.checkpoint.display()))),
    };
    let scored = score_trials(&wavs, extractor.as_ref(), &trials)?;
    let m = VerifyMetrics {
        eer: eer(&scored)?,
        min_dcf: min_dcf(&scored, v.p_target, 1.0, 1.0)?,
        trials: scored.scores.len(),
    };
    let mut csv = String::from("enroll,test,score,target\n");
    for (s, t) in scored.scores.iter().zip(&trials.trials) {
        csv.push_str(&format!("{},{},{s},{}\n", t.enroll, t.test, t.target as u8));
    }
    let p = cfg.out_dir.join("scores.csv");
    fs::write(&p, csv).map_err(|e| io_err(&p, e))?;
    println!("EER {:.2}% minDCF {:.4} over {} trials", m.eer * 100.0, m.min_dcf, m.trials);
    write_json(&cfg.out_dir.join("verify.metrics.json"), &m)
}

pub fn tune(cfg: &RunConfig) -> Result<()> {
    let t = &cfg.tune;
    mkdir(&cfg.out_dir)?;
    cfg.write_snapshot("tune")?;
    let (model, frontend) = load_pipeline(&t.eend, t.frontend_checkpoint.as_deref())?;
    let mut dev = Vec::new();
    for entry in meeting_manifest(&t.meetings)? {
        let (w, reference) = load_meeting(&t.meetings, &entry)?;
        let (probs, frame_s) = meeting_probabilities(&w, &frontend, &model)?;
        dev.push(DevMeeting { probs, frame_s, reference });
    }
    let best = tune_postprocess(&dev, &t.thresholds, &t.windows)?;
    println!(
        "best threshold {} erosion {} dilation {}: dev DER {:.2}%",
        best.post.threshold,
        best.post.erosion,
        best.post.dilation,
        best.der * 100.0
    );
    let fragment = format!(
        "[diarize.post]\nthreshold = {:?}\nerosion = {}\ndilation = {}\n",
        best.post.threshold, best.post.erosion, best.post.dilation
    );
    let p = cfg.out_dir.join("post.toml");
    fs::write(&p, fragment).map_err(|e| io_err(&p, e))?;
    write_json(&cfg.out_dir.join("tune.json"), &best)
}
