use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speakerlab"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"
out_dir = "run"
seed = 3

[simulate]
speakers = 2
dev_meetings = 1
test_meetings = 1

[simulate.lab]
roster_speakers = 3
utterances_per_speaker = 3
utterance_s = 1.0
heldout_speakers = 3
heldout_utterances = 2
train_meetings = 2
train_meeting_s = 20.0
eval_meeting_s = 600.0
eval_pool_speakers = 3

[teacher]
data = "run/roster/manifest.jsonl"
[teacher.model]
steps = 4
batch_size = 3
crop_frames = 50
[teacher.model.encoder]
channels = [4, 8]
blocks = [1, 1]
embedding_dim = 8

[student]
data = "run/roster/manifest.jsonl"
teacher = "run/teacher.ckpt"
[student.model]
steps = 4
batch_size = 3
crop_frames = 50
[student.model.encoder]
channels = [4, 8]
blocks = [1, 1]
embedding_dim = 8

[eend]
meetings = "run/train/meetings.jsonl"
frontend_checkpoint = "run/student.ckpt"
[eend.model]
frontend = "student"
speakers = 2
steps = 3
batch_size = 2
dim = 8
ff_dim = 16
heads = 2
chunk_s = 10.0

[diarize]
meetings = "run/test/meetings.jsonl"
eend = "run/eend.ckpt"
frontend_checkpoint = "run/student.ckpt"

[evaluate]
reference = "run/test/reference.rttm"
hypothesis = "run/hypothesis.rttm"

[verify]
utterances = "run/heldout/manifest.jsonl"
trials = "run/heldout/trials.txt"
checkpoint = "run/teacher.ckpt"

[tune]
meetings = "run/dev/meetings.jsonl"
eend = "run/eend.ckpt"
frontend_checkpoint = "run/student.ckpt"
thresholds = [0.4, 0.5]
windows = [1, 3]
"#;

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("lab.toml"), SMALL).unwrap();
    let c = ["--config", "lab.toml"];
    let with = |extra: &[&'static str]| -> Vec<&str> { c.iter().copied().chain(extra.iter().copied()).collect() };

    ok(d, &with(&["simulate"]));
    for f in ["roster/manifest.jsonl", "heldout/trials.txt", "train/meetings.jsonl", "test/reference.rttm", "simulate.config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(d, &with(&["train-teacher"]));
    ok(d, &with(&["train-student"]));
    ok(d, &with(&["train-eend"]));
    assert!(json(&d.join("run/eend.metrics.json"))["final_loss"].as_f64().unwrap().is_finite());

    ok(d, &with(&["diarize"]));
    ok(d, &with(&["evaluate"]));
    let first = fs::read(d.join("run/metrics.json")).unwrap();
    let m = json(&d.join("run/metrics.json"));
    for k in ["der", "miss", "fa", "confusion"] {
        assert!(m[k].as_f64().is_some(), "{k}");
    }
    ok(d, &with(&["evaluate"]));
    assert_eq!(fs::read(d.join("run/metrics.json")).unwrap(), first);

    ok(d, &with(&["--set", "evaluate.hypothesis=\"run/test/reference.rttm\"", "evaluate"]));
    assert_eq!(json(&d.join("run/metrics.json"))["der"].as_f64(), Some(0.0));

    // coverage only: a near-zero threshold marks every stitched frame active
    ok(
        d,
        &with(&[
            "--set",
            "out_dir=\"blk\"",
            "--set",
            "diarize.post={threshold = 0.001, erosion = 1, dilation = 1}",
            "diarize",
            "--blockwise",
            "--block-length",
            "30",
            "--block-advance",
            "10",
            "--speakers",
            "2",
        ]),
    );
    let rttm = fs::read_to_string(d.join("blk/hypothesis.rttm")).unwrap();
    let spans: Vec<(f64, f64)> = rttm
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let s: f64 = f[3].parse().unwrap();
            (s, s + f[4].parse::<f64>().unwrap())
        })
        .collect();
    assert!(spans.iter().any(|s| s.0 < 1.0), "{rttm}");
    assert!(spans.iter().any(|s| s.1 > 599.0), "{rttm}");
    let dumps: Vec<_> = fs::read_dir(d.join("blk/rttm"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(".blocks.jsonl"))
        .collect();
    assert_eq!(dumps.len(), 1);

    ok(d, &with(&["verify"]));
    let v = json(&d.join("run/verify.metrics.json"));
    assert!((0.0..=1.0).contains(&v["eer"].as_f64().unwrap()));

    ok(d, &with(&["tune"]));
    assert!(json(&d.join("run/tune.json"))["der"].as_f64().is_some());
    assert!(fs::read_to_string(d.join("run/post.toml")).unwrap().contains("[diarize.post]"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| run(d, args).status.code();
    assert_eq!(code(&["--set", "teacher.model.colour=1", "config"]), Some(2));
    assert_eq!(code(&["--set", "out_dir=\"o\"", "--set", "teacher.data=\"missing.jsonl\"", "train-teacher"]), Some(3));
    let o = run(d, &["--set", "out_dir=\"o\"", "--set", "evaluate.reference=\"nope.rttm\"", "evaluate"]);
    assert_eq!(o.status.code(), Some(3));
    let line = String::from_utf8_lossy(&o.stderr);
    let err: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert!(err["message"].as_str().unwrap().contains("nope.rttm"));
    assert_eq!(code(&["config"]), Some(0));
}

#[test]
fn diverging_training_exits_with_numerical_abort() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("lab.toml"), SMALL).unwrap();
    ok(d, &["--config", "lab.toml", "--set", "simulate.lab.train_meetings=0", "--set", "simulate.test_meetings=0", "--set", "simulate.dev_meetings=0", "simulate"]);
    let o = run(
        d,
        &[
            "--config",
            "lab.toml",
            "--set",
            "teacher.model.optimizer.lr=1e300",
            "--set",
            "teacher.model.optimizer.clip_norm=0.0",
            "train-teacher",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
