//! Run configuration: one TOML tree with a section per command. Unknown keys
//! are rejected and `--set a.b=value` overrides are applied to the tree
//! before it is typed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use speakerlab::blockwise::StitchConfig;
use speakerlab::eend::{EendConfig, PostConfig, THRESHOLD_GRID, WINDOW_GRID};
use speakerlab::embedder::{StudentConfig, TeacherConfig};
use speakerlab::lab::{toy_student_config, toy_teacher_config, ToyLabConfig};
use speakerlab::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Copied into every seeded section when the config is resolved.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub simulate: SimulateSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub eend: EendSection,
    pub diarize: DiarizeSection,
    pub evaluate: EvaluateSection,
    pub verify: VerifySection,
    pub tune: TuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 1,
            out_dir: PathBuf::from("runs"),
            jobs: 1,
            simulate: SimulateSection::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            eend: EendSection::default(),
            diarize: DiarizeSection::default(),
            evaluate: EvaluateSection::default(),
            verify: VerifySection::default(),
            tune: TuneSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub lab: ToyLabConfig,
    /// Speakers per simulated meeting.
    pub speakers: usize,
    pub dev_meetings: usize,
    pub test_meetings: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            lab: ToyLabConfig::default(),
            speakers: 2,
            dev_meetings: 4,
            test_meetings: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    /// Utterance manifest (JSONL).
    pub data: PathBuf,
    pub model: TeacherConfig,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            data: PathBuf::from("runs/roster/manifest.jsonl"),
            model: toy_teacher_config(1),
            checkpoint_every: 100,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub data: PathBuf,
    pub teacher: PathBuf,
    pub model: StudentConfig,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            data: PathBuf::from("runs/roster/manifest.jsonl"),
            teacher: PathBuf::from("runs/teacher.ckpt"),
            model: toy_student_config(&toy_teacher_config(1)),
            checkpoint_every: 100,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EendSection {
    /// Meeting manifest (JSONL).
    pub meetings: PathBuf,
    /// Student or teacher checkpoint; unused for the filterbank frontend.
    pub frontend_checkpoint: Option<PathBuf>,
    pub model: EendConfig,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
}

impl Default for EendSection {
    fn default() -> Self {
        EendSection {
            meetings: PathBuf::from("runs/train/meetings.jsonl"),
            frontend_checkpoint: Some(PathBuf::from("runs/student.ckpt")),
            model: EendConfig {
                steps: 1500,
                ..EendConfig::default()
            },
            checkpoint_every: 100,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiarizeSection {
    /// Meeting manifest; ignored when `wav` is set.
    pub meetings: Option<PathBuf>,
    pub wav: Option<PathBuf>,
    pub eend: PathBuf,
    pub frontend_checkpoint: Option<PathBuf>,
    /// Overrides the post-processing stored with the model.
    pub post: Option<PostConfig>,
    pub blockwise: bool,
    pub block: StitchConfig,
    /// Also write `<id>.probs` with the raw activity probabilities.
    pub save_probabilities: bool,
}

impl Default for DiarizeSection {
    fn default() -> Self {
        DiarizeSection {
            meetings: Some(PathBuf::from("runs/test/meetings.jsonl")),
            wav: None,
            eend: PathBuf::from("runs/eend.ckpt"),
            frontend_checkpoint: Some(PathBuf::from("runs/student.ckpt")),
            post: None,
            blockwise: false,
            block: StitchConfig::default(),
            save_probabilities: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub reference: PathBuf,
    pub hypothesis: PathBuf,
    pub frame_s: f64,
    pub collar_s: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            reference: PathBuf::from("runs/test/reference.rttm"),
            hypothesis: PathBuf::from("runs/hypothesis.rttm"),
            frame_s: speakerlab::eval::DER_FRAME_S,
            collar_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub utterances: PathBuf,
    pub trials: PathBuf,
    /// Teacher or student checkpoint.
    pub checkpoint: PathBuf,
    pub p_target: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            utterances: PathBuf::from("runs/heldout/manifest.jsonl"),
            trials: PathBuf::from("runs/heldout/trials.txt"),
            checkpoint: PathBuf::from("runs/teacher.ckpt"),
            p_target: speakerlab::eval::DCF_P_TARGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    pub meetings: PathBuf,
    pub eend: PathBuf,
    pub frontend_checkpoint: Option<PathBuf>,
    pub thresholds: Vec<f64>,
    pub windows: Vec<usize>,
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            meetings: PathBuf::from("runs/dev/meetings.jsonl"),
            eend: PathBuf::from("runs/eend.ckpt"),
            frontend_checkpoint: Some(PathBuf::from("runs/student.ckpt")),
            thresholds: THRESHOLD_GRID.to_vec(),
            windows: WINDOW_GRID.to_vec(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words that are not valid TOML are taken as strings
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to the tree, creating tables on the way.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let mut t = tree;
    for k in &keys[..keys.len() - 1] {
        let entry = t.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a table")))?;
    }
    t.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides and copies
    /// the global seed into every section.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} (expected {CONFIG_VERSION})", cfg.version)));
        }
        cfg.resolve_seeds();
        Ok(cfg)
    }

    fn resolve_seeds(&mut self) {
        let s = self.seed;
        self.simulate.lab.seed = s;
        self.teacher.model.seed = s;
        self.student.model.seed = s;
        self.eend.model.seed = s;
        self.diarize.block.seed = s;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `<command>.config.toml` under the output directory.
    pub fn write_snapshot(&self, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::Data(format!("{}: {e}", self.out_dir.display())))?;
        let path = self.out_dir.join(format!("{command}.config.toml"));
        fs::write(&path, self.to_toml()).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::load(
            None,
            &[
                "teacher.model.steps=7".into(),
                "diarize.block.block_s = 20.5".into(),
                "out_dir=somewhere".into(),
                "seed=9".into(),
                "eend.model.frontend=\"filterbank\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.teacher.model.steps, 7);
        assert_eq!(c.diarize.block.block_s, 20.5);
        assert_eq!(c.out_dir, PathBuf::from("somewhere"));
        assert_eq!(c.student.model.seed, 9);
        assert_eq!(c.eend.model.frontend.to_string(), "filterbank");
    }

    #[test]
    fn unknown_keys_and_bad_versions_are_rejected() {
        assert!(RunConfig::load(None, &["teacher.model.colour=1".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense=1".into()]).is_err());
        assert!(RunConfig::load(None, &["version=2".into()]).is_err());
        assert!(RunConfig::load(None, &["missing_equals".into()]).is_err());
    }

    #[test]
    fn snapshot_reproduces_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::load(None, &[format!("out_dir={:?}", dir.path().display().to_string()), "seed=4".into()]).unwrap();
        let p = c.write_snapshot("simulate").unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), c);
    }
}
