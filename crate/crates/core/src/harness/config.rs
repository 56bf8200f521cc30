//! Experiment configuration files (TOML).
//!
//! ```toml
//! version = 1
//! output_dir = "runs/th_kd"
//! seeds = [0, 1, 2]
//! teacher_checkpoint = "runs/teacher/model.ckpt"
//!
//! [data.synthetic]
//! kind = "concentric_rings"
//! num_classes = 4
//! dim = 8
//! samples_per_class = 200
//! noise_std = 0.15
//! seed = 0
//!
//! [teacher]
//! hidden = [128, 128]
//! embedding_dim = 16
//!
//! [student]
//! hidden = [8]
//! embedding_dim = 8
//!
//! [train]
//! mode = "th_kd"
//! alpha = 0.0
//! beta = 0.2
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. Input width and class count come from the data, so architectures
//! list only hidden widths and the embedding width.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SyntheticSpec, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::nn::MlpArch;
use crate::train::{DistillConfig, ShkdConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl ArchSpec {
    pub fn resolve(&self, input_dim: usize, num_classes: usize) -> MlpArch {
        MlpArch::new(input_dim, &self.hidden, self.embedding_dim, num_classes)
    }

    fn violations(&self, section: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.embedding_dim == 0 {
            v.push(format!("{section}.embedding_dim: must be >= 1"));
        }
        if self.hidden.contains(&0) {
            v.push(format!(
                "{section}.hidden: widths must be >= 1, got {:?}",
                self.hidden
            ));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: Option<SyntheticSpec>,
    /// CSV with columns `f0..f{d-1},label`.
    pub csv: Option<PathBuf>,
    /// Seed of the train/test split of a CSV dataset (synthetic data uses
    /// its generation seed).
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShkdSection {
    pub step0: Option<DistillConfig>,
    pub step1: Option<DistillConfig>,
    pub step2: Option<DistillConfig>,
}

impl ShkdSection {
    /// All three phases, or the names of the missing ones.
    pub fn phases(&self) -> std::result::Result<ShkdConfig, Vec<&'static str>> {
        match (&self.step0, &self.step1, &self.step2) {
            (Some(a), Some(b), Some(c)) => Ok(ShkdConfig {
                step0: a.clone(),
                step1: b.clone(),
                step2: c.clone(),
            }),
            _ => Err([
                ("shkd.step0", self.step0.is_none()),
                ("shkd.step1", self.step1.is_none()),
                ("shkd.step2", self.step2.is_none()),
            ]
            .into_iter()
            .filter_map(|(n, missing)| missing.then_some(n))
            .collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Width of the single hidden layer of each initial student.
    pub initial_widths: Vec<usize>,
    /// Embedding width of the initial students; defaults to `[student]`'s.
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    /// Blend weight of a student's auxiliary head when scoring accuracy.
    #[serde(default = "default_alpha_th")]
    pub alpha_th: f64,
}

fn default_alpha_th() -> f64 {
    1.0
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            teacher: None,
            student: None,
            alpha_th: default_alpha_th(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Training seeds; every seed is a separate run. Empty means the seeds
    /// given in the run sections.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub data: DataSection,
    pub teacher: Option<ArchSpec>,
    pub student: Option<ArchSpec>,
    /// SH-KD temporary student; defaults to `[student]`.
    pub initial_student: Option<ArchSpec>,
    pub train: Option<DistillConfig>,
    pub shkd: Option<ShkdSection>,
    pub ablate: Option<AblateSection>,
    pub analyze: Option<AnalyzeSection>,
}

/// Which subcommand a config is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Shkd,
    Analyze,
    Ablate,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| {
                text[..s.start.min(text.len())].matches('\n').count() + 1
            });
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    /// SHA-256 hex digest of the canonical TOML form, leaving out
    /// `output_dir` so a run's outputs do not depend on where they go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        Sha256::digest(canonical.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Every problem relevant to `command`, all at once.
    pub fn violations(&self, command: Command) -> Vec<String> {
        let mut v = Vec::new();
        if self.version != CONFIG_VERSION {
            v.push(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            ));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            v.push(format!("seeds: seed {dup} listed twice"));
        }
        match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), None) => v.extend(
                spec.violations()
                    .into_iter()
                    .map(|m| format!("data.synthetic.{m}")),
            ),
            (None, Some(_)) if command == Command::GenData => {
                v.push("data.synthetic: gen-data needs a synthetic dataset spec".into())
            }
            (None, Some(_)) => {}
            (Some(_), Some(_)) => v.push("data: give either `synthetic` or `csv`, not both".into()),
            (None, None) => v.push("data: missing `synthetic` spec or `csv` path".into()),
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            v.push(format!(
                "data.test_fraction: must lie in (0, 1), got {}",
                self.data.test_fraction
            ));
        }
        for (name, arch) in [
            ("teacher", &self.teacher),
            ("student", &self.student),
            ("initial_student", &self.initial_student),
        ] {
            if let Some(a) = arch {
                v.extend(a.violations(name));
            }
        }
        fn require(v: &mut Vec<String>, present: bool, what: &str, why: &str) {
            if !present {
                v.push(format!("{what}: required {why}"));
            }
        }

        match command {
            Command::GenData => {}
            Command::Train => match &self.train {
                None => require(&mut v, false, "train", "section for the train command"),
                Some(t) => {
                    v.extend(t.violations("train."));
                    if t.mode.needs_teacher() {
                        require(
                            &mut v,
                            self.teacher_checkpoint.is_some(),
                            "teacher_checkpoint",
                            &format!("for mode {}", t.mode),
                        );
                        require(
                            &mut v,
                            self.student.is_some(),
                            "student",
                            &format!("for mode {}", t.mode),
                        );
                    } else {
                        require(
                            &mut v,
                            self.student.is_some() || self.teacher.is_some(),
                            "student",
                            "(or teacher) architecture to train",
                        );
                    }
                }
            },
            Command::Shkd | Command::Ablate => {
                require(
                    &mut v,
                    self.teacher.is_some(),
                    "teacher",
                    "architecture for SH-KD",
                );
                require(
                    &mut v,
                    self.student.is_some(),
                    "student",
                    "architecture for SH-KD",
                );
                match (&self.shkd, command) {
                    (None, Command::Shkd) => v.push(
                        "shkd: missing section (needs shkd.step0, shkd.step1, shkd.step2)".into(),
                    ),
                    (None, _) => {}
                    (Some(s), _) => match s.phases() {
                        Ok(phases) => {
                            v.extend(phases.violations().into_iter().map(|m| format!("shkd.{m}")));
                            if phases.step0.mode.needs_teacher() {
                                require(
                                    &mut v,
                                    self.teacher_checkpoint.is_some(),
                                    "teacher_checkpoint",
                                    &format!("for shkd.step0 mode {}", phases.step0.mode),
                                );
                            }
                        }
                        Err(missing) => v.extend(
                            missing
                                .into_iter()
                                .map(|p| format!("{p}: missing phase section")),
                        ),
                    },
                }
                if command == Command::Ablate {
                    match &self.ablate {
                        None => v.push("ablate: missing section with initial_widths".into()),
                        Some(a) => {
                            if a.initial_widths.is_empty() {
                                v.push("ablate.initial_widths: list at least one width".into());
                            }
                            if a.initial_widths.contains(&0) {
                                v.push("ablate.initial_widths: widths must be >= 1".into());
                            }
                            if a.embedding_dim == Some(0) {
                                v.push("ablate.embedding_dim: must be >= 1".into());
                            }
                        }
                    }
                }
            }
            Command::Analyze => match &self.analyze {
                None => {
                    v.push("analyze: missing section with teacher and student checkpoints".into())
                }
                Some(a) => {
                    require(
                        &mut v,
                        a.teacher.is_some(),
                        "analyze.teacher",
                        "checkpoint path",
                    );
                    require(
                        &mut v,
                        a.student.is_some(),
                        "analyze.student",
                        "checkpoint path",
                    );
                    if !(0.0..=1.0).contains(&a.alpha_th) {
                        v.push(format!(
                            "analyze.alpha_th: must lie in [0, 1], got {}",
                            a.alpha_th
                        ));
                    }
                }
            },
        }
        v
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        let v = self.violations(command);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// A parsed config and the directory its relative paths refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(Self {
            config: ExperimentConfig::from_toml_str(&text, path)?,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Mode;

    const EXAMPLE: &str = r#"
version = 1
teacher_checkpoint = "t.ckpt"

[data.synthetic]
kind = "concentric_rings"
num_classes = 4
dim = 8
samples_per_class = 20
noise_std = 0.15
seed = 3

[student]
hidden = [8]
embedding_dim = 8

[train]
mode = "th_kd"
alpha = 0.0
beta = 0.2
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, Path::new("test.toml"))
    }

    #[test]
    fn parses_and_round_trips() {
        let c = parse(EXAMPLE).unwrap();
        assert_eq!(c.train.as_ref().unwrap().mode, Mode::ThKd);
        assert_eq!(c.train.as_ref().unwrap().alpha_th, 1.0);
        assert!(
            c.violations(Command::Train).is_empty(),
            "{:?}",
            c.violations(Command::Train)
        );
        let again = parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn all_violations_reported_together() {
        let text = EXAMPLE
            .replace("version = 1", "version = 2")
            .replace("noise_std = 0.15", "noise_std = -1.0")
            .replace("beta = 0.2", "beta = -0.2\ntau = 0.0")
            .replace("teacher_checkpoint = \"t.ckpt\"", "");
        let v = parse(&text).unwrap().violations(Command::Train);
        for field in [
            "version",
            "data.synthetic.noise_std",
            "train.beta",
            "train.tau",
            "teacher_checkpoint",
        ] {
            assert!(
                v.iter().any(|m| m.starts_with(field)),
                "{field} missing from {v:?}"
            );
        }
    }

    #[test]
    fn unknown_kind_names_the_field() {
        let err = parse(&EXAMPLE.replace("concentric_rings", "spirals")).unwrap_err();
        let msg = err.to_string();
        assert!(err.is_validation());
        assert!(
            msg.contains("spirals") && msg.contains("test.toml:"),
            "{msg}"
        );
    }

    #[test]
    fn missing_shkd_phase_is_named() {
        let text = format!(
            "{EXAMPLE}\n[teacher]\nhidden = [16]\nembedding_dim = 16\n\n[shkd.step0]\nmode = \"vanilla\"\nalpha = 0.0\nbeta = 0.0\n\n[shkd.step2]\nmode = \"th_kd\"\nalpha = 0.0\nbeta = 0.2\n"
        );
        let v = parse(&text).unwrap().violations(Command::Shkd);
        assert_eq!(v, vec!["shkd.step1: missing phase section".to_string()]);
    }
}
