//! The subcommands of the `headkd` tool. Each validates its config up front
//! and returns the files it wrote.
//!
//! Commands that train run once per seed (see
//! [`ExperimentConfig::seeds`]). A single run writes into the output
//! directory; several runs write into `seed-<s>/` subdirectories. Runs
//! execute in parallel and are written in seed order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::{Checkpoint, Provenance};
use super::config::{AnalyzeSection, ArchSpec, Command, ExperimentConfig, LoadedConfig};
use super::report::{ablation_csv, angles_csv, key_value_csv, write_text};
use crate::data::{generate, load_csv, LabeledDataset, Split, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, msc_score, row_angles, EmbeddingSet};
use crate::nn::{MlpArch, ModelBundle};
use crate::train::{
    capacity_ablation, shkd_pipeline, train_student, AblationRow, ShkdArchs, ShkdConfig,
    ShkdOutcome, TrainOutcome,
};

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Output directory, relative to the working directory.
    pub out: Option<PathBuf>,
    /// Single training seed (for `gen-data`, the generation seed).
    pub seed: Option<u64>,
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, loaded: &mut LoadedConfig, command: Command) -> Result<()> {
        let cfg = &mut loaded.config;
        if let Some(out) = &self.out {
            cfg.output_dir = absolute(out)?;
        }
        if let Some(seed) = self.seed {
            if command == Command::GenData {
                if let Some(spec) = &mut cfg.data.synthetic {
                    spec.seed = seed;
                }
            } else {
                cfg.seeds = vec![seed];
            }
        }
        if self.teacher.is_some() || self.student.is_some() {
            let section = cfg.analyze.get_or_insert_with(AnalyzeSection::default);
            if let Some(p) = &self.teacher {
                section.teacher = Some(absolute(p)?);
            }
            if let Some(p) = &self.student {
                section.student = Some(absolute(p)?);
            }
        }
        Ok(())
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| Error::io("reading the working directory", e))?;
    Ok(cwd.join(p))
}

pub fn load_dataset(loaded: &LoadedConfig) -> Result<LabeledDataset> {
    let d = &loaded.config.data;
    let data = match (&d.synthetic, &d.csv) {
        (Some(spec), _) => {
            let data = generate(spec)?;
            if d.test_fraction == DEFAULT_TEST_FRACTION {
                data
            } else {
                data.resplit(spec.seed, d.test_fraction)?
            }
        }
        (None, Some(path)) => {
            let data = load_csv(&loaded.resolve(path), d.split_seed)?;
            if d.test_fraction == DEFAULT_TEST_FRACTION {
                data
            } else {
                data.resplit(d.split_seed, d.test_fraction)?
            }
        }
        (None, None) => return Err(Error::Config(vec!["data: missing dataset".into()])),
    };
    Ok(data)
}

fn resolve_arch(spec: &ArchSpec, data: &LabeledDataset) -> MlpArch {
    spec.resolve(data.dim(), data.num_classes())
}

/// Loaded model whose architecture must fit `data`.
fn load_model(path: &Path, data: &LabeledDataset, role: &str) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    let arch = &ckpt.model.arch;
    if arch.input_dim != data.dim() || arch.num_classes != data.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "{role} checkpoint {} has architecture {}, but the data has {} features and {} classes",
            path.display(),
            arch.describe(),
            data.dim(),
            data.num_classes()
        )));
    }
    Ok(ckpt)
}

/// Output directory of each run, in seed order.
fn run_dirs(loaded: &LoadedConfig, seeds: &[Option<u64>]) -> Vec<PathBuf> {
    let root = loaded.output_dir();
    if seeds.len() == 1 {
        vec![root]
    } else {
        seeds
            .iter()
            .map(|s| {
                root.join(format!(
                    "seed-{}",
                    s.expect("several runs come from the seeds list")
                ))
            })
            .collect()
    }
}

/// `None` keeps the seeds written in the run sections.
fn seed_runs(cfg: &ExperimentConfig) -> Vec<Option<u64>> {
    if cfg.seeds.is_empty() {
        vec![None]
    } else {
        cfg.seeds.iter().copied().map(Some).collect()
    }
}

fn provenance(cfg: &ExperimentConfig, phase: &str) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        phase: phase.to_string(),
    }
}

/// Write the synthetic dataset as `data.csv`.
pub fn gen_data(loaded: &LoadedConfig) -> Result<Vec<PathBuf>> {
    loaded.config.validate(Command::GenData)?;
    let data = load_dataset(loaded)?;
    let path = loaded.output_dir().join("data.csv");
    write_text(&path, &data.to_csv())?;
    Ok(vec![path])
}

/// Train `[student]` (or `[teacher]` when no student is given) with
/// `[train]`; writes `model.ckpt` and `report.csv` per run.
pub fn train(loaded: &LoadedConfig) -> Result<Vec<PathBuf>> {
    let cfg = &loaded.config;
    cfg.validate(Command::Train)?;
    let base = cfg.train.as_ref().expect("validated");
    let data = load_dataset(loaded)?;
    let arch = resolve_arch(
        cfg.student
            .as_ref()
            .or(cfg.teacher.as_ref())
            .expect("validated"),
        &data,
    );
    let teacher = cfg
        .teacher_checkpoint
        .as_ref()
        .map(|p| load_model(&loaded.resolve(p), &data, "teacher"))
        .transpose()?;
    let seeds = seed_runs(cfg);
    let outcomes: Vec<Result<TrainOutcome>> = seeds
        .par_iter()
        .map(|seed| {
            let mut run = base.clone();
            if let Some(s) = seed {
                run.seed = *s;
            }
            train_student(&run, &data, teacher.as_ref().map(|c| &c.model), &arch)
        })
        .collect();
    let mut written = Vec::new();
    for (dir, outcome) in run_dirs(loaded, &seeds).into_iter().zip(outcomes) {
        let outcome = outcome?;
        let ckpt = dir.join("model.ckpt");
        let report = dir.join("report.csv");
        write_text(&report, &outcome.report.to_csv())?;
        Checkpoint::new(outcome.model, provenance(cfg, "train")).save(&ckpt)?;
        written.extend([ckpt, report]);
    }
    Ok(written)
}

const PHASE_TAGS: [&str; 3] = ["shkd-step-I0", "shkd-step-I1", "shkd-step-I2"];

fn shkd_phases(cfg: &ExperimentConfig, seed: Option<u64>) -> ShkdConfig {
    let mut phases = match &cfg.shkd {
        Some(s) => s.phases().expect("validated"),
        None => ShkdConfig::new(0),
    };
    if let Some(s) = seed {
        for c in [&mut phases.step0, &mut phases.step1, &mut phases.step2] {
            c.seed = s;
        }
    }
    phases
}

/// Three-phase SH-KD; writes `step{0,1,2}.ckpt`, `step{0,1,2}.csv` and
/// `summary.csv` per run.
pub fn shkd(loaded: &LoadedConfig) -> Result<Vec<PathBuf>> {
    let cfg = &loaded.config;
    cfg.validate(Command::Shkd)?;
    let data = load_dataset(loaded)?;
    let student = cfg.student.as_ref().expect("validated");
    let archs = ShkdArchs {
        initial_student: resolve_arch(cfg.initial_student.as_ref().unwrap_or(student), &data),
        teacher: resolve_arch(cfg.teacher.as_ref().expect("validated"), &data),
        student: resolve_arch(student, &data),
    };
    let prior = match (
        &cfg.teacher_checkpoint,
        shkd_phases(cfg, None).step0.mode.needs_teacher(),
    ) {
        (Some(p), true) => Some(load_model(&loaded.resolve(p), &data, "teacher")?),
        _ => None,
    };
    let seeds = seed_runs(cfg);
    let outcomes: Vec<Result<ShkdOutcome>> = seeds
        .par_iter()
        .map(|seed| {
            shkd_pipeline(
                &shkd_phases(cfg, *seed),
                &data,
                &archs,
                prior.as_ref().map(|c| &c.model),
            )
        })
        .collect();
    let mut written = Vec::new();
    for (dir, outcome) in run_dirs(loaded, &seeds).into_iter().zip(outcomes) {
        let out = outcome?;
        let models = [&out.initial_student, &out.teacher, &out.student];
        for (i, (report, model)) in out.reports.iter().zip(models).enumerate() {
            let csv = dir.join(format!("step{i}.csv"));
            let ckpt = dir.join(format!("step{i}.ckpt"));
            write_text(&csv, &report.to_csv())?;
            Checkpoint::new(model.clone(), provenance(cfg, PHASE_TAGS[i])).save(&ckpt)?;
            written.extend([ckpt, csv]);
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let last = |i: usize| out.reports[i].records.last();
        let summary = key_value_csv(&[
            ("head_chain_ok", out.head_chain_ok.to_string()),
            ("initial_student_test_acc", opt(last(0).map(|r| r.test_acc))),
            ("teacher_test_acc", opt(last(1).map(|r| r.test_acc))),
            ("student_test_acc", opt(last(2).map(|r| r.test_acc))),
            (
                "student_mean_angle_rad",
                opt(last(2).and_then(|r| r.mean_angle)),
            ),
            ("student_msc", opt(last(2).and_then(|r| r.msc))),
        ]);
        let path = dir.join("summary.csv");
        write_text(&path, &summary)?;
        written.push(path);
    }
    Ok(written)
}

/// Teacher/student comparison on the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Dataset row of each test sample.
    pub indices: Vec<usize>,
    pub angles: Vec<f64>,
    pub mean_angle: f64,
    pub student_msc: f64,
    pub teacher_msc: f64,
    pub student_test_acc: f64,
    pub teacher_test_acc: f64,
}

impl Analysis {
    pub fn summary_csv(&self) -> String {
        key_value_csv(&[
            ("mean_angle_rad", self.mean_angle.to_string()),
            ("mean_angle_deg", self.mean_angle.to_degrees().to_string()),
            ("student_msc", self.student_msc.to_string()),
            ("teacher_msc", self.teacher_msc.to_string()),
            ("student_test_acc", self.student_test_acc.to_string()),
            ("teacher_test_acc", self.teacher_test_acc.to_string()),
        ])
    }
}

/// Per-sample angles between teacher and student features, MSC of both
/// feature sets, and both accuracies. `alpha_th` blends a student's
/// auxiliary head into its predictions.
pub fn analyze_models(
    teacher: &ModelBundle,
    student: &ModelBundle,
    data: &LabeledDataset,
    alpha_th: f64,
) -> Result<Analysis> {
    if teacher.feature_dim() != student.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "teacher {} has {}-d features, student {} has {}-d features",
            teacher.arch.describe(),
            teacher.feature_dim(),
            student.arch.describe(),
            student.feature_dim()
        )));
    }
    let x = data.split_features(Split::Test)?;
    let y = data.split_labels(Split::Test);
    let (ft, fs) = (teacher.features(&x)?, student.features(&x)?);
    let angles = row_angles(&ft, &fs)?;
    let mean_angle = angles.iter().sum::<f64>() / angles.len() as f64;
    Ok(Analysis {
        indices: data.indices(Split::Test),
        mean_angle,
        student_msc: msc_score(&EmbeddingSet::new(fs, y.clone())?)?,
        teacher_msc: msc_score(&EmbeddingSet::new(ft, y.clone())?)?,
        student_test_acc: accuracy(&student.predict_combined(&x, alpha_th)?, &y),
        teacher_test_acc: accuracy(&teacher.predict_combined(&x, alpha_th)?, &y),
        angles,
    })
}

/// Compare two checkpoints; writes `angles.csv` and `analysis.csv`.
pub fn analyze(loaded: &LoadedConfig) -> Result<(Vec<PathBuf>, Analysis)> {
    let cfg = &loaded.config;
    cfg.validate(Command::Analyze)?;
    let section = cfg.analyze.as_ref().expect("validated");
    let data = load_dataset(loaded)?;
    let teacher = load_model(
        &loaded.resolve(section.teacher.as_ref().expect("validated")),
        &data,
        "teacher",
    )?;
    let student = load_model(
        &loaded.resolve(section.student.as_ref().expect("validated")),
        &data,
        "student",
    )?;
    let analysis = analyze_models(&teacher.model, &student.model, &data, section.alpha_th)?;
    let labels: Vec<i64> = analysis
        .indices
        .iter()
        .map(|&i| data.label_values[data.labels[i]])
        .collect();
    let dir = loaded.output_dir();
    let angles = dir.join("angles.csv");
    let summary = dir.join("analysis.csv");
    write_text(
        &angles,
        &angles_csv(&analysis.indices, &labels, &analysis.angles),
    )?;
    write_text(&summary, &analysis.summary_csv())?;
    Ok((vec![angles, summary], analysis))
}

/// SH-KD once per initial-student width; writes `ablation.csv` per run.
/// Also returns, per run, whether teacher accuracy was non-increasing as
/// the width shrank (an observation, not a requirement).
pub fn ablate(loaded: &LoadedConfig) -> Result<(Vec<PathBuf>, Vec<bool>)> {
    let cfg = &loaded.config;
    cfg.validate(Command::Ablate)?;
    let data = load_dataset(loaded)?;
    let section = cfg.ablate.as_ref().expect("validated");
    let student = cfg.student.as_ref().expect("validated");
    let embedding_dim = section.embedding_dim.unwrap_or(student.embedding_dim);
    let initial: Vec<MlpArch> = section
        .initial_widths
        .iter()
        .map(|&w| MlpArch::new(data.dim(), &[w], embedding_dim, data.num_classes()))
        .collect();
    let teacher = resolve_arch(cfg.teacher.as_ref().expect("validated"), &data);
    let final_student = resolve_arch(student, &data);
    let seeds = seed_runs(cfg);
    let mut written = Vec::new();
    let mut monotone = Vec::new();
    for (seed, dir) in seeds.iter().zip(run_dirs(loaded, &seeds)) {
        let rows = capacity_ablation(
            &initial,
            &teacher,
            &final_student,
            &data,
            &shkd_phases(cfg, *seed),
        )?;
        let path = dir.join("ablation.csv");
        write_text(&path, &ablation_csv(&rows))?;
        written.push(path);
        monotone.push(teacher_acc_tracks_width(&rows));
    }
    Ok((written, monotone))
}

/// Teacher accuracy never rises as the initial width shrinks.
pub fn teacher_acc_tracks_width(rows: &[AblationRow]) -> bool {
    let mut by_width: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| (r.initial_arch.hidden.iter().sum(), r.teacher_test_acc))
        .collect();
    by_width.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    by_width.windows(2).all(|w| w[0].1 <= w[1].1)
}
