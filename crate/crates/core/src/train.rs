//! Training runs: vanilla, KD, L2E and TH-KD students, the three-phase
//! SH-KD procedure, and the initial-student capacity sweep built on it.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{batches, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{
    build_objective, LossBreakdown, ObjectiveWeights, RepDistance, TeacherTargets,
};
use crate::metrics::{accuracy, mean_angle, msc_score, EmbeddingSet};
use crate::nn::{MlpArch, ModelBundle};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    Kd,
    L2e,
    ThKd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Kd => "kd",
            Mode::L2e => "l2e",
            Mode::ThKd => "th_kd",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Mode::Vanilla
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalars of one training run. Omitted loss weights take the mode's
/// defaults, see [`DistillConfig::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "DistillFile")]
pub struct DistillConfig {
    pub mode: Mode,
    /// Weight of the prediction-distillation term.
    pub alpha: f64,
    /// Weight of the representation term.
    pub beta: f64,
    /// Weight of the teacher head against the student head.
    pub alpha_th: f64,
    pub tau: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_student_head: bool,
    pub rep_distance: RepDistance,
    /// Evaluate angle and MSC every this many epochs (and on the last).
    pub metric_every: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DistillFile {
    mode: Mode,
    alpha: Option<f64>,
    beta: Option<f64>,
    alpha_th: Option<f64>,
    tau: Option<f64>,
    optimizer: Option<OptimizerKind>,
    lr: Option<f64>,
    lr_schedule: Option<LrSchedule>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    freeze_student_head: Option<bool>,
    rep_distance: Option<RepDistance>,
    metric_every: Option<usize>,
}

impl From<DistillFile> for DistillConfig {
    fn from(f: DistillFile) -> Self {
        let d = DistillConfig::new(f.mode);
        Self {
            mode: f.mode,
            alpha: f.alpha.unwrap_or(d.alpha),
            beta: f.beta.unwrap_or(d.beta),
            alpha_th: f.alpha_th.unwrap_or(d.alpha_th),
            tau: f.tau.unwrap_or(d.tau),
            optimizer: f.optimizer.unwrap_or(d.optimizer),
            lr: f.lr.unwrap_or(d.lr),
            lr_schedule: f.lr_schedule.unwrap_or(d.lr_schedule),
            epochs: f.epochs.unwrap_or(d.epochs),
            batch_size: f.batch_size.unwrap_or(d.batch_size),
            seed: f.seed.unwrap_or(d.seed),
            freeze_student_head: f.freeze_student_head.unwrap_or(d.freeze_student_head),
            rep_distance: f.rep_distance.unwrap_or(d.rep_distance),
            metric_every: f.metric_every.unwrap_or(d.metric_every),
        }
    }
}

impl DistillConfig {
    /// Defaults: `kd` uses `alpha = 1`; `l2e` and `th_kd` use `beta = 0.05`
    /// with `alpha = 0`; `alpha_th = 1` throughout; Adam at `lr = 0.01` with
    /// cosine decay, 40 epochs of batch 32.
    pub fn new(mode: Mode) -> Self {
        let (alpha, beta) = match mode {
            Mode::Vanilla => (0.0, 0.0),
            Mode::Kd => (1.0, 0.0),
            Mode::L2e | Mode::ThKd => (0.0, 0.05),
        };
        Self {
            mode,
            alpha,
            beta,
            alpha_th: 1.0,
            tau: 1.0,
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            lr_schedule: LrSchedule::Cosine,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            freeze_student_head: false,
            rep_distance: RepDistance::Euclidean,
            metric_every: 1,
        }
    }

    /// Every violated field, prefixed with `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut bad = |field: &str, msg: String| v.push(format!("{prefix}{field}: {msg}"));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            bad("alpha", format!("must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bad("beta", format!("must be >= 0, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.alpha_th) {
            bad(
                "alpha_th",
                format!("must lie in [0, 1], got {}", self.alpha_th),
            );
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bad("tau", format!("must be > 0, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be >= 1".into());
        }
        if self.metric_every == 0 {
            bad("metric_every", "must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Loss weights actually applied; vanilla runs ignore alpha and beta.
    pub fn weights(&self) -> ObjectiveWeights {
        let (alpha, beta) = match self.mode {
            Mode::Vanilla => (0.0, 0.0),
            _ => (self.alpha, self.beta),
        };
        ObjectiveWeights {
            alpha,
            beta,
            alpha_th: self.alpha_th,
            tau: self.tau,
            rep: self.rep_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub kd: f64,
    pub rep: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Radians; absent without a reference teacher or off-cadence.
    pub mean_angle: Option<f64>,
    pub msc: Option<f64>,
}

pub const REPORT_HEADER: &str =
    "epoch,ce,kd,rep,total,train_acc,test_acc,mean_angle_rad,mean_angle_deg,msc";

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Loss of every optimisation step, measured before its update.
    pub steps: Vec<LossBreakdown>,
    /// Loss weights that produced `steps`.
    pub alpha: f64,
    pub beta: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.ce,
                r.kd,
                r.rep,
                r.total,
                r.train_acc,
                r.test_acc,
                opt(r.mean_angle),
                opt(r.mean_angle.map(f64::to_degrees)),
                opt(r.msc),
            ));
        }
        out
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }

    /// First epoch whose test accuracy reaches `fraction` of the final one.
    pub fn epoch_reaching(&self, fraction: f64) -> Option<usize> {
        let target = fraction * self.final_test_acc()?;
        self.records
            .iter()
            .find(|r| r.test_acc >= target)
            .map(|r| r.epoch)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub report: TrainReport,
}

/// Fresh student of `arch`, given an adapter to the teacher's feature width
/// when the widths differ, then trained with [`train`].
pub fn train_student(
    config: &DistillConfig,
    data: &LabeledDataset,
    teacher: Option<&ModelBundle>,
    arch: &MlpArch,
) -> Result<TrainOutcome> {
    let feature_dim = teacher
        .map(ModelBundle::feature_dim)
        .filter(|&d| d != arch.embedding_dim);
    let student = ModelBundle::init(arch, feature_dim, config.seed)?;
    train(config, data, teacher, student)
}

/// Train `student` in place of its initial weights.
///
/// A teacher is required for every mode but vanilla; a vanilla run accepts
/// one as a reference for the angle metric only. The teacher is only read.
/// `th_kd` attaches a frozen copy of the teacher's head to the student;
/// `freeze_student_head` freezes the student's own head.
pub fn train(
    config: &DistillConfig,
    data: &LabeledDataset,
    teacher: Option<&ModelBundle>,
    mut student: ModelBundle,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    if config.mode.needs_teacher() && teacher.is_none() {
        return Err(Error::MissingTeacher(config.mode.name()));
    }
    if student.backbone.input_dim() != data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} inputs, data has {}",
            student.backbone.input_dim(),
            data.dim()
        )));
    }
    if student.num_classes() != data.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} classes, data has {}",
            student.num_classes(),
            data.num_classes()
        )));
    }
    if let Some(t) = teacher {
        if t.feature_dim() != student.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "teacher features are {}-d, student features {}-d (add an adapter)",
                t.feature_dim(),
                student.feature_dim()
            )));
        }
    }
    if config.mode == Mode::ThKd {
        let head = &teacher.expect("checked above").head;
        student = student.attach_teacher_head(head)?;
    }
    if config.freeze_student_head {
        student.head.layer.trainable = false;
    }

    let weights = config.weights();
    let targets = match teacher.filter(|_| config.mode.needs_teacher()) {
        Some(t) => Some(TeacherTargets::from_outputs(
            &t.logits(&data.features)?,
            &t.features(&data.features)?,
            config.tau,
        )?),
        None => None,
    };

    let steps_per_epoch = data.indices(Split::Train).len().div_ceil(config.batch_size);
    let mut opt = Optimizer::new(
        config.optimizer,
        config.lr,
        config.lr_schedule,
        steps_per_epoch * config.epochs,
    );
    let mut records = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(steps_per_epoch * config.epochs);

    for epoch in 1..=config.epochs {
        let epoch_batches = batches(
            data,
            Split::Train,
            config.batch_size,
            config.seed,
            epoch as u64,
        )?;
        let first_step = steps.len();
        for (step, idx) in epoch_batches.iter().enumerate() {
            let mut g = Graph::new();
            let bound = student.bind(&mut g);
            let x = g.constant(data.features.select_rows(idx)?);
            let labels = data.labels_at(idx);
            let batch_targets = targets.as_ref().map(|t| t.select(idx)).transpose()?;
            let obj = build_objective(
                &mut g,
                &bound,
                x,
                &labels,
                data.num_classes(),
                batch_targets.as_ref(),
                &weights,
            )?;
            g.forward(obj.total)?;
            let loss = obj.breakdown(&g)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("{loss:?}"),
                });
            }
            g.backward(obj.total)?;
            for (slot, (layer, leaves)) in student
                .layers_mut()
                .into_iter()
                .zip(bound.layers())
                .enumerate()
            {
                if !layer.trainable {
                    continue;
                }
                let gw = g.grad(leaves.weight).expect("grads after backward");
                let gb = g.grad(leaves.bias).expect("grads after backward");
                opt.update(2 * slot, &mut layer.weight, gw);
                opt.update(2 * slot + 1, &mut layer.bias, gb);
            }
            opt.advance();
            steps.push(loss);
        }
        let epoch_steps = &steps[first_step..];
        let mean = |f: fn(&LossBreakdown) -> f64| {
            epoch_steps.iter().map(f).sum::<f64>() / epoch_steps.len() as f64
        };
        let on_cadence = epoch % config.metric_every == 0 || epoch == config.epochs;
        let eval = evaluate(&student, teacher, data, config.alpha_th, on_cadence)?;
        records.push(EpochRecord {
            epoch,
            ce: mean(|l| l.ce),
            kd: mean(|l| l.kd),
            rep: mean(|l| l.rep),
            total: mean(|l| l.total),
            train_acc: eval.train_acc,
            test_acc: eval.test_acc,
            mean_angle: eval.mean_angle,
            msc: eval.msc,
        });
    }

    Ok(TrainOutcome {
        model: student,
        report: TrainReport {
            records,
            steps,
            alpha: weights.alpha,
            beta: weights.beta,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_angle: Option<f64>,
    pub msc: Option<f64>,
}

/// Accuracies (combined heads), and optionally the teacher angle and the
/// MSC of the student's test-split features.
pub fn evaluate(
    model: &ModelBundle,
    reference: Option<&ModelBundle>,
    data: &LabeledDataset,
    alpha_th: f64,
    representation_metrics: bool,
) -> Result<Evaluation> {
    let acc = |split: Split| -> Result<f64> {
        let x = data.split_features(split)?;
        Ok(accuracy(
            &model.predict_combined(&x, alpha_th)?,
            &data.split_labels(split),
        ))
    };
    let (mean_angle, msc) = if representation_metrics {
        let angle = match reference {
            Some(t) if t.feature_dim() == model.feature_dim() => Some(mean_angle(t, model, data)?),
            _ => None,
        };
        let set = EmbeddingSet::new(
            model.features(&data.split_features(Split::Test)?)?,
            data.split_labels(Split::Test),
        )?;
        (angle, Some(msc_score(&set)?))
    } else {
        (None, None)
    };
    Ok(Evaluation {
        train_acc: acc(Split::Train)?,
        test_acc: acc(Split::Test)?,
        mean_angle,
        msc,
    })
}

// ---------------------------------------------------------------------------
// SH-KD

/// Configs of the three SH-KD phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShkdConfig {
    /// Temporary student; vanilla, or kd against a pre-existing teacher.
    pub step0: DistillConfig,
    /// Teacher trained with the temporary student's head frozen; vanilla.
    pub step1: DistillConfig,
    /// Final student distilled from that teacher.
    pub step2: DistillConfig,
}

impl ShkdConfig {
    /// Vanilla temporary student, vanilla teacher, and a `th_kd` final
    /// student whose transplanted head stays frozen.
    pub fn new(seed: u64) -> Self {
        let mut step0 = DistillConfig::new(Mode::Vanilla);
        let mut step1 = DistillConfig::new(Mode::Vanilla);
        let mut step2 = DistillConfig::new(Mode::ThKd);
        step2.freeze_student_head = true;
        for c in [&mut step0, &mut step1, &mut step2] {
            c.seed = seed;
        }
        Self {
            step0,
            step1,
            step2,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.step0.violations("step0.");
        v.extend(self.step1.violations("step1."));
        v.extend(self.step2.violations("step2."));
        if self.step1.mode != Mode::Vanilla {
            v.push(format!(
                "step1.mode: the teacher phase trains with cross-entropy only (vanilla), got {}",
                self.step1.mode
            ));
        }
        if self.step2.mode == Mode::Vanilla {
            v.push("step2.mode: the final student must distill from the teacher".into());
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct ShkdOutcome {
    pub initial_student: ModelBundle,
    pub teacher: ModelBundle,
    pub student: ModelBundle,
    /// Phase reports in order step0, step1, step2.
    pub reports: [TrainReport; 3],
    pub head_chain_ok: bool,
}

/// Architectures of the three SH-KD models.
#[derive(Debug, Clone, PartialEq)]
pub struct ShkdArchs {
    pub initial_student: MlpArch,
    pub teacher: MlpArch,
    pub student: MlpArch,
}

fn same_head_weights(a: &ModelBundle, b: &ModelBundle) -> bool {
    a.head.layer.weight == b.head.layer.weight && a.head.layer.bias == b.head.layer.bias
}

/// Three-phase student-head distillation.
///
/// 1. Train a temporary student, giving backbone and head `theta_s`
///    (against `prior_teacher` with `kd` when supplied).
/// 2. Train a teacher whose head is initialised to `theta_s` and frozen.
/// 3. Train the final student from that teacher, its head set to `theta_s`
///    (frozen unless `step2.freeze_student_head` is off).
///
/// `theta_s` reads features of the teacher's embedding width, or of
/// `prior_teacher`'s feature width when one is used. Every model whose
/// embedding differs gets an adapter to that width; the teacher needs one
/// only when a prior teacher sets it.
///
/// All shapes are checked before any training starts.
pub fn shkd_pipeline(
    cfg: &ShkdConfig,
    data: &LabeledDataset,
    archs: &ShkdArchs,
    prior_teacher: Option<&ModelBundle>,
) -> Result<ShkdOutcome> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    for (name, arch) in [
        ("initial student", &archs.initial_student),
        ("teacher", &archs.teacher),
        ("student", &archs.student),
    ] {
        arch.validate()?;
        if arch.input_dim != data.dim() || arch.num_classes != data.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "{name} architecture {} does not fit data with {} features and {} classes",
                arch.describe(),
                data.dim(),
                data.num_classes()
            )));
        }
    }
    let step0_teacher = prior_teacher.filter(|_| cfg.step0.mode.needs_teacher());
    if cfg.step0.mode.needs_teacher() && step0_teacher.is_none() {
        return Err(Error::MissingTeacher(cfg.step0.mode.name()));
    }
    // theta_s reads teacher-width features; students reach that width
    // through their adapters
    let head_dim = step0_teacher.map_or(archs.teacher.embedding_dim, ModelBundle::feature_dim);
    let adapter_to = |arch: &MlpArch| (arch.embedding_dim != head_dim).then_some(head_dim);

    let initial = ModelBundle::init(
        &archs.initial_student,
        adapter_to(&archs.initial_student),
        cfg.step0.seed,
    )?;
    let step0 = train(&cfg.step0, data, step0_teacher, initial)?;
    let theta_s = step0.model.head.clone();

    let teacher = ModelBundle::init(&archs.teacher, adapter_to(&archs.teacher), cfg.step1.seed)?
        .transplant_head(&theta_s, true)?;
    let student = ModelBundle::init(&archs.student, adapter_to(&archs.student), cfg.step2.seed)?
        .transplant_head(&theta_s, cfg.step2.freeze_student_head)?;

    let step1 = train(&cfg.step1, data, Some(&step0.model), teacher)?;
    let step2 = train(&cfg.step2, data, Some(&step1.model), student)?;

    let mut head_chain_ok = same_head_weights(&step0.model, &step1.model);
    if cfg.step2.freeze_student_head {
        head_chain_ok &= same_head_weights(&step1.model, &step2.model);
    }
    Ok(ShkdOutcome {
        initial_student: step0.model,
        teacher: step1.model,
        student: step2.model,
        reports: [step0.report, step1.report, step2.report],
        head_chain_ok,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub initial_arch: MlpArch,
    pub teacher_test_acc: f64,
    pub final_student_test_acc: f64,
}

/// One SH-KD run per initial-student architecture, all with the same
/// seeds. Runs execute in parallel; rows keep the input order.
pub fn capacity_ablation(
    initial_archs: &[MlpArch],
    teacher: &MlpArch,
    final_student: &MlpArch,
    data: &LabeledDataset,
    cfg: &ShkdConfig,
) -> Result<Vec<AblationRow>> {
    initial_archs
        .par_iter()
        .map(|arch| {
            let archs = ShkdArchs {
                initial_student: arch.clone(),
                teacher: teacher.clone(),
                student: final_student.clone(),
            };
            let out = shkd_pipeline(cfg, data, &archs, None)?;
            let [_, r1, r2] = &out.reports;
            Ok(AblationRow {
                initial_arch: arch.clone(),
                teacher_test_acc: r1.final_test_acc().unwrap_or_else(|| {
                    evaluate(&out.teacher, None, data, 0.0, false).map_or(f64::NAN, |e| e.test_acc)
                }),
                final_student_test_acc: r2.final_test_acc().unwrap_or_else(|| {
                    evaluate(&out.student, None, data, cfg.step2.alpha_th, false)
                        .map_or(f64::NAN, |e| e.test_acc)
                }),
            })
        })
        .collect()
}
