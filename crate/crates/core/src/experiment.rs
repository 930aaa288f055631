//! Experiment configuration and the workflows behind the command-line tool:
//! file-level statistics and calibration, the policy comparison demo and the
//! alpha sweep.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analyze::{compare_runs, misinstruction_ratio, MisinstructionStats, RunMetrics, RunReport};
use crate::calibrate::{calibrate_loca, CalibrationConfig, Policy};
use crate::dump::{self, DumpError};
use crate::error::Error;
use crate::losses::LossConfig;
use crate::nn::{
    distill_student, gen_synthetic, train_teacher, Dataset, MlpModel, SyntheticSpec,
    TeacherMetrics, TrainConfig,
};
use crate::probvec::{softmax, ClassIndex};

/// Optimisation settings for one of the two networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Seeds both the teacher initialisation and its batch order.
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let net = NetworkConfig::default();
        Self {
            hidden: vec![32],
            epochs: net.epochs,
            batch_size: net.batch_size,
            lr: net.lr,
            momentum: net.momentum,
            seed: 0,
        }
    }
}

impl TeacherSection {
    pub fn net(&self) -> NetworkConfig {
        NetworkConfig {
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaSection {
    pub alpha: f64,
    pub ratio_tolerance: f64,
}

impl Default for AlphaSection {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            ratio_tolerance: 1e-12,
        }
    }
}

/// Whole experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub dataset: SyntheticSpec,
    pub teacher: TeacherSection,
    pub student: NetworkConfig,
    pub loss: LossConfig,
    pub calibration: AlphaSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            dataset: SyntheticSpec::default(),
            teacher: TeacherSection::default(),
            student: NetworkConfig {
                hidden: vec![8],
                ..NetworkConfig::default()
            },
            loss: LossConfig::default(),
            calibration: AlphaSection::default(),
        }
    }
}

/// A configuration value that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration keys: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ConfigIssue>),
}

impl ConfigError {
    /// Keys named in the error, if any.
    pub fn keys(&self) -> Vec<&str> {
        match self {
            ConfigError::Invalid(issues) => issues.iter().map(|i| i.key.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

fn check_network(prefix: &str, net: &NetworkConfig, issues: &mut Vec<ConfigIssue>) {
    let mut push = |key: &str, message: String| {
        issues.push(ConfigIssue {
            key: format!("{prefix}.{key}"),
            message,
        })
    };
    if net.hidden.contains(&0) {
        push("hidden", "hidden layer sizes must be positive".into());
    }
    if net.epochs == 0 {
        push("epochs", "must be positive".into());
    }
    if net.batch_size == 0 {
        push("batch_size", "must be positive".into());
    }
    if !(net.lr > 0.0 && net.lr.is_finite()) {
        push("lr", format!("must be positive, got {}", net.lr));
    }
    if !(0.0..1.0).contains(&net.momentum) {
        push("momentum", format!("must lie in [0, 1), got {}", net.momentum));
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Checks every value and reports all offending keys at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut push = |key: &str, message: String| {
            issues.push(ConfigIssue {
                key: key.to_string(),
                message,
            })
        };
        if self.seeds.is_empty() {
            push("seeds", "at least one seed is required".into());
        }
        let d = &self.dataset;
        if d.classes < 2 {
            push("dataset.classes", format!("must be >= 2, got {}", d.classes));
        }
        if d.dims < 2 {
            push("dataset.dims", format!("must be >= 2, got {}", d.dims));
        }
        if d.samples < d.classes {
            push(
                "dataset.samples",
                format!("must be at least dataset.classes ({}), got {}", d.classes, d.samples),
            );
        }
        if !(d.cluster_spread > 0.0 && d.cluster_spread.is_finite()) {
            push("dataset.cluster_spread", format!("must be positive, got {}", d.cluster_spread));
        }
        if !(0.0..0.5).contains(&d.label_noise) {
            push("dataset.label_noise", format!("must lie in [0, 0.5), got {}", d.label_noise));
        }
        if d.modes_per_class == 0 {
            push("dataset.modes_per_class", "must be positive".into());
        }
        let l = &self.loss;
        if !(l.tau > 0.0 && l.tau.is_finite()) {
            push("loss.tau", format!("must be positive, got {}", l.tau));
        }
        if !(l.beta >= 0.0 && l.beta.is_finite()) {
            push("loss.beta", format!("must be non-negative, got {}", l.beta));
        }
        if !(l.gamma >= 0.0 && l.gamma.is_finite()) {
            push("loss.gamma", format!("must be non-negative, got {}", l.gamma));
        }
        if !(l.beta + l.gamma > 0.0) {
            push("loss.beta", "loss.beta + loss.gamma must be positive".into());
        }
        let a = self.calibration.alpha;
        if !(a > 0.0 && a < 1.0) {
            push("calibration.alpha", format!("must lie in (0, 1), got {a}"));
        }
        if !(self.calibration.ratio_tolerance >= 0.0) {
            push(
                "calibration.ratio_tolerance",
                format!("must be non-negative, got {}", self.calibration.ratio_tolerance),
            );
        }
        check_network("teacher", &self.teacher.net(), &mut issues);
        check_network("student", &self.student, &mut issues);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn teacher_train_config(&self) -> TrainConfig {
        let n = &self.teacher;
        TrainConfig {
            epochs: n.epochs,
            batch_size: n.batch_size,
            lr: n.lr,
            momentum: n.momentum,
            seed: self.teacher.seed,
            loss: self.loss,
            calibration: CalibrationConfig::with_policy(Policy::None, self.calibration.alpha),
        }
    }

    pub fn student_train_config(&self, policy: Policy, alpha: f64, seed: u64) -> TrainConfig {
        let n = &self.student;
        TrainConfig {
            epochs: n.epochs,
            batch_size: n.batch_size,
            lr: n.lr,
            momentum: n.momentum,
            seed,
            loss: self.loss,
            calibration: CalibrationConfig {
                alpha,
                policy,
                ratio_tolerance: self.calibration.ratio_tolerance,
                allow_alpha_at_or_above_one: alpha >= 1.0,
            },
        }
    }
}

/// Teacher logits for the training split, in dataset order.
pub fn teacher_train_logits(
    data: &Dataset,
    teacher: &MlpModel,
) -> Result<(Vec<crate::probvec::LogitVector>, Vec<usize>), Error> {
    let idx = data.indices(crate::nn::Split::Train);
    let x: Vec<&[f64]> = idx.iter().map(|&i| data.features[i].as_slice()).collect();
    let y = idx.iter().map(|&i| data.labels[i]).collect();
    Ok((teacher.forward_batch(&x)?, y))
}

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Training(Error),
}

impl From<Error> for WorkflowError {
    fn from(e: Error) -> Self {
        match e {
            Error::TrainingDiverged { .. } => WorkflowError::Training(e),
            other => WorkflowError::Usage(other.to_string()),
        }
    }
}

impl WorkflowError {
    /// Process exit code: 3 for divergence, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkflowError::Training(_) => 3,
            _ => 2,
        }
    }
}

pub fn format_stats(stats: &MisinstructionStats) -> String {
    format!(
        "total={} misinstructed={} ratio={:.4}",
        stats.total, stats.misinstructed, stats.ratio
    )
}

/// Mis-instruction statistics of a logit dump against its labels.
pub fn stats_files(logits: &Path, labels: &Path) -> Result<MisinstructionStats, WorkflowError> {
    let (rows, labels) = dump::read_pair(logits, labels)?;
    if rows.is_empty() {
        return Err(WorkflowError::Usage(format!(
            "{}: no data rows",
            logits.display()
        )));
    }
    Ok(misinstruction_ratio(&rows, &labels)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateSummary {
    pub total: usize,
    pub calibrated: usize,
    pub rows: Vec<Vec<f64>>,
}

/// Softens each row at `tau`, calibrates the mis-instructed ones and writes
/// the resulting probabilities to `output`.
pub fn calibrate_files(
    logits: &Path,
    labels: &Path,
    alpha: f64,
    tau: f64,
    output: &Path,
) -> Result<CalibrateSummary, WorkflowError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(WorkflowError::Usage(format!("--alpha must lie in (0, 1), got {alpha}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(WorkflowError::Usage(format!("--tau must be positive, got {tau}")));
    }
    let (rows, labels) = dump::read_pair(logits, labels)?;
    let mut calibrated = 0;
    let mut out = Vec::with_capacity(rows.len());
    for (z, &y) in rows.iter().zip(&labels) {
        let p = softmax(z, tau)?;
        let o = calibrate_loca(&p, ClassIndex::new(y, p.len())?, alpha)?;
        if o.was_misinstructed {
            calibrated += 1;
        }
        out.push(o.calibrated.into_inner());
    }
    dump::write_rows(output, &out)?;
    Ok(CalibrateSummary {
        total: rows.len(),
        calibrated,
        rows: out,
    })
}

fn prepare(cfg: &ExperimentConfig) -> Result<(Dataset, MlpModel, TeacherMetrics), WorkflowError> {
    let data = gen_synthetic(&cfg.dataset)?;
    let (teacher, metrics) = train_teacher(&data, &cfg.teacher.hidden, &cfg.teacher_train_config())?;
    Ok((data, teacher, metrics))
}

fn run_one(
    data: &Dataset,
    teacher: &MlpModel,
    cfg: &ExperimentConfig,
    label: String,
    policy: Policy,
    alpha: f64,
    seed: u64,
) -> Result<RunMetrics, WorkflowError> {
    let start = Instant::now();
    let tc = cfg.student_train_config(policy, alpha, seed);
    let (_, m) = distill_student(data, teacher, &cfg.student.hidden, &tc)?;
    Ok(RunMetrics {
        label,
        policy,
        seed,
        top1: m.test_top1,
        top5: m.test_top5,
        final_loss: m.final_loss(),
        calibrated: m.calibrated_per_epoch.iter().sum(),
        dropped: m.dropped_per_epoch.iter().sum(),
        violations: m.violations,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn teacher_lines(m: &TeacherMetrics) -> String {
    format!(
        "# teacher train_accuracy={:.4} test_accuracy={:.4} train_misinstruction_ratio={:.4} ({} of {})\n",
        m.train_accuracy,
        m.test_accuracy,
        m.train_misinstruction.ratio,
        m.train_misinstruction.misinstructed,
        m.train_misinstruction.total
    )
}

fn seed_line(seeds: &[u64]) -> String {
    let s: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("# seeds {}\n", s.join(","))
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub teacher: TeacherMetrics,
    pub report: RunReport,
    /// Mean top-1 under `loca` is at least the mean under `none`.
    pub loca_not_worse: bool,
    pub text: String,
}

/// Trains the teacher once, then distils one student per seed under each of
/// the `none`, `skip` and `loca` policies.
pub fn run_demo(cfg: &ExperimentConfig) -> Result<DemoOutcome, WorkflowError> {
    cfg.validate()?;
    let (data, teacher, teacher_metrics) = prepare(cfg)?;
    let mut runs = Vec::new();
    for policy in Policy::ALL {
        for &seed in &cfg.seeds {
            runs.push(run_one(
                &data,
                &teacher,
                cfg,
                policy.to_string(),
                policy,
                cfg.calibration.alpha,
                seed,
            )?);
        }
    }
    let report = compare_runs(&runs)?;
    let none = report.row("none").map(|r| r.mean_top1).unwrap_or(f64::NAN);
    let loca = report.row("loca").map(|r| r.mean_top1).unwrap_or(f64::NAN);
    let loca_not_worse = loca >= none;

    let mut text = String::new();
    text.push_str(&teacher_lines(&teacher_metrics));
    text.push_str(&seed_line(&cfg.seeds));
    let _ = writeln!(text, "# alpha {}", cfg.calibration.alpha);
    text.push_str(&report.to_text());
    let _ = writeln!(
        text,
        "\n# direction loca {} none ({:.4} vs {:.4}){}",
        if loca_not_worse { ">=" } else { "<" },
        100.0 * loca,
        100.0 * none,
        if loca_not_worse { "" } else { " FLAG: loca below vanilla KD" }
    );
    Ok(DemoOutcome {
        teacher: teacher_metrics,
        report,
        loca_not_worse,
        text,
    })
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub alphas: Vec<f64>,
    pub warnings: Vec<String>,
    pub notices: Vec<String>,
    pub report: RunReport,
    pub text: String,
}

/// Warning emitted for `alpha >= 1`.
pub fn alpha_warning(alpha: f64) -> String {
    format!(
        "warning: alpha={alpha} is >= 1; the label is no longer guaranteed to be the strict argmax of calibrated vectors"
    )
}

/// LoCa over a list of alphas, one row per distinct alpha.
pub fn run_sweep(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<SweepOutcome, WorkflowError> {
    if alphas.is_empty() {
        return Err(WorkflowError::Usage("alpha list is empty".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(WorkflowError::Usage(format!("alpha must be positive, got {a}")));
    }
    cfg.validate()?;

    let mut unique: Vec<f64> = Vec::new();
    let mut notices = Vec::new();
    for &a in alphas {
        if unique.contains(&a) {
            notices.push(format!("notice: duplicate alpha={a} removed"));
        } else {
            unique.push(a);
        }
    }
    let warnings: Vec<String> = unique
        .iter()
        .filter(|&&a| a >= 1.0)
        .map(|&a| alpha_warning(a))
        .collect();

    let (data, teacher, teacher_metrics) = prepare(cfg)?;
    let mut runs = Vec::new();
    for &alpha in &unique {
        for &seed in &cfg.seeds {
            runs.push(run_one(
                &data,
                &teacher,
                cfg,
                format!("loca-{alpha}"),
                Policy::Loca,
                alpha,
                seed,
            )?);
        }
    }
    let report = compare_runs(&runs)?;
    let mut text = String::new();
    text.push_str(&teacher_lines(&teacher_metrics));
    text.push_str(&seed_line(&cfg.seeds));
    for line in notices.iter().chain(&warnings) {
        let _ = writeln!(text, "# {line}");
    }
    text.push_str(&report.to_text());
    Ok(SweepOutcome {
        alphas: unique,
        warnings,
        notices,
        report,
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn validation_lists_offending_keys() {
        let text = r#"
seeds = []
[dataset]
label_noise = 0.7
[loss]
tau = 0.0
[calibration]
alpha = 1.5
[student]
momentum = 1.0
"#;
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        let keys = err.keys();
        for key in [
            "seeds",
            "dataset.label_noise",
            "loss.tau",
            "calibration.alpha",
            "student.momentum",
        ] {
            assert!(keys.contains(&key), "{key} missing from {keys:?}");
        }
        assert!(err.to_string().contains("calibration.alpha"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[dataset]\nclasess = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        assert!(err.to_string().contains("clasess"));
    }

    #[test]
    fn teacher_section_fields() {
        let cfg = ExperimentConfig::from_toml("[teacher]\nhidden = [4, 4]\nseed = 9\nepochs = 3\n")
            .unwrap();
        assert_eq!(cfg.teacher.hidden, vec![4, 4]);
        assert_eq!(cfg.teacher.seed, 9);
        assert_eq!(cfg.teacher_train_config().epochs, 3);
    }

    #[test]
    fn sweep_rejects_empty_list() {
        let err = run_sweep(&ExperimentConfig::default(), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn divergence_maps_to_exit_code_three() {
        let e: WorkflowError = Error::TrainingDiverged { epoch: 2, loss: f64::NAN }.into();
        assert_eq!(e.exit_code(), 3);
        let e: WorkflowError = Error::InvalidArgument("x".into()).into();
        assert_eq!(e.exit_code(), 2);
    }
}
