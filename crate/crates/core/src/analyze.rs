//! Mis-instruction statistics, top-k accuracy and multi-seed run reports.

use std::fmt::Write as _;

use crate::calibrate::Policy;
use crate::error::{invalid, Error, Result};
use crate::probvec::{argmax_index, LogitVector};

#[derive(Debug, Clone, PartialEq)]
pub struct MisinstructionStats {
    pub total: usize,
    pub misinstructed: usize,
    pub ratio: f64,
    /// Mis-instructed samples per ground-truth class.
    pub per_class_misinstructed: Vec<usize>,
}

fn check_batch(logits: &[LogitVector], labels: &[usize]) -> Result<usize> {
    if logits.len() != labels.len() {
        return Err(invalid(format!(
            "{} logit rows but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let Some(first) = logits.first() else {
        return Err(invalid("empty batch"));
    };
    let classes = first.len();
    for (row, z) in logits.iter().enumerate() {
        if z.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: z.len(),
            });
        }
        if labels[row] >= classes {
            return Err(invalid(format!(
                "label {} at row {row} out of range for {classes} classes",
                labels[row]
            )));
        }
    }
    Ok(classes)
}

/// Counts samples whose raw-logit argmax differs from the label.
pub fn misinstruction_ratio(logits: &[LogitVector], labels: &[usize]) -> Result<MisinstructionStats> {
    let classes = check_batch(logits, labels)?;
    let mut per_class = vec![0; classes];
    for (z, &y) in logits.iter().zip(labels) {
        if argmax_index(z.values()) != y {
            per_class[y] += 1;
        }
    }
    let misinstructed: usize = per_class.iter().sum();
    Ok(MisinstructionStats {
        total: logits.len(),
        misinstructed,
        ratio: misinstructed as f64 / logits.len() as f64,
        per_class_misinstructed: per_class,
    })
}

/// Position of `label` when classes are sorted by descending score, ties
/// going to the lower index.
fn rank_of(z: &[f64], label: usize) -> usize {
    let target = z[label];
    z.iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count()
}

/// Fraction of samples whose label is among the `k` highest logits.
pub fn topk_accuracy(logits: &[LogitVector], labels: &[usize], k: usize) -> Result<f64> {
    let classes = check_batch(logits, labels)?;
    if k == 0 || k > classes {
        return Err(invalid(format!("k must lie in [1, {classes}], got {k}")));
    }
    let misses = logits
        .iter()
        .zip(labels)
        .filter(|(z, &y)| rank_of(z.values(), y) >= k)
        .count();
    // complement of the miss fraction, so top-1 is bit-identical to 1 - ratio
    Ok(1.0 - misses as f64 / logits.len() as f64)
}

/// Metrics of a single distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Row key in the report, e.g. `loca` or `loca-0.95`.
    pub label: String,
    pub policy: Policy,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
    pub final_loss: f64,
    pub calibrated: usize,
    pub dropped: usize,
    pub violations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRow {
    pub label: String,
    pub policy: Policy,
    pub seeds: Vec<u64>,
    pub top1: Vec<f64>,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_top5: f64,
    pub mean_final_loss: f64,
    /// Calibrated samples per run, averaged over seeds.
    pub calibrated: f64,
    pub dropped: f64,
    pub violations: usize,
    pub seconds: f64,
    pub delta_vs_none: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<PolicyRow>,
    pub runs: Vec<RunMetrics>,
    pub baseline_missing: bool,
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs by label (first-appearance order) and computes per-row
/// statistics plus the top-1 difference against the `none` row.
pub fn compare_runs(runs: &[RunMetrics]) -> Result<RunReport> {
    if runs.is_empty() {
        return Err(invalid("compare_runs needs at least one run"));
    }
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut rows: Vec<PolicyRow> = labels
        .iter()
        .map(|&label| {
            let group: Vec<&RunMetrics> = runs.iter().filter(|r| r.label == label).collect();
            let n = group.len() as f64;
            let top1: Vec<f64> = group.iter().map(|r| r.top1).collect();
            let (mean_top1, std_top1) = mean_std(&top1);
            PolicyRow {
                label: label.to_string(),
                policy: group[0].policy,
                seeds: group.iter().map(|r| r.seed).collect(),
                top1,
                mean_top1,
                std_top1,
                mean_top5: group.iter().map(|r| r.top5).sum::<f64>() / n,
                mean_final_loss: group.iter().map(|r| r.final_loss).sum::<f64>() / n,
                calibrated: group.iter().map(|r| r.calibrated as f64).sum::<f64>() / n,
                dropped: group.iter().map(|r| r.dropped as f64).sum::<f64>() / n,
                violations: group.iter().map(|r| r.violations).sum(),
                seconds: group.iter().map(|r| r.seconds).sum(),
                delta_vs_none: None,
            }
        })
        .collect();

    let baseline = rows
        .iter()
        .find(|r| r.policy == Policy::None)
        .map(|r| r.mean_top1);
    if let Some(base) = baseline {
        for row in rows.iter_mut() {
            row.delta_vs_none = Some(row.mean_top1 - base);
        }
    }
    Ok(RunReport {
        rows,
        runs: runs.to_vec(),
        baseline_missing: baseline.is_none(),
    })
}

impl RunReport {
    pub fn row(&self, label: &str) -> Option<&PolicyRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Comma-separated table, one row per policy, followed by the per-seed
    /// runs. Accuracies are in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("policy,mean_top1,std_top1,delta_vs_none,calibrated,dropped,seconds\n");
        for r in &self.rows {
            let delta = match r.delta_vs_none {
                Some(d) => format!("{:+.4}", 100.0 * d),
                None => "NA".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{},{:.1},{:.1},{:.3}",
                r.label,
                100.0 * r.mean_top1,
                100.0 * r.std_top1,
                delta,
                r.calibrated,
                r.dropped,
                r.seconds
            );
        }
        if self.baseline_missing {
            out.push_str("# baseline policy 'none' missing: delta_vs_none not available\n");
        }
        out.push_str("\nrun,seed,top1,top5,final_loss,calibrated,dropped,violations,seconds\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.6},{},{},{},{:.3}",
                r.label,
                r.seed,
                100.0 * r.top1,
                100.0 * r.top5,
                r.final_loss,
                r.calibrated,
                r.dropped,
                r.violations,
                r.seconds
            );
        }
        out
    }
}
