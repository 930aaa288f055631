//! Distillation objective: `beta * KL(p || q_tau) + gamma * CE(q_1, y)` and
//! its gradient with respect to the student logits.

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationOutcome;
use crate::error::{invalid, Error, Result};
use crate::probvec::{softmax, ClassIndex, LogitVector, ProbVector, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Multiply the KD term (and its gradient) by `tau^2`.
    pub scale_kd_by_tau_squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            beta: 0.9,
            gamma: 0.1,
            scale_kd_by_tau_squared: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.beta + self.gamma <= 0.0 {
            return Err(invalid("beta + gamma must be positive"));
        }
        Ok(())
    }

    fn kd_scale(&self) -> f64 {
        if self.scale_kd_by_tau_squared {
            self.tau * self.tau
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub kd_term: f64,
    pub ce_term: f64,
    /// d total / d student logits.
    pub grad_student_logits: Vec<f64>,
}

/// `sum_i p_i ln(p_i / q_i)`, both sides floored at [`PROB_FLOOR`].
pub fn kd_loss(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(p.values()
        .iter()
        .zip(q.values())
        .map(|(&pi, &qi)| {
            let pi = pi.max(PROB_FLOOR);
            pi * (pi.ln() - qi.max(PROB_FLOOR).ln())
        })
        .sum())
}

/// Negative log-likelihood `-ln q[gt]`.
pub fn ce_loss(q: &ProbVector, gt: ClassIndex) -> Result<f64> {
    if gt.get() >= q.len() {
        return Err(invalid(format!(
            "class index {} out of range for {} classes",
            gt.get(),
            q.len()
        )));
    }
    Ok(-q.get(gt).max(PROB_FLOOR).ln())
}

/// Loss and student-logit gradient for one sample.
pub fn combined_loss(
    teacher_p: &ProbVector,
    student_z: &LogitVector,
    gt: ClassIndex,
    cfg: &LossConfig,
) -> Result<LossValue> {
    sample_loss(teacher_p, student_z, gt, cfg, true)
}

fn sample_loss(
    teacher_p: &ProbVector,
    student_z: &LogitVector,
    gt: ClassIndex,
    cfg: &LossConfig,
    with_kd: bool,
) -> Result<LossValue> {
    cfg.validate()?;
    if teacher_p.len() != student_z.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher_p.len(),
            got: student_z.len(),
        });
    }
    let q_ce = softmax(student_z, 1.0)?;
    let ce_term = ce_loss(&q_ce, gt)?;
    let mut grad: Vec<f64> = q_ce.values().iter().map(|q| cfg.gamma * q).collect();
    grad[gt.get()] -= cfg.gamma;

    let mut kd_term = 0.0;
    if with_kd {
        let q_kd = softmax(student_z, cfg.tau)?;
        let scale = cfg.kd_scale();
        kd_term = scale * kd_loss(teacher_p, &q_kd)?;
        let coef = cfg.beta * scale / cfg.tau;
        for ((g, q), p) in grad.iter_mut().zip(q_kd.values()).zip(teacher_p.values()) {
            *g += coef * (q - p);
        }
    }

    Ok(LossValue {
        total: cfg.beta * kd_term + cfg.gamma * ce_term,
        kd_term,
        ce_term,
        grad_student_logits: grad,
    })
}

/// One sample of a distillation batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub outcome: &'a CalibrationOutcome,
    pub student_z: &'a LogitVector,
    pub gt: ClassIndex,
}

/// Mean loss over a batch together with each sample's gradient of that mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Means of total, KD term, CE term and per-sample gradients.
    pub mean: LossValue,
    /// Gradient of the batch mean with respect to each sample's logits, i.e.
    /// the per-sample gradient divided by the batch size.
    pub sample_grads: Vec<Vec<f64>>,
}

/// Mean reduction in index order. Dropped samples contribute CE only.
pub fn loss_for_batch(batch: &[BatchItem<'_>], cfg: &LossConfig) -> Result<BatchLoss> {
    let Some(first) = batch.first() else {
        return Err(invalid("loss_for_batch needs a non-empty batch"));
    };
    let n = batch.len() as f64;
    let classes = first.student_z.len();
    let mut total = 0.0;
    let mut kd = 0.0;
    let mut ce = 0.0;
    let mut mean_grad = vec![0.0; classes];
    let mut sample_grads = Vec::with_capacity(batch.len());
    for item in batch {
        let v = sample_loss(
            &item.outcome.calibrated,
            item.student_z,
            item.gt,
            cfg,
            !item.outcome.dropped,
        )?;
        if v.grad_student_logits.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: v.grad_student_logits.len(),
            });
        }
        total += v.total;
        kd += v.kd_term;
        ce += v.ce_term;
        let g: Vec<f64> = v.grad_student_logits.iter().map(|g| g / n).collect();
        for (m, gi) in mean_grad.iter_mut().zip(&g) {
            *m += gi;
        }
        sample_grads.push(g);
    }
    Ok(BatchLoss {
        mean: LossValue {
            total: total / n,
            kd_term: kd / n,
            ce_term: ce / n,
            grad_student_logits: mean_grad,
        },
        sample_grads,
    })
}
