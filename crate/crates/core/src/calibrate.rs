//! Mis-instruction detection and the LoCa calibration transform.
//!
//! For a teacher distribution `p` whose argmax `k` differs from the label
//! `gt`, every non-target entry is multiplied by a common factor `s` and the
//! target takes up the remaining mass:
//!
//! ```text
//! p'[i]  = s * p[i]                 (i != gt)
//! p'[gt] = 1 - sum_{i != gt} p'[i]
//! ```
//!
//! The target is the strict maximum iff `s < sigma = 1 / (1 - p[gt] + p[k])`.
//! With `s = alpha * sigma` the margin `p'[gt] - p'[k]` equals `1 - alpha`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::probvec::{ClassIndex, ProbVector, PROB_FLOOR};

/// How mis-instructed samples are treated during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Vanilla KD: teacher distributions are used as-is.
    None,
    /// Mis-instructed samples are removed from the KD term (CE still sees them).
    Skip,
    /// Mis-instructed samples are calibrated.
    Loca,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::None, Policy::Skip, Policy::Loca];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::Skip => "skip",
            Policy::Loca => "loca",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Policy::None),
            "skip" => Ok(Policy::Skip),
            "loca" => Ok(Policy::Loca),
            other => Err(invalid(format!(
                "unknown policy {other:?}, expected none, skip or loca"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub policy: Policy,
    pub ratio_tolerance: f64,
    /// Permits `alpha >= 1` under the `loca` policy. Only the alpha sweep sets
    /// this; the target is then no longer guaranteed to be the strict argmax.
    #[serde(skip)]
    pub allow_alpha_at_or_above_one: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            policy: Policy::Loca,
            ratio_tolerance: 1e-12,
            allow_alpha_at_or_above_one: false,
        }
    }
}

impl CalibrationConfig {
    pub fn with_policy(policy: Policy, alpha: f64) -> Self {
        Self {
            alpha,
            policy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy == Policy::Loca {
            let ok = if self.allow_alpha_at_or_above_one {
                self.alpha > 0.0 && self.alpha.is_finite()
            } else {
                self.alpha > 0.0 && self.alpha < 1.0
            };
            if !ok {
                return Err(invalid(format!(
                    "alpha must lie in (0, 1) for the loca policy, got {}",
                    self.alpha
                )));
            }
        }
        if !(self.ratio_tolerance >= 0.0) {
            return Err(invalid(format!(
                "ratio_tolerance must be non-negative, got {}",
                self.ratio_tolerance
            )));
        }
        Ok(())
    }
}

/// Result of running one sample through a calibration policy.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    /// Distribution handed to the KD loss.
    pub calibrated: ProbVector,
    pub was_misinstructed: bool,
    /// `1 / (1 - p[gt] + p[k])`; exactly 1 for correctly predicted samples.
    pub sigma: f64,
    /// `alpha * sigma`, the factor applied (or that would be applied) to the
    /// non-target entries.
    pub s: f64,
    /// Set by the `skip` policy: the sample is excluded from the KD term.
    pub dropped: bool,
}

impl CalibrationOutcome {
    fn untouched(p: &ProbVector, misinstructed: bool, sigma: f64, s: f64) -> Self {
        Self {
            calibrated: p.clone(),
            was_misinstructed: misinstructed,
            sigma,
            s,
            dropped: false,
        }
    }
}

/// True iff the teacher's argmax (lowest index on ties) differs from `gt`.
pub fn is_misinstructed(p: &ProbVector, gt: ClassIndex) -> bool {
    p.argmax() != gt
}

/// `1 / (1 - p[gt] + p[k])` with `k` the argmax of `p`. Lies in `(0, 1]`.
pub fn sigma_threshold(p: &ProbVector, gt: ClassIndex) -> f64 {
    let k = p.argmax();
    if k == gt {
        return 1.0;
    }
    1.0 / (1.0 - p.get(gt) + p.get(k))
}

/// Applies the non-target scaling with an arbitrary factor `s`.
///
/// No feasibility check is made: for `s >= sigma` the target is no longer the
/// strict maximum, and for large `s` the target entry can become negative.
pub fn scale_non_target(p: &[f64], gt: usize, s: f64) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|v| s * v).collect();
    let non_target: f64 = out
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != gt)
        .map(|(_, v)| v)
        .sum();
    out[gt] = 1.0 - non_target;
    out
}

/// LoCa calibration of a single teacher distribution.
///
/// Correctly predicted samples pass through unchanged. `alpha` must lie in
/// `(0, 1)`.
pub fn calibrate_loca(p: &ProbVector, gt: ClassIndex, alpha: f64) -> Result<CalibrationOutcome> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    calibrate_with_alpha(p, gt, alpha)
}

/// LoCa without the `alpha < 1` guard, used to study the degradation for
/// `alpha >= 1`. A target entry pushed below the probability floor is clamped
/// and the vector renormalised.
pub fn calibrate_loca_unguarded(
    p: &ProbVector,
    gt: ClassIndex,
    alpha: f64,
) -> Result<CalibrationOutcome> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    calibrate_with_alpha(p, gt, alpha)
}

fn calibrate_with_alpha(p: &ProbVector, gt: ClassIndex, alpha: f64) -> Result<CalibrationOutcome> {
    check_class(p, gt)?;
    let sigma = sigma_threshold(p, gt);
    let s = alpha * sigma;
    if !is_misinstructed(p, gt) {
        return Ok(CalibrationOutcome::untouched(p, false, sigma, s));
    }
    let mut values = scale_non_target(p.values(), gt.get(), s);
    if values[gt.get()] < PROB_FLOOR {
        values[gt.get()] = PROB_FLOOR;
        let sum: f64 = values.iter().sum();
        for v in values.iter_mut() {
            *v /= sum;
        }
    }
    Ok(CalibrationOutcome {
        calibrated: ProbVector::from_trusted(values),
        was_misinstructed: true,
        sigma,
        s,
        dropped: false,
    })
}

fn check_class(p: &ProbVector, gt: ClassIndex) -> Result<()> {
    if gt.get() >= p.len() {
        return Err(invalid(format!(
            "class index {} out of range for {} classes",
            gt.get(),
            p.len()
        )));
    }
    Ok(())
}

/// Checks `|q[i]/q[j] - p[i]/p[j]| <= tol * p[i]/p[j]` for all non-target
/// pairs. Comparing every entry against a single reference entry is
/// sufficient up to a factor of two in the tolerance, so the check uses the
/// largest non-target entry as reference and `tol / 2`.
pub fn non_target_ratios_preserved(p: &[f64], q: &[f64], gt: usize, tol: f64) -> bool {
    if p.len() != q.len() {
        return false;
    }
    let reference = (0..p.len())
        .filter(|&i| i != gt)
        .max_by(|&a, &b| p[a].total_cmp(&p[b]));
    let Some(r) = reference else {
        return true;
    };
    (0..p.len()).filter(|&i| i != gt && i != r).all(|i| {
        let expected = p[i] / p[r];
        let got = q[i] / q[r];
        (got - expected).abs() <= 0.5 * tol * expected
    })
}

/// Batch-level counters produced by [`apply_policy`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub total: usize,
    pub misinstructed: usize,
    pub ratio: f64,
    pub calibrated: usize,
    pub dropped: usize,
}

/// Runs every `(teacher distribution, label)` pair through the configured
/// policy. Outcomes are returned in input order.
pub fn apply_policy(
    batch: &[(ProbVector, ClassIndex)],
    config: &CalibrationConfig,
) -> Result<(Vec<CalibrationOutcome>, BatchStats)> {
    config.validate()?;
    if let Some((first, _)) = batch.first() {
        let classes = first.len();
        if let Some((bad, _)) = batch.iter().find(|(p, _)| p.len() != classes) {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: bad.len(),
            });
        }
    }

    let mut stats = BatchStats {
        total: batch.len(),
        ..BatchStats::default()
    };
    let mut outcomes = Vec::with_capacity(batch.len());
    for (p, gt) in batch {
        check_class(p, *gt)?;
        let outcome = match config.policy {
            Policy::None | Policy::Skip => {
                let misinstructed = is_misinstructed(p, *gt);
                let sigma = sigma_threshold(p, *gt);
                let mut o =
                    CalibrationOutcome::untouched(p, misinstructed, sigma, config.alpha * sigma);
                o.dropped = config.policy == Policy::Skip && misinstructed;
                o
            }
            Policy::Loca => calibrate_with_alpha(p, *gt, config.alpha)?,
        };
        if outcome.was_misinstructed {
            stats.misinstructed += 1;
            if outcome.dropped {
                stats.dropped += 1;
            } else if config.policy == Policy::Loca {
                stats.calibrated += 1;
            }
        }
        outcomes.push(outcome);
    }
    stats.ratio = if stats.total == 0 {
        0.0
    } else {
        stats.misinstructed as f64 / stats.total as f64
    };
    Ok((outcomes, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probvec::{argmax_index, validate_prob};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        validate_prob(v, false).unwrap()
    }

    fn ci(i: usize, c: usize) -> ClassIndex {
        ClassIndex::new(i, c).unwrap()
    }

    #[test]
    fn misinstruction_examples() {
        assert!(is_misinstructed(&pv(&[0.4, 0.6]), ci(0, 2)));
        assert!(!is_misinstructed(&pv(&[0.6, 0.4]), ci(0, 2)));
        assert!(!is_misinstructed(&pv(&[0.5, 0.5]), ci(0, 2)));
        assert!(is_misinstructed(&pv(&[0.5, 0.5]), ci(1, 2)));
    }

    #[test]
    fn sigma_examples() {
        // 1 / (1 - 0.4 + 0.6) = 1 / 1.2
        assert!((sigma_threshold(&pv(&[0.4, 0.6]), ci(0, 2)) - 1.0 / 1.2).abs() < 1e-15);
        // 1 / (1 - 0.3 + 0.5) = 1 / 1.2
        assert!((sigma_threshold(&pv(&[0.2, 0.5, 0.3]), ci(2, 3)) - 1.0 / 1.2).abs() < 1e-15);
        assert_eq!(sigma_threshold(&pv(&[0.7, 0.3]), ci(0, 2)), 1.0);
    }

    #[test]
    fn loca_two_class_example() {
        // s = 0.9 / 1.2 = 0.75; non-target 0.6 -> 0.45; target 1 - 0.45.
        let out = calibrate_loca(&pv(&[0.4, 0.6]), ci(0, 2), 0.9).unwrap();
        assert!(out.was_misinstructed);
        assert!((out.s - 0.75).abs() < 1e-15);
        let v = out.calibrated.values();
        assert!((v[0] - 0.55).abs() < 1e-12);
        assert!((v[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn loca_three_class_example() {
        let p = pv(&[0.2, 0.5, 0.3]);
        let out = calibrate_loca(&p, ci(2, 3), 0.9).unwrap();
        let v = out.calibrated.values();
        assert!((v[0] - 0.15).abs() < 1e-12);
        assert!((v[1] - 0.375).abs() < 1e-12);
        assert!((v[2] - 0.475).abs() < 1e-12);
        assert!((v[0] / v[1] - 0.4).abs() < 1e-12);
        assert!(non_target_ratios_preserved(p.values(), v, 2, 1e-12));
    }

    #[test]
    fn correct_samples_pass_through() {
        let p = pv(&[0.6, 0.4]);
        for alpha in [0.1, 0.5, 0.95, 0.999] {
            let out = calibrate_loca(&p, ci(0, 2), alpha).unwrap();
            assert!(!out.was_misinstructed);
            assert_eq!(out.calibrated, p);
            assert_eq!(out.sigma, 1.0);
        }
    }

    #[test]
    fn alpha_out_of_range() {
        let p = pv(&[0.4, 0.6]);
        for alpha in [0.0, 1.0, 1.5, -0.1, f64::NAN] {
            assert!(calibrate_loca(&p, ci(0, 2), alpha).is_err());
        }
        assert!(calibrate_loca_unguarded(&p, ci(0, 2), 1.0).is_ok());
    }

    #[test]
    fn tie_with_higher_label_is_calibrated() {
        // Tie resolves to index 0, so gt = 1 is mis-instructed and sigma = 1.
        let p = pv(&[0.5, 0.5]);
        let out = calibrate_loca(&p, ci(1, 2), 0.9).unwrap();
        assert!(out.was_misinstructed);
        assert_eq!(out.sigma, 1.0);
        assert_eq!(out.calibrated.argmax().get(), 1);
        assert!((out.calibrated.values()[1] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_gives_boundary_tie() {
        let out = calibrate_loca_unguarded(&pv(&[0.4, 0.6]), ci(0, 2), 1.0).unwrap();
        let v = out.calibrated.values();
        assert!((v[0] - v[1]).abs() < 1e-12);
    }

    #[test]
    fn large_alpha_is_clamped_inside_simplex() {
        let p = pv(&[0.01, 0.98, 0.01]);
        let out = calibrate_loca_unguarded(&p, ci(0, 3), 5.0).unwrap();
        let v = out.calibrated.values();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn batch_with_errors(n: usize, wrong: &[usize]) -> Vec<(ProbVector, ClassIndex)> {
        (0..n)
            .map(|i| {
                let p = pv(&[0.2, 0.7, 0.1]);
                let gt = if wrong.contains(&i) { i % 2 * 2 } else { 1 };
                (p, ci(gt, 3))
            })
            .collect()
    }

    #[test]
    fn policies_on_clean_batch() {
        let batch = batch_with_errors(4, &[]);
        for policy in Policy::ALL {
            let (outs, stats) =
                apply_policy(&batch, &CalibrationConfig::with_policy(policy, 0.9)).unwrap();
            assert_eq!(stats.dropped, 0);
            assert_eq!(stats.calibrated, 0);
            assert_eq!(stats.ratio, 0.0);
            for ((p, _), o) in batch.iter().zip(&outs) {
                assert_eq!(&o.calibrated, p);
            }
        }
    }

    #[test]
    fn skip_and_loca_on_noisy_batch() {
        let wrong = [1, 4, 7];
        let batch = batch_with_errors(10, &wrong);
        // naive recount
        let expected = batch.iter().filter(|(p, gt)| argmax_index(p.values()) != gt.get()).count();
        assert_eq!(expected, 3);

        let (outs, stats) =
            apply_policy(&batch, &CalibrationConfig::with_policy(Policy::Skip, 0.9)).unwrap();
        assert_eq!(stats.dropped, 3);
        assert_eq!(stats.calibrated, 0);
        assert!((stats.ratio - 0.3).abs() < 1e-15);
        for (i, o) in outs.iter().enumerate() {
            assert_eq!(o.dropped, wrong.contains(&i));
        }

        let (outs, stats) =
            apply_policy(&batch, &CalibrationConfig::with_policy(Policy::Loca, 0.9)).unwrap();
        assert_eq!(stats.dropped, 0);
        assert_eq!(stats.calibrated, 3);
        for (o, (_, gt)) in outs.iter().zip(&batch) {
            assert_eq!(argmax_index(o.calibrated.values()), gt.get());
        }
    }

    #[test]
    fn mixed_class_counts_rejected() {
        let batch = vec![(pv(&[0.5, 0.5]), ci(0, 2)), (pv(&[0.2, 0.3, 0.5]), ci(0, 3))];
        assert!(matches!(
            apply_policy(&batch, &CalibrationConfig::default()),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = CalibrationConfig::with_policy(Policy::Loca, 1.0);
        assert!(cfg.validate().is_err());
        cfg.allow_alpha_at_or_above_one = true;
        assert!(cfg.validate().is_ok());
        // alpha is ignored by the other policies
        assert!(CalibrationConfig::with_policy(Policy::Skip, 3.0).validate().is_ok());
        assert_eq!("skip".parse::<Policy>().unwrap(), Policy::Skip);
        assert!("dkd".parse::<Policy>().is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, usize, f64)> {
        (2usize..200).prop_flat_map(|c| {
            (
                prop::collection::vec(1e-6f64..1.0, c),
                0..c,
                1e-4f64..0.9999,
            )
        })
    }

    fn normalise(raw: &[f64]) -> ProbVector {
        let sum: f64 = raw.iter().sum();
        let v: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        validate_prob(&v, false).unwrap()
    }

    proptest! {
        #[test]
        fn loca_invariants((raw, gt, alpha) in arb_case()) {
            let p = normalise(&raw);
            let gt = ClassIndex::new(gt, p.len()).unwrap();
            let out = calibrate_loca(&p, gt, alpha).unwrap();
            let v = out.calibrated.values();
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(out.sigma > 0.0 && out.sigma <= 1.0);
            prop_assert!(out.s < out.sigma);
            prop_assert_eq!(out.sigma == 1.0, !out.was_misinstructed);
            let best_other = v.iter().enumerate()
                .filter(|&(i, _)| i != gt.get())
                .map(|(_, x)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if out.was_misinstructed {
                prop_assert!(v[gt.get()] > best_other);
                prop_assert!(non_target_ratios_preserved(p.values(), v, gt.get(), 1e-12));
            }
        }

        #[test]
        fn target_mass_decreases_in_alpha((raw, gt, a) in arb_case(), b in 1e-4f64..0.9999) {
            let p = normalise(&raw);
            let gt = ClassIndex::new(gt, p.len()).unwrap();
            prop_assume!(is_misinstructed(&p, gt) && (a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let t_lo = calibrate_loca(&p, gt, lo).unwrap().calibrated.get(gt);
            let t_hi = calibrate_loca(&p, gt, hi).unwrap().calibrated.get(gt);
            prop_assert!(t_lo > t_hi);
            let sigma = sigma_threshold(&p, gt);
            let closed_form = 1.0 - hi * sigma * (1.0 - p.get(gt));
            prop_assert!((t_hi - closed_form).abs() < 1e-12);
        }
    }
}
