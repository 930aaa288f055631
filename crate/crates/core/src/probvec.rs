//! Logit and probability vectors over `C` classes.

use crate::error::{invalid, Error, Result};

/// Floor applied to probabilities before they are fed to a logarithm, and
/// after softmax underflow.
pub const PROB_FLOOR: f64 = 1e-12;

/// Absolute tolerance on `|sum - 1|` for a vector to count as a distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Raw pre-softmax scores for `C >= 2` classes. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(invalid(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("logit {i} is not finite: {}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A point strictly inside the probability simplex.
///
/// Every entry lies in `(0, 1)` and the entries sum to one within
/// [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: ClassIndex) -> f64 {
        self.0[class.get()]
    }

    pub fn argmax(&self) -> ClassIndex {
        ClassIndex(argmax_index(&self.0))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Wraps values that the caller has already shown to be a distribution.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2);
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        Self(values)
    }
}

/// Index of a class, `0 <= index < C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassIndex(usize);

impl ClassIndex {
    /// Checks `index < classes`.
    pub fn new(index: usize, classes: usize) -> Result<Self> {
        if index >= classes {
            return Err(invalid(format!(
                "class index {index} out of range for {classes} classes"
            )));
        }
        Ok(Self(index))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// One-hot label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotVector(Vec<f64>);

impl OneHotVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn hot(&self) -> ClassIndex {
        ClassIndex(argmax_index(&self.0))
    }
}

/// Temperature softmax `exp(z_i / tau) / sum_j exp(z_j / tau)`.
///
/// The maximum scaled logit is subtracted before exponentiating. Entries that
/// underflow below [`PROB_FLOOR`] are raised to the floor and the vector is
/// renormalised, so the result always lies strictly inside the simplex.
pub fn softmax(z: &LogitVector, tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let mut out = softmax_raw(z.values(), tau);
    if out.iter().any(|&p| p < PROB_FLOOR) {
        for p in out.iter_mut() {
            *p = p.max(PROB_FLOOR);
        }
        let sum: f64 = out.iter().sum();
        for p in out.iter_mut() {
            *p /= sum;
        }
    }
    Ok(ProbVector(out))
}

/// Unfloored, unchecked temperature softmax. Inputs must be finite.
pub(crate) fn softmax_raw(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z
        .iter()
        .map(|v| v / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v / tau - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    out
}

/// Smallest index attaining the maximum. Panics on an empty slice.
pub fn argmax_index(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of an empty vector");
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(gt: usize, classes: usize) -> Result<OneHotVector> {
    let gt = ClassIndex::new(gt, classes)?;
    let mut values = vec![0.0; classes];
    values[gt.get()] = 1.0;
    Ok(OneHotVector(values))
}

/// Checks that `raw` is a distribution strictly inside the simplex and returns
/// it renormalised to sum to one.
///
/// With `clamp` set, entries in `[0, PROB_FLOOR)` are raised to the floor
/// first; negative and non-finite entries are always rejected.
pub fn validate_prob(raw: &[f64], clamp: bool) -> Result<ProbVector> {
    if raw.len() < 2 {
        return Err(invalid(format!(
            "distribution needs at least 2 classes, got {}",
            raw.len()
        )));
    }
    let mut values = raw.to_vec();
    for (index, v) in values.iter_mut().enumerate() {
        let value = *v;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Domain { index, value });
        }
        if clamp && value < PROB_FLOOR {
            *v = PROB_FLOOR;
        }
    }
    let sum: f64 = values.iter().sum();
    let deviation = (sum - 1.0).abs();
    if deviation > SUM_TOLERANCE {
        return Err(Error::NotADistribution {
            sum,
            deviation,
            tolerance: SUM_TOLERANCE,
        });
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
    if let Some(index) = values.iter().position(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::Domain {
            index,
            value: raw[index],
        });
    }
    Ok(ProbVector(values))
}
