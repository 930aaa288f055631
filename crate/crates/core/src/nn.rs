//! Minimal MLP trainer and synthetic Gaussian-cluster data.
//!
//! Everything here is single-threaded and deterministic for a given seed.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analyze::{misinstruction_ratio, topk_accuracy, MisinstructionStats};
use crate::calibrate::{apply_policy, CalibrationConfig, Policy};
use crate::error::{invalid, Error, Result};
use crate::losses::{combined_loss, loss_for_batch, BatchItem, LossConfig};
use crate::probvec::{argmax_index, softmax, ClassIndex, LogitVector, ProbVector};

const TRAIN_FRACTION: f64 = 0.7;
const VALID_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub dims: usize,
    pub features: Vec<Vec<f64>>,
    /// Labels used for training and evaluation. Training labels may be noisy.
    pub labels: Vec<usize>,
    /// Labels before noise injection.
    pub clean_labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Parameters of [`gen_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dims: usize,
    pub samples: usize,
    /// Standard deviation of samples around their centroid.
    pub cluster_spread: f64,
    /// Fraction of training labels flipped to a different class.
    pub label_noise: f64,
    /// Gaussian modes per class; more modes make the classes harder to fit.
    pub modes_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dims: 16,
            samples: 2000,
            cluster_spread: 1.0,
            label_noise: 0.0,
            modes_per_class: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.dims < 2 {
            return Err(invalid(format!("dims must be >= 2, got {}", self.dims)));
        }
        if self.samples < self.classes {
            return Err(invalid(format!(
                "samples ({}) must be at least classes ({})",
                self.samples, self.classes
            )));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(invalid(format!(
                "cluster_spread must be positive, got {}",
                self.cluster_spread
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(invalid(format!(
                "label_noise must lie in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        if self.modes_per_class == 0 {
            return Err(invalid("modes_per_class must be >= 1"));
        }
        Ok(())
    }
}

/// Gaussian clusters with balanced classes and a 70/10/20 split.
///
/// Exactly `round(label_noise * n_train)` training labels are moved to a
/// uniformly chosen wrong class. Validation and test labels stay clean.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let (c, d, n) = (spec.classes, spec.dims, spec.samples);

    let centroids: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|_| {
            (0..spec.modes_per_class)
                .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect();

    let mut clean_labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    clean_labels.shuffle(&mut rng);
    let features: Vec<Vec<f64>> = clean_labels
        .iter()
        .map(|&y| {
            let mode = rng.gen_range(0..spec.modes_per_class);
            centroids[y][mode]
                .iter()
                .map(|&m| m + spec.cluster_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let n_valid = ((n as f64) * VALID_FRACTION).round() as usize;
    let splits: Vec<Split> = (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            }
        })
        .collect();

    let mut labels = clean_labels.clone();
    let n_noisy = (spec.label_noise * n_train as f64).round() as usize;
    let mut train: Vec<usize> = (0..n_train).collect();
    let (flipped, _) = train.partial_shuffle(&mut rng, n_noisy);
    for &i in flipped.iter() {
        let offset = rng.gen_range(1..c);
        labels[i] = (clean_labels[i] + offset) % c;
    }

    Ok(Dataset {
        classes: c,
        dims: d,
        features,
        labels,
        clean_labels,
        splits,
    })
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }
}

/// Affine layers with ReLU in between and identity at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
}

impl MlpModel {
    /// He-normal weights, zero biases. `dims` is `[input, hidden.., classes]`.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("finite std");
                Dense {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("model needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(invalid(format!("layer {i} has inconsistent parameter shapes")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(invalid(format!(
                    "layer {i} expects {} inputs but previous layer emits {}",
                    l.inputs,
                    layers[i - 1].outputs
                )));
            }
        }
        let out = layers.last().map(|l| l.outputs).unwrap_or(0);
        if out < 2 {
            return Err(invalid("model must emit at least 2 classes"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<LogitVector> {
        let trace = self.trace(x)?;
        let out = trace.into_iter().last().expect("at least one layer");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        LogitVector::new(out)
    }

    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<LogitVector>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Input followed by the output of every layer (post-ReLU for hidden
    /// layers).
    fn trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.apply(&acts[i]);
            if i < last {
                for v in h.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            acts.push(h);
        }
        Ok(acts)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(invalid(format!("invalid layer dimensions {dims:?}")));
    }
    if dims[dims.len() - 1] < 2 {
        return Err(invalid("model must emit at least 2 classes"));
    }
    Ok(())
}

/// SGD with classical momentum: `v = momentum * v + g; w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Sgd {
    pub fn new(model: &MlpModel, lr: f64, momentum: f64) -> Self {
        let velocity = model
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
            .collect();
        Self {
            lr,
            momentum,
            velocity,
        }
    }
}

/// Backpropagates per-sample logit gradients and applies one SGD step.
///
/// `grads[i]` is the gradient of the batch objective with respect to the
/// logits of `inputs[i]`; contributions are summed in index order.
pub fn backward_and_step(
    model: &mut MlpModel,
    sgd: &mut Sgd,
    inputs: &[&[f64]],
    grads: &[Vec<f64>],
) -> Result<()> {
    if inputs.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: grads.len(),
        });
    }
    if sgd.velocity.len() != model.layers.len() {
        return Err(invalid("optimizer state does not match the model"));
    }
    let mut acc: Vec<(Vec<f64>, Vec<f64>)> = model
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
        .collect();

    for (x, g) in inputs.iter().zip(grads) {
        if g.len() != model.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.output_dim(),
                got: g.len(),
            });
        }
        let acts = model.trace(x)?;
        let mut delta = g.clone();
        for (li, layer) in model.layers.iter().enumerate().rev() {
            let a_in = &acts[li];
            let (gw, gb) = &mut acc[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &a) in row.iter_mut().zip(a_in) {
                    *w += d * a;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                // ReLU derivative, taken from the post-activation value
                for (p, &a) in prev.iter_mut().zip(a_in) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    for ((layer, (vw, vb)), (gw, gb)) in model
        .layers
        .iter_mut()
        .zip(sgd.velocity.iter_mut())
        .zip(acc)
    {
        for ((w, v), g) in layer.weights.iter_mut().zip(vw.iter_mut()).zip(gw) {
            *v = sgd.momentum * *v + g;
            *w -= sgd.lr * *v;
        }
        for ((b, v), g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(gb) {
            *v = sgd.momentum * *v + g;
            *b -= sgd.lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub calibration: CalibrationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            loss: LossConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.loss.validate()?;
        self.calibration.validate()
    }
}

/// Cross-entropy at temperature 1.
const SUPERVISED: LossConfig = LossConfig {
    tau: 1.0,
    beta: 0.0,
    gamma: 1.0,
    scale_kd_by_tau_squared: false,
};

/// One plain cross-entropy step. Returns the mean batch loss.
pub fn supervised_step(
    model: &mut MlpModel,
    sgd: &mut Sgd,
    inputs: &[&[f64]],
    labels: &[usize],
) -> Result<f64> {
    let logits = model.forward_batch(inputs)?;
    let n = inputs.len() as f64;
    let c = model.output_dim();
    // any distribution will do for the teacher slot; beta = 0 ignores it
    let uniform = crate::probvec::validate_prob(&vec![1.0 / c as f64; c], false)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(inputs.len());
    for (z, &y) in logits.iter().zip(labels) {
        let v = combined_loss(&uniform, z, ClassIndex::new(y, c)?, &SUPERVISED)?;
        total += v.total;
        grads.push(v.grad_student_logits.iter().map(|g| g / n).collect());
    }
    backward_and_step(model, sgd, inputs, &grads)?;
    Ok(total / n)
}

/// Counters of one distillation step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub loss: f64,
    pub misinstructed: usize,
    pub calibrated: usize,
    pub dropped: usize,
    /// Calibrated vectors whose argmax is not the label.
    pub violations: usize,
}

/// One distillation step: teacher distributions at `tau`, calibration
/// policy, combined loss, SGD update of the student.
pub fn distill_step(
    student: &mut MlpModel,
    sgd: &mut Sgd,
    teacher: &MlpModel,
    inputs: &[&[f64]],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let c = student.output_dim();
    let teacher_p: Vec<ProbVector> = teacher
        .forward_batch(inputs)?
        .iter()
        .map(|z| softmax(z, cfg.loss.tau))
        .collect::<Result<_>>()?;
    let pairs: Vec<(ProbVector, ClassIndex)> = teacher_p
        .into_iter()
        .zip(labels)
        .map(|(p, &y)| Ok((p, ClassIndex::new(y, c)?)))
        .collect::<Result<_>>()?;
    let (outcomes, stats) = apply_policy(&pairs, &cfg.calibration)?;

    let violations = outcomes
        .iter()
        .zip(&pairs)
        .filter(|(o, (_, gt))| {
            cfg.calibration.policy == Policy::Loca
                && o.was_misinstructed
                && argmax_index(o.calibrated.values()) != gt.get()
        })
        .count();

    let student_z = student.forward_batch(inputs)?;
    let items: Vec<BatchItem> = outcomes
        .iter()
        .zip(&student_z)
        .zip(&pairs)
        .map(|((o, z), (_, gt))| BatchItem {
            outcome: o,
            student_z: z,
            gt: *gt,
        })
        .collect();
    let batch = loss_for_batch(&items, &cfg.loss)?;
    backward_and_step(student, sgd, inputs, &batch.sample_grads)?;

    Ok(StepReport {
        loss: batch.mean.total,
        misinstructed: stats.misinstructed,
        calibrated: stats.calibrated,
        dropped: stats.dropped,
        violations,
    })
}

fn split_view<'a>(data: &'a Dataset, idx: &[usize]) -> (Vec<&'a [f64]>, Vec<usize>) {
    (
        idx.iter().map(|&i| data.features[i].as_slice()).collect(),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

fn check_dataset(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    if data.features.len() != data.len() || data.splits.len() != data.len() {
        return Err(invalid("dataset columns have different lengths"));
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= data.classes) {
        return Err(invalid(format!("label {y} out of range for {} classes", data.classes)));
    }
    if data.indices(Split::Train).is_empty() {
        return Err(invalid("dataset has no training samples"));
    }
    Ok(())
}

/// Turns non-finite losses, and errors raised while the parameters are
/// non-finite, into [`Error::TrainingDiverged`].
fn diverged_at<T: StepLoss>(epoch: usize, model: &MlpModel, step: Result<T>) -> Result<T> {
    match step {
        Ok(v) if v.loss().is_finite() && model.is_finite() => Ok(v),
        Ok(v) => Err(Error::TrainingDiverged {
            epoch,
            loss: v.loss(),
        }),
        Err(Error::NonFiniteOutput) => Err(Error::TrainingDiverged {
            epoch,
            loss: f64::NAN,
        }),
        Err(_) if !model.is_finite() => Err(Error::TrainingDiverged {
            epoch,
            loss: f64::NAN,
        }),
        Err(e) => Err(e),
    }
}

trait StepLoss {
    fn loss(&self) -> f64;
}

impl StepLoss for f64 {
    fn loss(&self) -> f64 {
        *self
    }
}

impl<T> StepLoss for (f64, T) {
    fn loss(&self) -> f64 {
        self.0
    }
}

fn model_dims(data: &Dataset, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![data.dims];
    dims.extend_from_slice(hidden);
    dims.push(data.classes);
    dims
}

/// Evaluation of a model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEval {
    pub top1: f64,
    pub top5: f64,
    pub misinstruction: MisinstructionStats,
}

pub fn evaluate(model: &MlpModel, data: &Dataset, split: Split) -> Result<SplitEval> {
    let idx = data.indices(split);
    let (x, y) = split_view(data, &idx);
    let logits = model.forward_batch(&x)?;
    let k = data.classes.min(5);
    Ok(SplitEval {
        top1: topk_accuracy(&logits, &y, 1)?,
        top5: topk_accuracy(&logits, &y, k)?,
        misinstruction: misinstruction_ratio(&logits, &y)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mis-instruction on the (possibly noisy) training labels.
    pub train_misinstruction: MisinstructionStats,
    pub loss_curve: Vec<f64>,
}

/// Plain cross-entropy training; the calibration part of `cfg` is ignored.
pub fn train_teacher(
    data: &Dataset,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TeacherMetrics)> {
    check_dataset(data)?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(invalid("invalid optimizer settings"));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::new(&model_dims(data, hidden), &mut rng)?;
    let mut sgd = Sgd::new(&model, cfg.lr, cfg.momentum);
    let mut train = data.indices(Split::Train);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in train.chunks(cfg.batch_size) {
            let (x, y) = split_view(data, chunk);
            let step = supervised_step(&mut model, &mut sgd, &x, &y);
            let loss = diverged_at(epoch, &model, step)?;
            sum += loss;
            batches += 1;
        }
        loss_curve.push(sum / batches as f64);
    }

    let train_eval = evaluate(&model, data, Split::Train)?;
    let test_accuracy = if data.indices(Split::Test).is_empty() {
        0.0
    } else {
        evaluate(&model, data, Split::Test)?.top1
    };
    Ok((
        model,
        TeacherMetrics {
            train_accuracy: train_eval.top1,
            test_accuracy,
            train_misinstruction: train_eval.misinstruction,
            loss_curve,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillMetrics {
    pub policy: Policy,
    pub test_top1: f64,
    pub test_top5: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub misinstructed_per_epoch: Vec<usize>,
    pub calibrated_per_epoch: Vec<usize>,
    pub dropped_per_epoch: Vec<usize>,
    /// Calibrated teacher vectors whose argmax differed from the label.
    pub violations: usize,
}

impl DistillMetrics {
    pub fn final_loss(&self) -> f64 {
        self.loss_curve.last().copied().unwrap_or(f64::NAN)
    }
}

/// Distils a frozen teacher into a fresh student.
pub fn distill_student(
    data: &Dataset,
    teacher: &MlpModel,
    student_hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(MlpModel, DistillMetrics)> {
    check_dataset(data)?;
    cfg.validate()?;
    if teacher.output_dim() != data.classes || teacher.input_dim() != data.dims {
        return Err(invalid(format!(
            "teacher maps {} -> {} but the dataset is {} -> {}",
            teacher.input_dim(),
            teacher.output_dim(),
            data.dims,
            data.classes
        )));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut student = MlpModel::new(&model_dims(data, student_hidden), &mut rng)?;
    let mut sgd = Sgd::new(&student, cfg.lr, cfg.momentum);
    let mut train = data.indices(Split::Train);
    let mut metrics = DistillMetrics {
        policy: cfg.calibration.policy,
        test_top1: 0.0,
        test_top5: 0.0,
        loss_curve: Vec::with_capacity(cfg.epochs),
        misinstructed_per_epoch: Vec::with_capacity(cfg.epochs),
        calibrated_per_epoch: Vec::with_capacity(cfg.epochs),
        dropped_per_epoch: Vec::with_capacity(cfg.epochs),
        violations: 0,
    };

    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        let (mut mis, mut cal, mut drop) = (0, 0, 0);
        for chunk in train.chunks(cfg.batch_size) {
            let (x, y) = split_view(data, chunk);
            let step = distill_step(&mut student, &mut sgd, teacher, &x, &y, cfg);
            let step = diverged_at(epoch, &student, step.map(|s| (s.loss, s)))?.1;
            sum += step.loss;
            batches += 1;
            mis += step.misinstructed;
            cal += step.calibrated;
            drop += step.dropped;
            metrics.violations += step.violations;
        }
        metrics.loss_curve.push(sum / batches as f64);
        metrics.misinstructed_per_epoch.push(mis);
        metrics.calibrated_per_epoch.push(cal);
        metrics.dropped_per_epoch.push(drop);
    }

    if !data.indices(Split::Test).is_empty() {
        let eval = evaluate(&student, data, Split::Test)?;
        metrics.test_top1 = eval.top1;
        metrics.test_top5 = eval.top5;
    }
    Ok((student, metrics))
}
