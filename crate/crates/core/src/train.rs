//! Losses, the Adam optimizer, training loops for fault localization and
//! dynamic state estimation, and the evaluation metrics.
//!
//! Models output raw scores; the cross-entropy loss owns the softmax and the
//! accuracy metric reads the argmax of the raw scores, which is identical
//! either way. Gradients are computed full-batch. Regularization enters the
//! gradient as `2 * l2 * param`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::models::{
    dirodenn_rhs, hnn_rhs, neural_ode_integrate, pinn_eval, pinn_rhs, DirodennParams, HnnParams,
    Model, ModelKind, PinnParams, Task,
};
use crate::swingsim::{FaultSample, PathSample};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset mixes observed-node sets; all samples must share one placement")]
    MixedObservedSets,
    #[error("{kind} is a {expected:?} model but the dataset drives {got:?}")]
    TaskMismatch {
        kind: ModelKind,
        expected: Task,
        got: Task,
    },
    #[error("label row {row} is not one-hot")]
    LabelNotOneHot { row: usize },
    #[error("target path has zero power; accuracy in dB is undefined")]
    ZeroPowerTarget,
    #[error("paths must contain at least 3 time points for the residual term, got {points}")]
    PathTooShort { points: usize },
    #[error("sample {sample} has {got} observed nodes, model expects {want}")]
    ObservedSizeMismatch { sample: usize, got: usize, want: usize },
}

/// Step decay: divide the learning rate by `factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Data-term weight of the PINN loss.
    pub lambda: f64,
    pub schedule: Option<StepDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1e-3,
            l2: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            lambda: 1.0,
            schedule: None,
        }
    }
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, l2: f64) -> Self {
        Self {
            epochs,
            lr,
            l2,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_schedule(mut self, every: usize, factor: f64) -> Self {
        self.schedule = Some(StepDecay { every, factor });
        self
    }

    /// Learning rate in effect at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Some(StepDecay { every, factor }) => self.lr * factor.powi((epoch / every) as i32),
            None => self.lr,
        }
    }

    /// Shipped defaults for a dynamic-state-estimation run: the per-model
    /// optimal (rate | l2) pairs at the requested observability level, with
    /// the HNN trained for 200 epochs and everything else for 1000.
    pub fn dse_default(kind: ModelKind, obs_pct: u32) -> Self {
        let (lr, l2) = dse_hyperparams(kind, obs_pct);
        let epochs = if kind == ModelKind::HNN { 200 } else { 1000 };
        Self::new(epochs, lr, l2)
    }

    /// Stage-1 placement-predictor schedule: 1200 epochs from 0.08, divided
    /// by 10 every 300.
    pub fn placement_stage1() -> Self {
        Self::new(1200, 0.08, 0.0).with_schedule(300, 0.1)
    }

    /// Transfer-retraining schedule: 300 epochs from 0.01, divided by 10
    /// every 100.
    pub fn placement_transfer() -> Self {
        Self::new(300, 0.01, 0.0).with_schedule(100, 0.1)
    }
}

/// Per-model (learning rate, l2) defaults per observability level, from the
/// dynamic-state-estimation tuning table. Levels snap to the nearest of
/// {100, 70, 40, 20, 10, 5}.
pub fn dse_hyperparams(kind: ModelKind, obs_pct: u32) -> (f64, f64) {
    let level = [100u32, 70, 40, 20, 10, 5]
        .into_iter()
        .min_by_key(|l| l.abs_diff(obs_pct))
        .unwrap();
    use ModelKind::*;
    match (kind, level) {
        (LR, _) => (1e-3, 3e-7),
        (FFNN, 100) | (FFNN, 70) => (1e-2, 1e-6),
        (FFNN, 40) => (1e-2, 1e-7),
        (FFNN, 20) => (2e-2, 5e-7),
        (FFNN, _) => (1e-2, 5e-8),
        (GCNN, 100) => (1e-3, 5e-8),
        (GCNN, 70) => (5e-3, 5e-8),
        (GCNN, 40) => (5e-3, 5e-9),
        (GCNN, 20) => (1e-2, 5e-6),
        (GCNN, 10) => (1e-2, 3e-6),
        (GCNN, _) => (5e-2, 5e-8),
        (AlexNet1D, _) => (1e-3, 3e-7),
        (LinODE, 100) | (LinODE, 70) | (LinODE, 40) => (1e-2, 1e-8),
        (LinODE, _) => (5e-2, 5e-8),
        (GraphODE, 100) | (GraphODE, 70) => (2e-2, 3e-9),
        (GraphODE, 40) => (3e-2, 3e-9),
        (GraphODE, 20) | (GraphODE, 10) => (5e-2, 5e-9),
        (GraphODE, _) => (2e-2, 0.0),
        (PINN, 100) => (1e-2, 3e-9),
        (PINN, 70) => (1e-2, 3e-8),
        (PINN, 40) => (5e-3, 3e-8),
        (PINN, _) => (5e-3, 8e-5),
        (HNN, 100) => (1e-2, 0.0),
        (HNN, 70) | (HNN, 40) | (HNN, 20) => (3e-3, 0.0),
        (HNN, 10) => (5e-3, 0.0),
        (HNN, _) => (1e-2, 0.0),
        (DIRODENN, 100) | (DIRODENN, 70) => (5e-3, 1e-8),
        (DIRODENN, 40) => (1e-2, 1e-8),
        (DIRODENN, _) => (5e-2, 1e-8),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-epoch training loss (length = epochs).
    pub loss_curve: Vec<f64>,
    /// Per-epoch metric alongside the loss.
    pub metric_curve: Vec<f64>,
    /// Metric at the final parameters.
    pub final_metric: f64,
    pub metric_name: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Wall time is execution metadata; it stays out of serialized artifacts
    /// so reruns are byte-identical.
    #[serde(skip, default)]
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// CSV export: `epoch,loss,metric`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,loss,metric\n");
        for (e, (l, m)) in self.loss_curve.iter().zip(&self.metric_curve).enumerate() {
            out.push_str(&format!("{e},{l},{m}\n"));
        }
        out
    }
}

/// Adam with bias correction; `l2` folds into the gradient as `2 l2 p`.
pub struct Adam {
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(config: &TrainConfig, shapes: &[usize]) -> Self {
        Self {
            l2: config.l2,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_model(config: &TrainConfig, model: &Model) -> Self {
        let shapes: Vec<usize> = model.params.iter().map(|p| p.values.len()).collect();
        Self::new(config, &shapes)
    }

    /// One bias-corrected update of every parameter tensor.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let grad = g[i] + 2.0 * self.l2 * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean cross-entropy with softmax folded in; log arguments are clamped at
/// `1e-12`.
pub fn cross_entropy(pred: &Tensor, labels: &Tensor) -> Result<Tensor, TrainError> {
    let shape = pred.shape();
    assert_eq!(shape, labels.shape(), "prediction/label shape mismatch");
    let rows = shape[0];
    let cols = shape[1];
    let label_values = labels.value();
    for row in 0..rows {
        let r = &label_values[row * cols..(row + 1) * cols];
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        let zeros = r.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != cols {
            return Err(TrainError::LabelNotOneHot { row });
        }
    }
    let log_p = pred.softmax().clamp_min(1e-12).log();
    Ok(labels.mul(&log_p).sum().scale(-1.0 / rows as f64))
}

/// Path l2 loss: `Σ_samples (1/K) Σ_k ‖target_k - pred_k‖²`. Each pair is one
/// sample's stacked path.
pub fn path_mse(pairs: &[(Tensor, Tensor)]) -> Tensor {
    assert!(!pairs.is_empty(), "path_mse needs at least one sample");
    let mut total: Option<Tensor> = None;
    for (pred, target) in pairs {
        assert_eq!(pred.shape(), target.shape(), "path shape mismatch");
        let k = pred.shape()[0];
        let term = target.sub(pred).square().sum().scale(1.0 / k as f64);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    total.expect("nonempty")
}

/// Discretized physics-regression loss:
/// `λ Σ_{k=1..K} ‖x̂_k - x_k‖² + Σ_{k=0..K-1} ‖x̂_{k+1} - x̂_k - Δ f(x̂_k)‖²`.
///
/// `xhat` and `data` are `[K+1, D]` paths; the data term skips the initial
/// point, matching the K-term sum of the loss definition.
pub fn pinn_loss<F>(
    xhat: &Tensor,
    data: &Tensor,
    f: F,
    lambda: f64,
    dt: f64,
) -> Result<Tensor, TrainError>
where
    F: FnOnce(&Tensor) -> Tensor,
{
    let shape = xhat.shape();
    let points = shape[0];
    if points < 3 {
        return Err(TrainError::PathTooShort { points });
    }
    let k = points - 1;
    let data_term = xhat
        .slice_rows(1, k)
        .sub(&data.slice_rows(1, k))
        .square()
        .sum()
        .scale(lambda);
    let current = xhat.slice_rows(0, k);
    let next = xhat.slice_rows(1, k);
    let residual = next.sub(&current).sub(&f(&current).scale(dt)).square().sum();
    Ok(data_term.add(&residual))
}

/// Prediction accuracy in decibels: `10 log10(P_error / P_output)` with
/// `P_error = Σ ‖pred - target‖²` and `P_output = Σ ‖target‖²`. An exact
/// match clamps at -200 dB.
pub fn accuracy_db(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    assert_eq!(pred.len(), target.len(), "prediction/target length mismatch");
    let p_out: f64 = target.iter().map(|v| v * v).sum();
    if p_out == 0.0 {
        return Err(TrainError::ZeroPowerTarget);
    }
    let p_err: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    if p_err == 0.0 {
        return Ok(-200.0);
    }
    Ok((10.0 * (p_err / p_out).log10()).max(-200.0))
}

/// Folds the two real channels of a complex sample into the model's input
/// representation.
pub fn fold_channels(rule: crate::models::ChannelRule, x: &[num_complex::Complex64]) -> Vec<f64> {
    use crate::models::ChannelRule::*;
    x.iter()
        .map(|c| match rule {
            Sum => c.re + c.im,
            Magnitude => c.norm(),
            Real => c.re,
        })
        .collect()
}

struct EpochStats {
    loss: f64,
    metric: f64,
}

/// Full-batch Adam loop: `build_loss` assembles the loss (and a metric
/// snapshot) on a fresh tape each epoch from the current parameters.
fn run_adam_loop<F>(model: &mut Model, config: &TrainConfig, mut build_loss: F) -> (Vec<f64>, Vec<f64>)
where
    F: FnMut(&Tape, &[Tensor], &Model) -> EpochStats,
{
    let mut adam = Adam::for_model(config, model);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut metric_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let tape = Tape::new();
        let leaves = model.leaves(&tape);
        let stats = build_loss(&tape, &leaves, model);
        loss_curve.push(stats.loss);
        metric_curve.push(stats.metric);
        let grads: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad()).collect();
        let mut values: Vec<Vec<f64>> = model.params.iter().map(|p| p.values.clone()).collect();
        adam.step(&mut values, &grads, config.lr_at(epoch));
        model.set_params(values);
    }
    (loss_curve, metric_curve)
}

/// Assembled localization batch: channel-folded inputs plus one-hot labels.
pub struct LocalizeBatch {
    input_shape: Vec<usize>,
    input: Vec<f64>,
    labels: Vec<f64>,
    label_idx: Vec<usize>,
    classes: usize,
}

impl LocalizeBatch {
    pub fn new(model: &Model, dataset: &[FaultSample]) -> Result<Self, TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if dataset
            .windows(2)
            .any(|w| w[0].obs.indices() != w[1].obs.indices())
        {
            return Err(TrainError::MixedObservedSets);
        }
        let b = dataset.len();
        let n = model.spec.input_dim;
        let classes = model.spec.output_dim;
        let mut input = Vec::with_capacity(b * n);
        let mut labels = vec![0.0; b * classes];
        let mut label_idx = Vec::with_capacity(b);
        for (i, sample) in dataset.iter().enumerate() {
            input.extend(fold_channels(model.spec.channel_rule, &sample.x));
            labels[i * classes + sample.label] = 1.0;
            label_idx.push(sample.label);
        }
        let input_shape = match model.spec.kind {
            ModelKind::AlexNet1D => vec![b, 1, n],
            _ => vec![b, n],
        };
        Ok(Self {
            input_shape,
            input,
            labels,
            label_idx,
            classes,
        })
    }

    fn top1(&self, logits: &[f64]) -> f64 {
        let b = self.label_idx.len();
        let mut hits = 0usize;
        for row in 0..b {
            let scores = &logits[row * self.classes..(row + 1) * self.classes];
            let argmax = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == self.label_idx[row] {
                hits += 1;
            }
        }
        hits as f64 / b as f64
    }
}

/// Top-1 training accuracy of `model` on `dataset`.
pub fn localizer_accuracy(model: &Model, dataset: &[FaultSample]) -> Result<f64, TrainError> {
    let batch = LocalizeBatch::new(model, dataset)?;
    let tape = Tape::new();
    let leaves = model.leaves(&tape);
    let x = tape.constant(&batch.input_shape, batch.input.clone());
    let logits = model.forward(&tape, &leaves, &x);
    Ok(batch.top1(&logits.value()))
}

/// Trains a static model on fault samples with full-batch Adam over the
/// cross-entropy loss; reports top-1 accuracy.
pub fn train_localizer(
    model: &mut Model,
    dataset: &[FaultSample],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if model.spec.task != Task::Localize {
        return Err(TrainError::TaskMismatch {
            kind: model.spec.kind,
            expected: model.spec.task,
            got: Task::Localize,
        });
    }
    let start = Instant::now();
    let batch = LocalizeBatch::new(model, dataset)?;
    let mut label_err = None;
    let (loss_curve, metric_curve) = run_adam_loop(model, config, |tape, leaves, model| {
        let x = tape.constant(&batch.input_shape, batch.input.clone());
        let y = tape.constant(&[batch.label_idx.len(), batch.classes], batch.labels.clone());
        let logits = model.forward(tape, leaves, &x);
        let metric = batch.top1(&logits.value());
        match cross_entropy(&logits, &y) {
            Ok(loss) => {
                loss.backward();
                EpochStats {
                    loss: loss.scalar_value(),
                    metric,
                }
            }
            Err(e) => {
                label_err = Some(e);
                EpochStats {
                    loss: f64::NAN,
                    metric,
                }
            }
        }
    });
    if let Some(e) = label_err {
        return Err(e);
    }
    let final_metric = localizer_accuracy(model, dataset)?;
    Ok(TrainReport {
        loss_curve,
        metric_curve,
        final_metric,
        metric_name: "top1_accuracy".into(),
        seed: config.seed,
        config: config.clone(),
        wall_time: start.elapsed(),
    })
}

/// One-step-ahead pairs from a path dataset, channels stacked into the batch
/// dimension (shared weights per channel).
struct StepBatch {
    input: Vec<f64>,
    target: Vec<f64>,
    rows: usize,
}

impl StepBatch {
    fn new(model: &Model, dataset: &[PathSample]) -> Result<Self, TrainError> {
        let s = model.spec.input_dim;
        let n = model.spec.output_dim;
        let mut input = Vec::new();
        let mut target = Vec::new();
        let mut rows = 0usize;
        for (i, sample) in dataset.iter().enumerate() {
            if sample.observed_count() != s {
                return Err(TrainError::ObservedSizeMismatch {
                    sample: i,
                    got: sample.observed_count(),
                    want: s,
                });
            }
            let k = sample.steps();
            for step in 0..k {
                for channel in 0..2 {
                    for node in 0..s {
                        input.push(sample.input[channel][node][step]);
                    }
                    for node in 0..n {
                        target.push(sample.target[channel][node][step + 1]);
                    }
                    rows += 1;
                }
            }
        }
        Ok(Self {
            input,
            target,
            rows,
        })
    }
}

/// Flat prediction/target arrays extracted from one path sample.
struct PathEval {
    pred: Vec<f64>,
    target: Vec<f64>,
}

/// Builds the tape loss and the dB-metric arrays for one path sample driven
/// by a path-task model.
fn path_sample_loss(
    model: &Model,
    tape: &Tape,
    leaves: &[Tensor],
    sample: &PathSample,
    lambda: f64,
) -> Result<(Tensor, PathEval), TrainError> {
    let s = model.spec.input_dim;
    let n = model.spec.output_dim;
    if sample.observed_count() != s {
        return Err(TrainError::ObservedSizeMismatch {
            sample: 0,
            got: sample.observed_count(),
            want: s,
        });
    }
    let k = sample.steps();
    let dt = sample.dt;

    // initial observed state per channel
    let mag0: Vec<f64> = (0..s).map(|i| sample.input[0][i][0]).collect();
    let phase0: Vec<f64> = (0..s).map(|i| sample.input[1][i][0]).collect();

    match model.spec.kind {
        ModelKind::LinODE | ModelKind::GraphODE => {
            // two channel rows evolve under shared weights
            let mut x0 = mag0.clone();
            x0.extend_from_slice(&phase0);
            let x0 = tape.constant(&[2, s], x0);
            let path = neural_ode_integrate(model, tape, leaves, &x0, k, dt);
            let mut pairs = Vec::with_capacity(k);
            let mut pred_flat = Vec::new();
            let mut target_flat = Vec::new();
            for (step, state) in path.iter().enumerate().skip(1) {
                let projected = if model.spec.needs_projection() {
                    state.matmul(&leaves[2].transpose()).add(&leaves[3])
                } else {
                    state.clone()
                };
                let mut t = Vec::with_capacity(2 * n);
                for channel in 0..2 {
                    for node in 0..n {
                        t.push(sample.target[channel][node][step]);
                    }
                }
                let target = tape.constant(&[2, n], t.clone());
                pred_flat.extend(projected.value());
                target_flat.extend(t);
                pairs.push((projected, target));
            }
            let mut loss: Option<Tensor> = None;
            for (pred, target) in &pairs {
                let term = target.sub(pred).square().sum().scale(1.0 / k as f64);
                loss = Some(match loss {
                    Some(l) => l.add(&term),
                    None => term,
                });
            }
            Ok((
                loss.expect("k >= 1"),
                PathEval {
                    pred: pred_flat,
                    target: target_flat,
                },
            ))
        }
        ModelKind::DIRODENN | ModelKind::HNN => {
            // swing-structured state (θ, ω) over the observed nodes; ω(0)
            // is unobserved and starts at zero. The magnitude channel is
            // carried through unchanged, and loss and metric compare on the
            // observed sub-target.
            let mut theta = tape.constant(&[s], phase0.clone());
            let mut omega = tape.constant(&[s], vec![0.0; s]);
            let obs = &sample.obs;
            let mut loss: Option<Tensor> = None;
            let mut pred_flat = Vec::new();
            let mut target_flat = Vec::new();
            for step in 1..=k {
                let (dtheta, domega) = match model.spec.kind {
                    ModelKind::DIRODENN => {
                        let params = DirodennParams::from_leaves(leaves);
                        dirodenn_rhs(&params, tape, &theta, &omega)
                    }
                    _ => {
                        let params = HnnParams::from_leaves(leaves);
                        hnn_rhs(&params, tape, &theta, &omega)
                    }
                };
                theta = theta.add(&dtheta.scale(dt));
                omega = omega.add(&domega.scale(dt));
                let phase_target: Vec<f64> = obs
                    .iter()
                    .map(|&node| sample.target[1][node][step])
                    .collect();
                let t = tape.constant(&[s], phase_target.clone());
                let term = t.sub(&theta).square().sum().scale(1.0 / k as f64);
                loss = Some(match loss {
                    Some(l) => l.add(&term),
                    None => term,
                });
                // magnitude carried constant; phase predicted
                pred_flat.extend(&mag0);
                pred_flat.extend(theta.value());
                for &node in obs {
                    target_flat.push(sample.target[0][node][step]);
                }
                target_flat.extend(phase_target);
            }
            Ok((
                loss.expect("k >= 1"),
                PathEval {
                    pred: pred_flat,
                    target: target_flat,
                },
            ))
        }
        ModelKind::PINN => {
            // fit a time network to the observed path and a learnable
            // right-hand side to its own increments
            let params = PinnParams::from_leaves(leaves);
            let points = k + 1;
            let times: Vec<f64> = (0..points).map(|i| i as f64 / k as f64).collect();
            let t = tape.constant(&[points, 1], times);
            let xhat = pinn_eval(&params, &t);
            // observed-column selector: [2n] -> [2s]
            let obs = &sample.obs;
            let mut selector = vec![0.0; 2 * s * 2 * n];
            for (i, &node) in obs.iter().enumerate() {
                selector[i * 2 * n + node] = 1.0;
                selector[(s + i) * 2 * n + n + node] = 1.0;
            }
            let sel = tape.constant(&[2 * s, 2 * n], selector);
            let xhat_obs = xhat.matmul(&sel.transpose());
            let mut data = Vec::with_capacity(points * 2 * s);
            for step in 0..points {
                for &node in obs {
                    data.push(sample.target[0][node][step]);
                }
                for &node in obs {
                    data.push(sample.target[1][node][step]);
                }
            }
            let data_t = tape.constant(&[points, 2 * s], data.clone());
            let loss = pinn_loss(
                &xhat_obs,
                &data_t,
                |x| pinn_rhs(&params, &x.matmul(&sel)).matmul(&sel.transpose()),
                lambda,
                dt,
            )?;
            let pred = xhat_obs.value()[2 * s..].to_vec();
            let target = data[2 * s..].to_vec();
            Ok((loss, PathEval { pred, target }))
        }
        other => panic!("{other:?} is not a path-task model"),
    }
}

/// Trains a dynamic-state-estimation model. Step-task kinds train on
/// one-step-ahead pairs; path-task kinds train on whole trajectories. The
/// metric is prediction accuracy in dB over the training paths.
pub fn train_dse(
    model: &mut Model,
    dataset: &[PathSample],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.windows(2).any(|w| w[0].obs != w[1].obs) {
        return Err(TrainError::MixedObservedSets);
    }
    let start = Instant::now();
    match model.spec.task {
        Task::DseStep => {
            let s = model.spec.input_dim;
            let n = model.spec.output_dim;
            let batch = StepBatch::new(model, dataset)?;
            let (loss_curve, metric_curve) =
                run_adam_loop(model, config, |tape, leaves, model| {
                    let x = tape.constant(&[batch.rows, s], batch.input.clone());
                    let y = tape.constant(&[batch.rows, n], batch.target.clone());
                    let pred = model.forward(tape, leaves, &x);
                    let loss = y.sub(&pred).square().sum();
                    loss.backward();
                    let metric = accuracy_db(&pred.value(), &batch.target).unwrap_or(f64::NAN);
                    EpochStats {
                        loss: loss.scalar_value(),
                        metric,
                    }
                });
            let final_metric = {
                let tape = Tape::new();
                let leaves = model.leaves(&tape);
                let x = tape.constant(&[batch.rows, s], batch.input.clone());
                let pred = model.forward(&tape, &leaves, &x);
                accuracy_db(&pred.value(), &batch.target)?
            };
            Ok(TrainReport {
                loss_curve,
                metric_curve,
                final_metric,
                metric_name: "accuracy_db".into(),
                seed: config.seed,
                config: config.clone(),
                wall_time: start.elapsed(),
            })
        }
        Task::DsePath => {
            let lambda = config.lambda;
            let mut path_err = None;
            let (loss_curve, metric_curve) =
                run_adam_loop(model, config, |tape, leaves, model| {
                    let mut total: Option<Tensor> = None;
                    let mut pred = Vec::new();
                    let mut target = Vec::new();
                    for sample in dataset {
                        match path_sample_loss(model, tape, leaves, sample, lambda) {
                            Ok((loss, eval)) => {
                                pred.extend(eval.pred);
                                target.extend(eval.target);
                                total = Some(match total {
                                    Some(t) => t.add(&loss),
                                    None => loss,
                                });
                            }
                            Err(e) => {
                                path_err = Some(e);
                                return EpochStats {
                                    loss: f64::NAN,
                                    metric: f64::NAN,
                                };
                            }
                        }
                    }
                    let loss = total.expect("nonempty dataset");
                    loss.backward();
                    let metric = accuracy_db(&pred, &target).unwrap_or(f64::NAN);
                    EpochStats {
                        loss: loss.scalar_value(),
                        metric,
                    }
                });
            if let Some(e) = path_err {
                return Err(e);
            }
            let final_metric = eval_dse(model, dataset, lambda)?;
            Ok(TrainReport {
                loss_curve,
                metric_curve,
                final_metric,
                metric_name: "accuracy_db".into(),
                seed: config.seed,
                config: config.clone(),
                wall_time: start.elapsed(),
            })
        }
        Task::Localize => Err(TrainError::TaskMismatch {
            kind: model.spec.kind,
            expected: Task::Localize,
            got: Task::DsePath,
        }),
    }
}

/// Accuracy in dB of `model` on `dataset` at its current parameters.
pub fn eval_dse(model: &Model, dataset: &[PathSample], lambda: f64) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    match model.spec.task {
        Task::DseStep => {
            let batch = StepBatch::new(model, dataset)?;
            let tape = Tape::new();
            let leaves = model.leaves(&tape);
            let x = tape.constant(&[batch.rows, model.spec.input_dim], batch.input.clone());
            let pred = model.forward(&tape, &leaves, &x);
            accuracy_db(&pred.value(), &batch.target)
        }
        Task::DsePath => {
            let tape = Tape::new();
            let leaves = model.leaves(&tape);
            let mut pred = Vec::new();
            let mut target = Vec::new();
            for sample in dataset {
                let (_, eval) = path_sample_loss(model, &tape, &leaves, sample, lambda)?;
                pred.extend(eval.pred);
                target.extend(eval.target);
            }
            accuracy_db(&pred, &target)
        }
        Task::Localize => Err(TrainError::TaskMismatch {
            kind: model.spec.kind,
            expected: Task::Localize,
            got: Task::DsePath,
        }),
    }
}
