//! Two-stage sensor-placement search.
//!
//! Stage 1 learns a predictor from placement indicators to localization
//! accuracy (one sigmoid head per observability level). Stage 2 freezes the
//! predictor and runs gradient ascent on a real-valued node score vector α,
//! pushed through a softened top-s gate:
//!
//! ```text
//! g_a(α) = softmax(α)_a  if α_a is among the s largest components, else 0
//! ```
//!
//! The top-s mask is recomputed from the current α every step and held
//! constant within the step, so gradients flow through the softmax factors.
//! Cheap-model labels warm-start predictors for expensive models by
//! retraining only the final layer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::grid::{GridError, GridNetwork, ObservedSet};
use crate::matrix::RealMatrix;
use crate::models::{build, ModelError, ModelKind, ModelSpec, Param};
use crate::swingsim::{catalog_samples, FaultCatalog, SimError};
use crate::train::{train_localizer, Adam, TrainConfig, TrainError, TrainReport};

/// The observability levels predicted by the six sigmoid heads.
pub const LEVELS: [u32; 6] = [5, 10, 20, 40, 70, 100];

#[derive(Debug, thiserror::Error)]
pub enum PlacementError {
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("gate size s = {s} out of range 1..={n}")]
    GateRange { s: usize, n: usize },
    #[error("sample {index} has a placement over {got} nodes, expected {want}")]
    PlacementSizeMismatch { index: usize, got: usize, want: usize },
    #[error("sample {index} carries {got} accuracy entries, expected {want}")]
    AccuracyArity { index: usize, got: usize, want: usize },
    #[error("level index {level} out of range (6 heads)")]
    LevelOutOfRange { level: usize },
    #[error("C({n}, {s}) = {combos} exceeds the brute-force guard of {guard}")]
    CombinatorialGuard {
        n: usize,
        s: usize,
        combos: u128,
        guard: u128,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One measured input-output-placement sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSample {
    /// 0/1 indicator over the nodes.
    pub placement: Vec<u8>,
    /// Measured accuracy per observability level; unmeasured levels are null.
    pub accuracy: Vec<Option<f64>>,
    /// Model kind that produced the accuracy label.
    pub model: String,
}

impl PlacementSample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("placement sample serialization cannot fail")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Indices of the s largest components of `alpha`, ties resolved toward the
/// lowest index; returned sorted ascending.
pub fn top_s_indices(alpha: &[f64], s: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&i, &j| {
        alpha[j]
            .partial_cmp(&alpha[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut picked: Vec<usize> = order.into_iter().take(s).collect();
    picked.sort_unstable();
    picked
}

/// Softened top-s gate: the softmax of α masked to its s largest components.
pub fn soft_top_s_gate(alpha: &[f64], s: usize) -> Result<Vec<f64>, PlacementError> {
    let n = alpha.len();
    if s == 0 || s > n {
        return Err(PlacementError::GateRange { s, n });
    }
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = alpha.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let keep = top_s_indices(alpha, s);
    let mut gate = vec![0.0; n];
    for &i in &keep {
        gate[i] = exp[i] / total;
    }
    Ok(gate)
}

/// The placement-to-accuracy predictor:
/// `GraphConv(n, 16) -> ReLU -> FF(16, 16) -> ReLU -> FF(16, 16) -> ReLU -> FF(16, 6) -> Sigmoid`.
///
/// The graph layer smooths the placement vector through the renormalized
/// adjacency before the linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct OpNet {
    pub adjacency: RealMatrix,
    pub params: Vec<Param>,
    pub seed: u64,
}

const OPNET_HIDDEN: usize = 16;
const OPNET_HEADS: usize = 6;
/// Parameter tensors belonging to the first three layers (frozen during
/// transfer retraining).
const OPNET_FROZEN: usize = 6;

impl OpNet {
    pub fn new(adjacency: RealMatrix, seed: u64) -> Self {
        assert_eq!(adjacency.rows, adjacency.cols, "adjacency must be square");
        let n = adjacency.rows;
        let h = OPNET_HIDDEN;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |name: &'static str, shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let count: usize = shape.iter().product();
            Param {
                name,
                shape: shape.to_vec(),
                values: (0..count).map(|_| rng.gen_range(-bound..bound)).collect(),
            }
        };
        let params = vec![
            uniform("gc_w", &[h, n], n),
            uniform("gc_b", &[h], n),
            uniform("f1_w", &[h, h], h),
            uniform("f1_b", &[h], h),
            uniform("f2_w", &[h, h], h),
            uniform("f2_b", &[h], h),
            uniform("f3_w", &[OPNET_HEADS, h], h),
            uniform("f3_b", &[OPNET_HEADS], h),
        ];
        Self {
            adjacency,
            params,
            seed,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn leaves(&self, tape: &Tape) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| tape.leaf(&p.shape, p.values.clone()))
            .collect()
    }

    /// Forward map for a batch of placement (or gate) vectors `[B, n]`,
    /// producing `[B, 6]` sigmoid accuracies.
    pub fn forward(&self, tape: &Tape, leaves: &[Tensor], input: &Tensor) -> Tensor {
        let adj = tape.constant(
            &[self.adjacency.rows, self.adjacency.cols],
            self.adjacency.data.clone(),
        );
        let lin = |x: &Tensor, w: &Tensor, b: &Tensor| x.matmul(&w.transpose()).add(b);
        let h0 = lin(&input.matmul(&adj), &leaves[0], &leaves[1]).relu();
        let h1 = lin(&h0, &leaves[2], &leaves[3]).relu();
        let h2 = lin(&h1, &leaves[4], &leaves[5]).relu();
        lin(&h2, &leaves[6], &leaves[7]).sigmoid()
    }

    fn set_params(&mut self, values: Vec<Vec<f64>>) {
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.values.len(), v.len());
            p.values = v;
        }
    }

    pub fn to_json(&self) -> String {
        let wire = OpNetWire {
            adjacency: self.adjacency.clone(),
            params: self.params.iter().map(|p| p.values.clone()).collect(),
            seed: self.seed,
        };
        serde_json::to_string(&wire).expect("predictor serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let wire: OpNetWire = serde_json::from_str(text)?;
        let mut net = OpNet::new(wire.adjacency, wire.seed);
        net.set_params(wire.params);
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct OpNetWire {
    adjacency: RealMatrix,
    params: Vec<Vec<f64>>,
    seed: u64,
}

/// Prediction surface stage 2 climbs; implemented by [`OpNet`] and by test
/// probes.
pub trait PlacementScorer {
    fn node_count(&self) -> usize;
    /// Scalar predicted accuracy of a gate vector at one level head.
    fn score(&self, tape: &Tape, gate: &Tensor, level: usize) -> Tensor;
}

impl PlacementScorer for OpNet {
    fn node_count(&self) -> usize {
        self.node_count()
    }

    fn score(&self, tape: &Tape, gate: &Tensor, level: usize) -> Tensor {
        let leaves: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| tape.constant(&p.shape, p.values.clone()))
            .collect();
        let out = self.forward(tape, &leaves, &gate.reshape(&[1, self.node_count()]));
        out.reshape(&[OPNET_HEADS]).slice(level, 1).sum()
    }
}

struct PredictorBatch {
    rows: usize,
    input: Vec<f64>,
    target: Vec<f64>,
    mask: Vec<f64>,
}

fn predictor_batch(samples: &[PlacementSample], n: usize) -> Result<PredictorBatch, PlacementError> {
    if samples.is_empty() {
        return Err(PlacementError::EmptySampleSet);
    }
    let rows = samples.len();
    let mut input = Vec::with_capacity(rows * n);
    let mut target = vec![0.0; rows * OPNET_HEADS];
    let mut mask = vec![0.0; rows * OPNET_HEADS];
    for (index, sample) in samples.iter().enumerate() {
        if sample.placement.len() != n {
            return Err(PlacementError::PlacementSizeMismatch {
                index,
                got: sample.placement.len(),
                want: n,
            });
        }
        if sample.accuracy.len() != OPNET_HEADS {
            return Err(PlacementError::AccuracyArity {
                index,
                got: sample.accuracy.len(),
                want: OPNET_HEADS,
            });
        }
        input.extend(sample.placement.iter().map(|&b| b as f64));
        for (level, acc) in sample.accuracy.iter().enumerate() {
            if let Some(a) = acc {
                target[index * OPNET_HEADS + level] = *a;
                mask[index * OPNET_HEADS + level] = 1.0;
            }
        }
    }
    Ok(PredictorBatch {
        rows,
        input,
        target,
        mask,
    })
}

/// Masked mean-squared error of the predictor on `samples`.
pub fn predictor_mse(net: &OpNet, samples: &[PlacementSample]) -> Result<f64, PlacementError> {
    let n = net.node_count();
    let batch = predictor_batch(samples, n)?;
    let tape = Tape::new();
    let leaves = net.leaves(&tape);
    let x = tape.constant(&[batch.rows, n], batch.input.clone());
    let pred = net.forward(&tape, &leaves, &x);
    let values = pred.value();
    let mut err = 0.0;
    let mut count = 0usize;
    for i in 0..values.len() {
        if batch.mask[i] == 1.0 {
            let d = values[i] - batch.target[i];
            err += d * d;
            count += 1;
        }
    }
    Ok(err / count.max(1) as f64)
}

fn train_opnet_layers(
    net: &mut OpNet,
    samples: &[PlacementSample],
    config: &TrainConfig,
    trainable: std::ops::Range<usize>,
) -> Result<TrainReport, PlacementError> {
    let start = std::time::Instant::now();
    let n = net.node_count();
    let batch = predictor_batch(samples, n)?;
    let shapes: Vec<usize> = net.params[trainable.clone()]
        .iter()
        .map(|p| p.values.len())
        .collect();
    let mut adam = Adam::new(config, &shapes);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let tape = Tape::new();
        let leaves = net.leaves(&tape);
        let x = tape.constant(&[batch.rows, n], batch.input.clone());
        let t = tape.constant(&[batch.rows, OPNET_HEADS], batch.target.clone());
        let m = tape.constant(&[batch.rows, OPNET_HEADS], batch.mask.clone());
        let pred = net.forward(&tape, &leaves, &x);
        let loss = pred
            .sub(&t)
            .mul(&m)
            .square()
            .sum()
            .scale(1.0 / batch.rows as f64);
        loss.backward();
        curve.push(loss.scalar_value());
        let grads: Vec<Vec<f64>> = leaves[trainable.clone()].iter().map(|l| l.grad()).collect();
        let mut values: Vec<Vec<f64>> = net.params[trainable.clone()]
            .iter()
            .map(|p| p.values.clone())
            .collect();
        adam.step(&mut values, &grads, config.lr_at(epoch));
        for (slot, v) in trainable.clone().zip(values) {
            net.params[slot].values = v;
        }
    }
    let final_metric = predictor_mse(net, samples)?;
    Ok(TrainReport {
        metric_curve: curve.clone(),
        loss_curve: curve,
        final_metric,
        metric_name: "predictor_mse".into(),
        seed: config.seed,
        config: config.clone(),
        wall_time: start.elapsed(),
    })
}

/// Stage 1: trains a fresh predictor on measured placement samples by Adam
/// over the masked squared error (mean over samples).
pub fn train_predictor(
    samples: &[PlacementSample],
    adjacency: RealMatrix,
    config: &TrainConfig,
    seed: u64,
) -> Result<(OpNet, TrainReport), PlacementError> {
    let mut net = OpNet::new(adjacency, seed);
    let total = net.params.len();
    let report = train_opnet_layers(&mut net, samples, config, 0..total)?;
    Ok((net, report))
}

/// Transfer step: retrains only the final layer on new-model samples; the
/// first three layers stay bitwise frozen.
pub fn transfer_retrain(
    pretrained: &OpNet,
    samples: &[PlacementSample],
    config: &TrainConfig,
) -> Result<(OpNet, TrainReport), PlacementError> {
    let mut net = pretrained.clone();
    let total = net.params.len();
    let report = train_opnet_layers(&mut net, samples, config, OPNET_FROZEN..total)?;
    Ok((net, report))
}

/// Stage-2 search configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageTwoConfig {
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            restarts: 8,
            seed: 0,
        }
    }
}

/// A stage-2 result: the score vector, its gate, the selected nodes, and the
/// predictor's accuracy estimate at the requested level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementCandidate {
    pub alpha: Vec<f64>,
    pub gate: Vec<f64>,
    pub selected: Vec<usize>,
    pub predicted_accuracy: f64,
    pub level: usize,
    pub s: usize,
}

impl PlacementCandidate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("candidate serialization cannot fail")
    }
}

/// Stage 2: gradient ascent on the predicted accuracy through the gate, with
/// the top-s mask recomputed each step and held constant within it. Returns
/// the best candidate seen across all restarts; deterministic per seed.
pub fn optimize_alpha<S: PlacementScorer + Sync>(
    scorer: &S,
    s: usize,
    level: usize,
    config: &StageTwoConfig,
) -> Result<PlacementCandidate, PlacementError> {
    let n = scorer.node_count();
    if s == 0 || s > n {
        return Err(PlacementError::GateRange { s, n });
    }
    if level >= OPNET_HEADS {
        return Err(PlacementError::LevelOutOfRange { level });
    }

    // a set's settled score: the gate the ascent converges to puts the whole
    // softmax mass uniformly on the selected nodes
    let settled_score = |set: &[usize]| -> f64 {
        let tape = Tape::new();
        let mut gate = vec![0.0; n];
        for &i in set {
            gate[i] = 1.0 / s as f64;
        }
        let g = tape.constant(&[n], gate);
        scorer.score(&tape, &g, level).scalar_value()
    };

    let run_restart = |restart: usize| -> PlacementCandidate {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(restart as u64 + 1);
        let mut alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut best: Option<PlacementCandidate> = None;
        for _ in 0..config.steps {
            let keep = top_s_indices(&alpha, s);
            let mut mask = vec![0.0; n];
            for &i in &keep {
                mask[i] = 1.0;
            }
            let tape = Tape::new();
            let a = tape.leaf(&[n], alpha.clone());
            let probs = a.softmax();
            let gate = probs.mul(&tape.constant(&[n], mask.clone()));
            let score = scorer.score(&tape, &gate, level);
            score.backward();

            // every set the flow visits is judged at its settled gate
            if best.as_ref().map_or(true, |b| b.selected != keep) {
                let value = settled_score(&keep);
                if best.as_ref().map_or(true, |b| value > b.predicted_accuracy) {
                    let mut settled_gate = vec![0.0; n];
                    for &i in &keep {
                        settled_gate[i] = 1.0 / s as f64;
                    }
                    best = Some(PlacementCandidate {
                        alpha: alpha.clone(),
                        gate: settled_gate,
                        selected: keep.clone(),
                        predicted_accuracy: value,
                        level,
                        s,
                    });
                }
            }

            // exact gradient through the softmax factors, plus the
            // straight-through mask term for unselected nodes so they can
            // compete for a slot; the floor keeps that signal alive once the
            // selected masses have absorbed most of the softmax
            let exact = a.grad();
            let gate_sens = gate.grad();
            let p = probs.value();
            let floor = 1.0 / n as f64;
            for i in 0..n {
                let through = if mask[i] == 0.0 {
                    gate_sens[i] * p[i].max(floor)
                } else {
                    0.0
                };
                alpha[i] += config.lr * (exact[i] + through);
            }
        }
        best.expect("at least one step")
    };

    let candidates: Vec<PlacementCandidate> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(run_restart)
        .collect();
    Ok(candidates
        .into_iter()
        .max_by(|a, b| {
            a.predicted_accuracy
                .partial_cmp(&b.predicted_accuracy)
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("at least one restart"))
}

/// Exhaustive oracle: evaluates every s-subset and returns the full ranking,
/// best first. Guarded against combinatorial blow-up.
pub fn brute_force_placement<F>(
    evaluator: F,
    n: usize,
    s: usize,
) -> Result<(Vec<usize>, Vec<(Vec<usize>, f64)>), PlacementError>
where
    F: Fn(&[usize]) -> f64,
{
    if s == 0 || s > n {
        return Err(PlacementError::GateRange { s, n });
    }
    const GUARD: u128 = 1_000_000;
    let mut combos: u128 = 1;
    for i in 0..s {
        combos = combos * (n - i) as u128 / (i + 1) as u128;
        if combos > GUARD {
            return Err(PlacementError::CombinatorialGuard {
                n,
                s,
                combos,
                guard: GUARD,
            });
        }
    }

    let mut ranking = Vec::with_capacity(combos as usize);
    let mut subset: Vec<usize> = (0..s).collect();
    loop {
        ranking.push((subset.clone(), evaluator(&subset)));
        // next lexicographic s-combination of 0..n
        let mut i = s;
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            if subset[i] != i + n - s {
                subset[i] += 1;
                for j in i + 1..s {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
            if i == 0 {
                subset.clear();
                break;
            }
        }
        if subset.is_empty() {
            break;
        }
        if ranking.len() as u128 > combos {
            break;
        }
    }
    ranking.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok((ranking[0].0.clone(), ranking))
}

/// Measures placement samples by the full pipeline: draw a random placement,
/// assemble its fault dataset from the catalog, train a localizer, and
/// record the final training accuracy under `level_slot`. Sample `i` uses
/// RNG stream `i` of the master seed.
#[allow(clippy::too_many_arguments)]
pub fn measure_placement_samples(
    net: &GridNetwork,
    catalog: &FaultCatalog,
    kind: ModelKind,
    s: usize,
    level_slot: usize,
    count: usize,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<Vec<PlacementSample>, PlacementError> {
    if level_slot >= OPNET_HEADS {
        return Err(PlacementError::LevelOutOfRange { level: level_slot });
    }
    let n = net.node_count();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let obs = ObservedSet::random(n, s, seed.wrapping_add(i as u64))?;
            let samples = catalog_samples(net, catalog, &obs);
            let spec = ModelSpec::localize(kind, net);
            let mut model = build(spec, seed.wrapping_add(i as u64))?;
            let report = train_localizer(&mut model, &samples, train_config)?;
            let mut placement = vec![0u8; n];
            for &node in obs.indices() {
                placement[node] = 1;
            }
            let mut accuracy = vec![None; OPNET_HEADS];
            accuracy[level_slot] = Some(report.final_metric);
            Ok(PlacementSample {
                placement,
                accuracy,
                model: kind.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::synthesize_grid;

    #[test]
    fn gate_uniform_alpha_keeps_lowest_index() {
        let g = soft_top_s_gate(&[0.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(g, vec![1.0 / 3.0, 0.0, 0.0]);
    }

    #[test]
    fn gate_softmax_values() {
        let g = soft_top_s_gate(&[2.0_f64.ln(), 0.0, 0.0], 1).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert_eq!(&g[1..], &[0.0, 0.0]);
    }

    #[test]
    fn gate_full_support_sums_to_one() {
        let g = soft_top_s_gate(&[0.3, -1.0, 2.0, 0.0], 4).unwrap();
        let sum: f64 = g.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(g.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn gate_support_and_invariances() {
        let alpha = [0.4, -0.2, 1.7, 0.0, 0.4];
        for s in 1..=5 {
            let g = soft_top_s_gate(&alpha, s).unwrap();
            assert_eq!(g.iter().filter(|&&v| v > 0.0).count(), s);
            let sum: f64 = g.iter().sum();
            assert!(sum <= 1.0 + 1e-12);

            // selection is invariant under adding a constant
            let shifted: Vec<f64> = alpha.iter().map(|a| a + 3.7).collect();
            assert_eq!(top_s_indices(&alpha, s), top_s_indices(&shifted, s));
        }
        assert!(soft_top_s_gate(&alpha, 0).is_err());
        assert!(soft_top_s_gate(&alpha, 6).is_err());
    }

    #[test]
    fn gate_permutation_equivariant() {
        let alpha = [0.9, -0.3, 0.2, 1.1];
        let perm = [2usize, 0, 3, 1];
        let mut permuted = [0.0; 4];
        for i in 0..4 {
            permuted[perm[i]] = alpha[i];
        }
        for s in 1..=4 {
            let g = soft_top_s_gate(&alpha, s).unwrap();
            let gp = soft_top_s_gate(&permuted, s).unwrap();
            for i in 0..4 {
                assert_eq!(g[i], gp[perm[i]], "s={s}, i={i}");
            }
        }
    }

    #[test]
    fn opnet_architecture_and_param_count() {
        let net = synthesize_grid(68, 2.56, 1).unwrap();
        let op = OpNet::new(net.normalized_adjacency(), 0);
        // GraphConv(68,16) + FF(16,16) + FF(16,16) + FF(16,6)
        let want = (16 * 68 + 16) + (16 * 16 + 16) + (16 * 16 + 16) + (6 * 16 + 6);
        assert_eq!(op.param_count(), want);

        let tape = Tape::new();
        let leaves = op.leaves(&tape);
        let x = tape.constant(&[2, 68], vec![0.5; 2 * 68]);
        let y = op.forward(&tape, &leaves, &x);
        assert_eq!(y.shape(), vec![2, 6]);
        assert!(y.value().iter().all(|&v| v > 0.0 && v < 1.0), "sigmoid range");
    }

    /// Synthetic labels where nodes have distinct worth, so placements of
    /// the same size still differ in accuracy.
    fn toy_samples(n: usize, count: usize, seed: u64) -> Vec<PlacementSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let worth: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 1.37).sin()).collect();
        let total: f64 = worth.iter().sum();
        (0..count)
            .map(|_| {
                let mut placement = vec![0u8; n];
                for slot in &mut placement {
                    *slot = rng.gen_range(0..2);
                }
                let captured: f64 = placement
                    .iter()
                    .zip(&worth)
                    .filter(|(&b, _)| b == 1)
                    .map(|(_, w)| w)
                    .sum();
                let mut accuracy = vec![None; 6];
                accuracy[2] = Some(0.2 + 0.6 * captured / total);
                PlacementSample {
                    placement,
                    accuracy,
                    model: "LR".into(),
                }
            })
            .collect()
    }

    #[test]
    fn predictor_overfits_single_sample() {
        let net = synthesize_grid(8, 2.2, 2).unwrap();
        let samples = toy_samples(8, 1, 5);
        let config = TrainConfig::new(1500, 0.05, 0.0).with_schedule(500, 0.1);
        let (op, report) =
            train_predictor(&samples, net.normalized_adjacency(), &config, 3).unwrap();
        assert_eq!(report.loss_curve.len(), 1500);
        let mse = predictor_mse(&op, &samples).unwrap();
        assert!(mse < 1e-6, "single-sample overfit mse {mse}");
    }

    #[test]
    fn predictor_duplicated_samples_match_single_copy() {
        let net = synthesize_grid(8, 2.2, 2).unwrap();
        let samples = toy_samples(8, 6, 7);
        let mut doubled = samples.clone();
        doubled.extend(samples.iter().cloned());
        let config = TrainConfig::new(120, 0.02, 0.0);
        let (a, _) = train_predictor(&samples, net.normalized_adjacency(), &config, 3).unwrap();
        let (b, _) = train_predictor(&doubled, net.normalized_adjacency(), &config, 3).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            for (x, y) in pa.values.iter().zip(&pb.values) {
                assert!(
                    (x - y).abs() < 1e-9,
                    "duplicated full-batch training diverged: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn transfer_freezes_first_three_layers() {
        let net = synthesize_grid(8, 2.2, 2).unwrap();
        let samples = toy_samples(8, 10, 11);
        let config = TrainConfig::new(80, 0.02, 0.0);
        let (pre, _) = train_predictor(&samples, net.normalized_adjacency(), &config, 3).unwrap();
        let new_samples = toy_samples(8, 5, 13);
        let (post, _) = transfer_retrain(&pre, &new_samples, &TrainConfig::placement_transfer())
            .unwrap();
        for slot in 0..OPNET_FROZEN {
            assert_eq!(
                pre.params[slot].values, post.params[slot].values,
                "frozen layer {slot} changed"
            );
        }
        assert_ne!(pre.params[6].values, post.params[6].values);
    }

    #[test]
    fn transfer_on_own_samples_does_not_regress() {
        let net = synthesize_grid(8, 2.2, 2).unwrap();
        let samples = toy_samples(8, 10, 11);
        let config = TrainConfig::new(200, 0.02, 0.0);
        let (pre, _) = train_predictor(&samples, net.normalized_adjacency(), &config, 3).unwrap();
        let before = predictor_mse(&pre, &samples).unwrap();
        let (post, _) =
            transfer_retrain(&pre, &samples, &TrainConfig::placement_transfer()).unwrap();
        let after = predictor_mse(&post, &samples).unwrap();
        assert!(
            after <= before + 1e-9,
            "retraining the last layer on the same samples regressed: {before} -> {after}"
        );
    }

    struct LinearProbe {
        w: Vec<f64>,
    }

    impl PlacementScorer for LinearProbe {
        fn node_count(&self) -> usize {
            self.w.len()
        }
        fn score(&self, tape: &Tape, gate: &Tensor, _level: usize) -> Tensor {
            let w = tape.constant(&[self.w.len()], self.w.clone());
            w.mul(gate).sum()
        }
    }

    #[test]
    fn optimize_alpha_finds_linear_probe_optimum() {
        let probe = LinearProbe {
            w: vec![0.1, 0.9, 0.3, 0.7, 0.5, 0.2],
        };
        let config = StageTwoConfig {
            steps: 300,
            lr: 0.1,
            restarts: 4,
            seed: 1,
        };
        let candidate = optimize_alpha(&probe, 2, 0, &config).unwrap();
        assert_eq!(candidate.selected, vec![1, 3], "largest-w nodes");
        assert_eq!(candidate.gate.iter().filter(|&&v| v > 0.0).count(), 2);
    }

    #[test]
    fn optimize_alpha_full_set_is_trivial() {
        let probe = LinearProbe {
            w: vec![0.4, 0.2, 0.6],
        };
        let candidate =
            optimize_alpha(&probe, 3, 0, &StageTwoConfig::default()).unwrap();
        assert_eq!(candidate.selected, vec![0, 1, 2]);
    }

    /// Predictor score of a subset at its canonical gate (softmax mass 1/s
    /// on each selected node), the limit the stage-2 ascent approaches.
    fn canonical_score(op: &OpNet, set: &[usize], s: usize, level: usize) -> f64 {
        let mut gate = vec![0.0; op.node_count()];
        for &i in set {
            gate[i] = 1.0 / s as f64;
        }
        let tape = Tape::new();
        let g = tape.constant(&[op.node_count()], gate);
        op.score(&tape, &g, level).scalar_value()
    }

    #[test]
    fn optimize_alpha_beats_random_placements() {
        let net = synthesize_grid(8, 2.2, 2).unwrap();
        let samples = toy_samples(8, 24, 19);
        let config = TrainConfig::new(3000, 0.05, 0.0).with_schedule(1000, 0.1);
        let (op, _) = train_predictor(&samples, net.normalized_adjacency(), &config, 3).unwrap();
        assert!(
            predictor_mse(&op, &samples).unwrap() < 1e-3,
            "predictor must fit before the search is meaningful"
        );

        for seed in [5, 6] {
            let candidate = optimize_alpha(
                &op,
                2,
                2,
                &StageTwoConfig {
                    steps: 300,
                    lr: 0.1,
                    restarts: 4,
                    seed,
                },
            )
            .unwrap();
            let score = canonical_score(&op, &candidate.selected, 2, 2);

            // Monte-Carlo baseline over random 2-subsets
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let trials = 100;
            let mut mean = 0.0;
            for _ in 0..trials {
                let mut alpha = vec![0.0; 8];
                for a in alpha.iter_mut() {
                    *a = rng.gen_range(-1.0..1.0);
                }
                let set = top_s_indices(&alpha, 2);
                mean += canonical_score(&op, &set, 2, 2);
            }
            mean /= trials as f64;
            assert!(
                score >= mean,
                "seed {seed}: optimized set scored {score}, below random mean {mean}"
            );
        }
    }

    #[test]
    fn brute_force_separable_objective() {
        let scores = [0.3, 0.9, 0.1, 0.7, 0.5, 0.2];
        let (best, ranking) =
            brute_force_placement(|set| set.iter().map(|&i| scores[i]).sum(), 6, 2).unwrap();
        assert_eq!(best, vec![1, 3]);
        assert_eq!(ranking.len(), 15); // C(6,2)
    }

    #[test]
    fn brute_force_counts_and_edge_cases() {
        let (best, ranking) = brute_force_placement(|_| 1.0, 8, 2).unwrap();
        assert_eq!(ranking.len(), 28); // C(8,2) evaluations
        assert_eq!(best.len(), 2);

        let (best, ranking) = brute_force_placement(|_| 1.0, 5, 5).unwrap();
        assert_eq!(best, vec![0, 1, 2, 3, 4]);
        assert_eq!(ranking.len(), 1);

        assert!(matches!(
            brute_force_placement(|_| 0.0, 60, 20),
            Err(PlacementError::CombinatorialGuard { .. })
        ));
    }

    #[test]
    fn placement_sample_roundtrip() {
        let sample = PlacementSample {
            placement: vec![0, 1, 1, 0],
            accuracy: vec![None, Some(0.5), None, None, None, Some(0.9)],
            model: "LR".into(),
        };
        let back = PlacementSample::from_json_line(&sample.to_json_line()).unwrap();
        assert_eq!(sample, back);
        assert!(sample.to_json_line().contains("null"));
    }

    #[test]
    fn measured_samples_carry_one_level() {
        let net = synthesize_grid(6, 2.3, 31).unwrap();
        let catalog = crate::swingsim::build_fault_catalog(&net, 0.01, 2000).unwrap();
        let samples = measure_placement_samples(
            &net,
            &catalog,
            ModelKind::LR,
            2,
            1,
            3,
            &TrainConfig::new(60, 1e-2, 0.0),
            7,
        )
        .unwrap();
        assert_eq!(samples.len(), 3);
        for s in &samples {
            assert_eq!(s.placement.iter().filter(|&&b| b == 1).count(), 2);
            assert_eq!(s.accuracy.iter().filter(|a| a.is_some()).count(), 1);
            assert!(s.accuracy[1].unwrap() >= 0.0 && s.accuracy[1].unwrap() <= 1.0);
            assert_eq!(s.model, "LR");
        }
        // deterministic
        let again = measure_placement_samples(
            &net,
            &catalog,
            ModelKind::LR,
            2,
            1,
            3,
            &TrainConfig::new(60, 1e-2, 0.0),
            7,
        )
        .unwrap();
        assert_eq!(samples, again);
    }
}
