//! The model zoo: static classifiers and dynamic predictors assembled from
//! autodiff primitives, with exact parameter accounting.
//!
//! Architectures, full observability, n = 68 nodes and 87 lines:
//!
//! ```text
//! LR        x -> Lin(68, 87)
//! FFNN      x -> Lin(68, 32) -> ReLU -> Lin(32, 87)
//! GCNN      x -> GraphConv(68, 32) -> ReLU -> Lin(32, 87)
//! AlexNet1D x -> 4 x (Conv1d -> ReLU -> MaxPool) -> Lin(16, 87)
//! LinODE    x -> Euler-unrolled Lin(68, 68) -> ReLU -> Lin(68, 87)
//! GraphODE  x -> Euler-unrolled GraphConv(68, 68) -> ReLU -> Lin(68, 87)
//! ```
//!
//! where `GraphConv(i, o)` left-multiplies by the precomputed renormalized
//! adjacency before the linear map. Dynamic state estimation reuses the same
//! blocks with input `s` (observed nodes) and output `n`, applying shared
//! weights to each of the two input channels. The physics-structured kinds
//! (PINN, HNN, DIRODENN) expose their right-hand sides as tape functions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Tensor};
use crate::grid::{GridNetwork, ObservedSet};
use crate::matrix::RealMatrix;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{kind:?} requires a precomputed adjacency matrix")]
    MissingAdjacency { kind: ModelKind },
    #[error("{kind:?} under partial observability requires the observed-node embedding")]
    MissingEmbedding { kind: ModelKind },
    #[error("AlexNet1D is fixed to the full input size and cannot run partial-observability state estimation")]
    AlexNetPartialDse,
    #[error("input length {input} too short for the AlexNet1D conv stack")]
    InputTooShort { input: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint decode failed: {0}")]
    CheckpointDecode(#[from] serde_json::Error),
    #[error("checkpoint has {got} tensors where the spec builds {want}")]
    CheckpointArity { got: usize, want: usize },
    #[error("checkpoint tensor {index} has {got} values, expected {want}")]
    CheckpointShape { index: usize, got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    LR,
    FFNN,
    GCNN,
    AlexNet1D,
    LinODE,
    GraphODE,
    PINN,
    HNN,
    DIRODENN,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::LR,
        ModelKind::FFNN,
        ModelKind::GCNN,
        ModelKind::AlexNet1D,
        ModelKind::LinODE,
        ModelKind::GraphODE,
        ModelKind::PINN,
        ModelKind::HNN,
        ModelKind::DIRODENN,
    ];

    /// Static model kinds usable for fault localization.
    pub const STATIC: [ModelKind; 6] = [
        ModelKind::LR,
        ModelKind::FFNN,
        ModelKind::GCNN,
        ModelKind::AlexNet1D,
        ModelKind::LinODE,
        ModelKind::GraphODE,
    ];

    pub fn is_ode(self) -> bool {
        matches!(self, ModelKind::LinODE | ModelKind::GraphODE)
    }

    pub fn is_physics_path(self) -> bool {
        matches!(self, ModelKind::PINN | ModelKind::HNN | ModelKind::DIRODENN)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(ModelKind::LR),
            "ffnn" => Ok(ModelKind::FFNN),
            "gcnn" => Ok(ModelKind::GCNN),
            "alexnet" | "alexnet1d" => Ok(ModelKind::AlexNet1D),
            "linode" | "ode-lin" | "odelin" => Ok(ModelKind::LinODE),
            "graphode" | "ode-graph" | "odegraph" => Ok(ModelKind::GraphODE),
            "pinn" => Ok(ModelKind::PINN),
            "hnn" => Ok(ModelKind::HNN),
            "dirodenn" => Ok(ModelKind::DIRODENN),
            other => Err(format!("unknown model kind: {other}")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ModelKind::LR => "LR",
            ModelKind::FFNN => "FFNN",
            ModelKind::GCNN => "GCNN",
            ModelKind::AlexNet1D => "AlexNet1D",
            ModelKind::LinODE => "LinODE",
            ModelKind::GraphODE => "GraphODE",
            ModelKind::PINN => "PINN",
            ModelKind::HNN => "HNN",
            ModelKind::DIRODENN => "DIRODENN",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Map a fault signature to a one-hot line score vector.
    Localize,
    /// Map the observed sub-state at `t_k` to the full state at `t_{k+1}`.
    DseStep,
    /// Map an initial state to the whole trajectory.
    DsePath,
}

/// How the two real channels of a complex input fold into one for the
/// single-channel dense models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelRule {
    /// Shared weights per channel, channel outputs summed (equivalent to
    /// feeding `re + im` through the first linear map).
    Sum,
    /// Componentwise modulus.
    Magnitude,
    /// Real part only.
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub task: Task,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    /// Euler steps of the internal ODE unroll for static ODE heads.
    pub ode_steps: usize,
    /// Internal unroll step (`ode_steps * ode_dt = 1` by default).
    pub ode_dt: f64,
    pub channel_rule: ChannelRule,
    /// Renormalized adjacency consumed by the graph kinds.
    pub adjacency: Option<RealMatrix>,
    /// Observed-node indices for embedding an s-signal into the n-node graph.
    pub embed: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, task: Task, input_dim: usize, output_dim: usize) -> Self {
        let channel_rule = match kind {
            ModelKind::AlexNet1D => ChannelRule::Magnitude,
            _ => ChannelRule::Sum,
        };
        Self {
            kind,
            task,
            input_dim,
            output_dim,
            hidden_dim: 32,
            ode_steps: 10,
            ode_dt: 0.1,
            channel_rule,
            adjacency: None,
            embed: None,
        }
    }

    pub fn with_adjacency(mut self, adjacency: RealMatrix) -> Self {
        self.adjacency = Some(adjacency);
        self
    }

    pub fn with_embed(mut self, embed: Vec<usize>) -> Self {
        self.embed = Some(embed);
        self
    }

    pub fn with_hidden(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }

    /// Spec for fault localization on `net` (input is always the full node
    /// count since `x = Y ΔU` has one entry per node).
    pub fn localize(kind: ModelKind, net: &GridNetwork) -> Self {
        let spec = Self::new(kind, Task::Localize, net.node_count(), net.line_count());
        match kind {
            ModelKind::GCNN | ModelKind::GraphODE => {
                spec.with_adjacency(net.normalized_adjacency())
            }
            _ => spec,
        }
    }

    /// Spec for one-step-ahead dynamic state estimation from `obs` to the
    /// full state of `net`.
    pub fn dse_step(kind: ModelKind, net: &GridNetwork, obs: &ObservedSet) -> Self {
        let spec = Self::new(kind, Task::DseStep, obs.len(), net.node_count());
        match kind {
            ModelKind::GCNN => spec
                .with_adjacency(net.normalized_adjacency())
                .with_embed(obs.indices().to_vec()),
            _ => spec,
        }
    }

    /// Spec for whole-path dynamic state estimation.
    pub fn dse_path(kind: ModelKind, net: &GridNetwork, obs: &ObservedSet) -> Self {
        let spec = Self::new(kind, Task::DsePath, obs.len(), net.node_count());
        match kind {
            ModelKind::GraphODE => {
                let sub = net.induced_subgraph(obs);
                spec.with_adjacency(sub.normalized_adjacency())
            }
            _ => spec,
        }
    }

    /// ODE kinds project to the output dimension only when it differs from
    /// the state dimension.
    pub fn needs_projection(&self) -> bool {
        self.kind.is_ode() && (self.task == Task::Localize || self.input_dim != self.output_dim)
    }

    /// Output lengths of the AlexNet1D conv/pool stack for a given input
    /// length, ending with the flattened feature count.
    fn alexnet_stack(input: usize) -> Result<(Vec<usize>, usize), ModelError> {
        let mut lengths = vec![input];
        let mut l = input;
        for kernel in [5usize, 5, 3, 3] {
            if l < kernel {
                return Err(ModelError::InputTooShort { input });
            }
            l -= kernel - 1; // conv, stride 1
            lengths.push(l);
            if l < 2 {
                return Err(ModelError::InputTooShort { input });
            }
            l = (l - 2) / 2 + 1; // pool, kernel 2, stride 2
            lengths.push(l);
        }
        Ok((lengths, 8 * l))
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A built model: spec plus parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
    pub seed: u64,
}

struct Init {
    rng: rand_chacha::ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform ±1/sqrt(fan_in).
    fn uniform(&mut self, name: &'static str, shape: &[usize], fan_in: usize) -> Param {
        use rand::Rng;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let count: usize = shape.iter().product();
        Param {
            name,
            shape: shape.to_vec(),
            values: (0..count).map(|_| self.rng.gen_range(-bound..bound)).collect(),
        }
    }

    fn constant(&mut self, name: &'static str, shape: &[usize], value: f64) -> Param {
        let count: usize = shape.iter().product();
        Param {
            name,
            shape: shape.to_vec(),
            values: vec![value; count],
        }
    }
}

/// Deterministically initializes the parameter tensors for `spec`.
pub fn build(spec: ModelSpec, seed: u64) -> Result<Model, ModelError> {
    if spec.input_dim == 0 || spec.output_dim == 0 || spec.hidden_dim == 0 {
        return Err(ModelError::InvalidSpec(
            "dimensions must be positive".into(),
        ));
    }
    if spec.kind.is_ode() && spec.ode_steps == 0 {
        return Err(ModelError::InvalidSpec("ode_steps must be positive".into()));
    }
    if matches!(spec.kind, ModelKind::GCNN | ModelKind::GraphODE) {
        let adj = spec
            .adjacency
            .as_ref()
            .ok_or(ModelError::MissingAdjacency { kind: spec.kind })?;
        let want = if spec.kind == ModelKind::GCNN && spec.embed.is_some() {
            adj.rows // embedding lifts to the full graph
        } else {
            spec.input_dim
        };
        if adj.rows != adj.cols || adj.rows != want {
            return Err(ModelError::InvalidSpec(format!(
                "adjacency is {}x{} but the graph layer works on {want} nodes",
                adj.rows, adj.cols
            )));
        }
    }
    if spec.kind == ModelKind::GCNN && spec.task != Task::Localize {
        let embed = spec
            .embed
            .as_ref()
            .ok_or(ModelError::MissingEmbedding { kind: spec.kind })?;
        if embed.len() != spec.input_dim {
            return Err(ModelError::InvalidSpec(format!(
                "embedding lists {} nodes but input_dim is {}",
                embed.len(),
                spec.input_dim
            )));
        }
    }
    if spec.kind == ModelKind::AlexNet1D
        && spec.task != Task::Localize
        && spec.input_dim != spec.output_dim
    {
        return Err(ModelError::AlexNetPartialDse);
    }

    let mut init = Init::new(seed);
    let (input, out, h) = (spec.input_dim, spec.output_dim, spec.hidden_dim);
    let params = match spec.kind {
        ModelKind::LR => vec![
            init.uniform("w", &[out, input], input),
            init.uniform("b", &[out], input),
        ],
        ModelKind::FFNN => vec![
            init.uniform("w1", &[h, input], input),
            init.uniform("b1", &[h], input),
            init.uniform("w2", &[out, h], h),
            init.uniform("b2", &[out], h),
        ],
        ModelKind::GCNN => {
            // the graph layer always works on the full node set: partial
            // observations are embedded first
            let graph_nodes = match &spec.embed {
                Some(_) => spec.adjacency.as_ref().map(|a| a.rows).unwrap_or(input),
                None => input,
            };
            vec![
                init.uniform("w1", &[h, graph_nodes], graph_nodes),
                init.uniform("b1", &[h], graph_nodes),
                init.uniform("w2", &[out, h], h),
                init.uniform("b2", &[out], h),
            ]
        }
        ModelKind::AlexNet1D => {
            let (_, flat) = ModelSpec::alexnet_stack(input)?;
            vec![
                init.uniform("c1w", &[4, 1, 5], 5),
                init.uniform("c1b", &[4], 5),
                init.uniform("c2w", &[8, 4, 5], 20),
                init.uniform("c2b", &[8], 20),
                init.uniform("c3w", &[8, 8, 3], 24),
                init.uniform("c3b", &[8], 24),
                init.uniform("c4w", &[8, 8, 3], 24),
                init.uniform("c4b", &[8], 24),
                init.uniform("fcw", &[out, flat], flat),
                init.uniform("fcb", &[out], flat),
            ]
        }
        ModelKind::LinODE | ModelKind::GraphODE => {
            let state = input;
            let mut params = vec![
                init.uniform("ode_w", &[state, state], state),
                init.uniform("ode_b", &[state], state),
            ];
            if spec.needs_projection() {
                params.push(init.uniform("head_w", &[out, state], state));
                params.push(init.uniform("head_b", &[out], state));
            }
            params
        }
        ModelKind::PINN => {
            // time network t -> full two-channel state, plus a learnable
            // linear right-hand side for the residual term
            let state = 2 * out;
            vec![
                init.uniform("t_w1", &[h, 1], 1),
                init.uniform("t_b1", &[h], 1),
                init.uniform("t_w2", &[state, h], h),
                init.uniform("t_b2", &[state], h),
                init.uniform("f_w", &[state, state], state),
                init.uniform("f_b", &[state], state),
            ]
        }
        ModelKind::HNN => {
            let state = 2 * input;
            vec![
                init.constant("quad", &[state], 1.0),
                init.uniform("h_w1", &[h, state], state),
                init.uniform("h_b1", &[h], state),
                init.uniform("h_w2", &[h], h),
                init.uniform("dis_l", &[state, state], state * 100),
                init.constant("src", &[input], 0.0),
            ]
        }
        ModelKind::DIRODENN => {
            let pairs = input * (input - 1) / 2;
            vec![
                init.constant("raw_m", &[input], 1.0),
                init.constant("damp", &[input], 0.1),
                init.constant("inj", &[input], 0.0),
                init.constant("coupling", &[pairs.max(1)], 0.1),
            ]
        }
    };
    Ok(Model { spec, params, seed })
}

impl Model {
    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Puts every parameter tensor on `tape` as a trainable leaf, in the
    /// model's canonical order.
    pub fn leaves(&self, tape: &Tape) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| tape.leaf(&p.shape, p.values.clone()))
            .collect()
    }

    /// Overwrites parameter values (shapes must match).
    pub fn set_params(&mut self, values: Vec<Vec<f64>>) {
        assert_eq!(values.len(), self.params.len(), "parameter arity mismatch");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.values.len(), v.len(), "parameter {} size mismatch", p.name);
            p.values = v;
        }
    }

    /// Batched forward map for the feed-forward kinds.
    ///
    /// Input is `[B, input_dim]` (or `[B, 1, L]` for AlexNet1D); output is
    /// `[B, output_dim]`. Static ODE kinds unroll their block internally and
    /// apply the ReLU-plus-projection head.
    pub fn forward(&self, tape: &Tape, leaves: &[Tensor], input: &Tensor) -> Tensor {
        match self.spec.kind {
            ModelKind::LR => linear(input, &leaves[0], &leaves[1]),
            ModelKind::FFNN => {
                let h = linear(input, &leaves[0], &leaves[1]).relu();
                linear(&h, &leaves[2], &leaves[3])
            }
            ModelKind::GCNN => {
                let adj = self.adjacency_tensor(tape);
                let embedded = self.embed_input(tape, input);
                let h = linear(&embedded.matmul(&adj), &leaves[0], &leaves[1]).relu();
                linear(&h, &leaves[2], &leaves[3])
            }
            ModelKind::AlexNet1D => {
                let c1 = input.conv1d(&leaves[0], &leaves[1], 1).relu().maxpool1d(2, 2);
                let c2 = c1.conv1d(&leaves[2], &leaves[3], 1).relu().maxpool1d(2, 2);
                let c3 = c2.conv1d(&leaves[4], &leaves[5], 1).relu().maxpool1d(2, 2);
                let c4 = c3.conv1d(&leaves[6], &leaves[7], 1).relu().maxpool1d(2, 2);
                let shape = c4.shape();
                let flat = c4.reshape(&[shape[0], shape[1] * shape[2]]);
                linear(&flat, &leaves[8], &leaves[9])
            }
            ModelKind::LinODE | ModelKind::GraphODE => {
                let path = neural_ode_integrate(
                    self,
                    tape,
                    leaves,
                    input,
                    self.spec.ode_steps,
                    self.spec.ode_dt,
                );
                let terminal = path.last().expect("at least the initial state");
                if self.spec.needs_projection() {
                    linear(&terminal.relu(), &leaves[2], &leaves[3])
                } else {
                    terminal.clone()
                }
            }
            other => panic!("{other:?} has no feed-forward map; use its task-specific driver"),
        }
    }

    /// The ODE block's right-hand side `f(x)` for the ODE kinds.
    pub fn ode_rhs(&self, tape: &Tape, leaves: &[Tensor], x: &Tensor) -> Tensor {
        match self.spec.kind {
            ModelKind::LinODE => linear(x, &leaves[0], &leaves[1]),
            ModelKind::GraphODE => {
                let adj = self.adjacency_tensor(tape);
                linear(&x.matmul(&adj), &leaves[0], &leaves[1])
            }
            other => panic!("{other:?} has no ODE block"),
        }
    }

    fn adjacency_tensor(&self, tape: &Tape) -> Tensor {
        let adj = self
            .spec
            .adjacency
            .as_ref()
            .expect("validated at build time");
        tape.constant(&[adj.rows, adj.cols], adj.data.clone())
    }

    /// Scatters `[B, s]` observations into `[B, n]` with zeros at unobserved
    /// nodes, when the spec carries an embedding.
    fn embed_input(&self, tape: &Tape, input: &Tensor) -> Tensor {
        let Some(embed) = &self.spec.embed else {
            return input.clone();
        };
        let n = self
            .spec
            .adjacency
            .as_ref()
            .map(|a| a.rows)
            .unwrap_or(self.spec.output_dim);
        let s = embed.len();
        // scatter matrix E: [s, n], E[i, embed[i]] = 1; x_embedded = x * E
        let mut scatter = vec![0.0; s * n];
        for (i, &node) in embed.iter().enumerate() {
            scatter[i * n + node] = 1.0;
        }
        let e = tape.constant(&[s, n], scatter);
        input.matmul(&e)
    }

    pub fn to_checkpoint_json(&self) -> String {
        let wire = CheckpointWire {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.values.clone()).collect(),
            seed: self.seed,
        };
        serde_json::to_string(&wire).expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, ModelError> {
        let wire: CheckpointWire = serde_json::from_str(text)?;
        let mut model = build(wire.spec, wire.seed)?;
        if wire.params.len() != model.params.len() {
            return Err(ModelError::CheckpointArity {
                got: wire.params.len(),
                want: model.params.len(),
            });
        }
        for (index, (p, v)) in model.params.iter_mut().zip(wire.params).enumerate() {
            if p.values.len() != v.len() {
                return Err(ModelError::CheckpointShape {
                    index,
                    got: v.len(),
                    want: p.values.len(),
                });
            }
            p.values = v;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointWire {
    spec: ModelSpec,
    params: Vec<Vec<f64>>,
    seed: u64,
}

/// `y = x W^T + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    x.matmul(&w.transpose()).add(b)
}

/// Euler unrolling `x_{k+1} = x_k + Δ f(x_k)`; returns all `steps + 1`
/// states including the input.
pub fn neural_ode_integrate(
    model: &Model,
    tape: &Tape,
    leaves: &[Tensor],
    x0: &Tensor,
    steps: usize,
    dt: f64,
) -> Vec<Tensor> {
    assert!(steps >= 1, "need at least one Euler step");
    let mut path = Vec::with_capacity(steps + 1);
    path.push(x0.clone());
    let mut x = x0.clone();
    for _ in 0..steps {
        let f = model.ode_rhs(tape, leaves, &x);
        x = x.add(&f.scale(dt));
        path.push(x.clone());
    }
    path
}

/// View into DIRODENN parameter leaves.
pub struct DirodennParams<'a> {
    pub raw_m: &'a Tensor,
    pub damp: &'a Tensor,
    pub inj: &'a Tensor,
    pub coupling: &'a Tensor,
}

impl<'a> DirodennParams<'a> {
    pub fn from_leaves(leaves: &'a [Tensor]) -> Self {
        Self {
            raw_m: &leaves[0],
            damp: &leaves[1],
            inj: &leaves[2],
            coupling: &leaves[3],
        }
    }
}

/// Packed index of the unordered pair {a, b} (a < b) on `s` nodes.
pub fn pair_index(a: usize, b: usize, s: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    lo * s - lo * (lo + 1) / 2 + (hi - lo - 1)
}

/// Effective-swing right-hand side over the complete graph on the observed
/// nodes:
///
/// ```text
/// dθ_a = ω_a
/// dω_a = (P̂_a - d̂_a ω_a - Σ_{b≠a} b̂_ab sin(θ_a - θ_b)) / m̂_a
/// ```
///
/// with `m̂ = raw_m²` keeping the learned inertia positive. Term order
/// mirrors the simulator's neighbor loop so that parameters copied from a
/// lossless grid reproduce its right-hand side exactly.
pub fn dirodenn_rhs(
    params: &DirodennParams,
    tape: &Tape,
    theta: &Tensor,
    omega: &Tensor,
) -> (Tensor, Tensor) {
    let s = theta.shape()[0];
    assert_eq!(omega.shape(), vec![s], "theta and omega must share length");
    let m_hat = params.raw_m.square();

    // symmetric zero-diagonal coupling matrix from the packed pair vector
    let mut map = Vec::with_capacity(s * s);
    for a in 0..s {
        for b in 0..s {
            map.push((a != b).then(|| pair_index(a, b, s)));
        }
    }
    let bmat = params.coupling.gather(&map, &[s, s]);

    let mut acc = params.inj.sub(&params.damp.mul(omega));
    let ones_col = tape.constant(&[s, 1], vec![1.0; s]);
    for j in 0..s {
        let theta_j = theta.slice(j, 1).reshape(&[1, 1]);
        let rep = ones_col.matmul(&theta_j).reshape(&[s]);
        let delta = theta.sub(&rep);
        let row = bmat.slice_rows(j, 1).reshape(&[s]);
        acc = acc.sub(&row.mul(&delta.sin()));
    }
    (omega.clone(), acc.div(&m_hat))
}

/// Copies the effective parameters of a lossless grid into a DIRODENN
/// parameter set over the full node set (inertia entries must be perfect
/// squares for the copy to be bitwise).
pub fn dirodenn_params_from_grid(model: &mut Model, net: &GridNetwork) {
    let s = net.node_count();
    assert_eq!(model.spec.kind, ModelKind::DIRODENN);
    assert_eq!(model.spec.input_dim, s, "model sized for full observability");
    let mut raw_m = Vec::with_capacity(s);
    let mut damp = Vec::with_capacity(s);
    let mut inj = Vec::with_capacity(s);
    for nd in net.nodes() {
        raw_m.push(nd.m.sqrt());
        damp.push(nd.d);
        inj.push(nd.p);
    }
    let mut coupling = vec![0.0; (s * (s - 1) / 2).max(1)];
    for line in net.lines() {
        let (va, vb) = (net.node(line.from).v, net.node(line.to).v);
        coupling[pair_index(line.from, line.to, s)] = line.b * va * vb;
    }
    model.set_params(vec![raw_m, damp, inj, coupling]);
}

/// View into HNN parameter leaves.
pub struct HnnParams<'a> {
    /// Diagonal quadratic coefficients over the stacked state `(q, p)`.
    pub quad: &'a Tensor,
    pub h_w1: &'a Tensor,
    pub h_b1: &'a Tensor,
    pub h_w2: &'a Tensor,
    /// Factor of the positive-semidefinite dissipation `D = L L^T`.
    pub dis_l: &'a Tensor,
    /// Constant source applied to the momentum equation.
    pub src: &'a Tensor,
}

impl<'a> HnnParams<'a> {
    pub fn from_leaves(leaves: &'a [Tensor]) -> Self {
        Self {
            quad: &leaves[0],
            h_w1: &leaves[1],
            h_b1: &leaves[2],
            h_w2: &leaves[3],
            dis_l: &leaves[4],
            src: &leaves[5],
        }
    }
}

/// Hamiltonian value `H(q, p) = ½ Σ c_i z_i² + w2 · tanh(W1 z + b1)` over the
/// stacked state `z = (q, p)`.
pub fn hnn_hamiltonian(params: &HnnParams, z: &Tensor) -> Tensor {
    let quad = params.quad.mul(&z.square()).sum().scale(0.5);
    let hidden = params.h_w1.matmul(z).add(params.h_b1).tanh();
    quad.add(&params.h_w2.mul(&hidden).sum())
}

/// Closed-form gradient of [`hnn_hamiltonian`] in first-order primitives:
/// `∇H = c ⊙ z + W1ᵀ (w2 ⊙ (1 - tanh²(W1 z + b1)))`.
fn hnn_grad_h(params: &HnnParams, tape: &Tape, z: &Tensor) -> Tensor {
    let u = params.h_w1.matmul(z).add(params.h_b1).tanh();
    let ones = tape.constant(&u.shape(), vec![1.0; u.shape()[0]]);
    let gate = ones.sub(&u.square()).mul(params.h_w2);
    params.quad.mul(z).add(&params.h_w1.transpose().matmul(&gate))
}

/// Port-Hamiltonian right-hand side
/// `(q̇, ṗ) = (J - L Lᵀ) ∇H + (0, F)` with `J` the canonical symplectic block.
pub fn hnn_rhs(params: &HnnParams, tape: &Tape, q: &Tensor, p: &Tensor) -> (Tensor, Tensor) {
    let s = q.shape()[0];
    assert_eq!(p.shape(), vec![s], "q and p must share length");
    let z = concat(&[q, p]);
    let grad = hnn_grad_h(params, tape, &z);
    let gq = grad.slice(0, s);
    let gp = grad.slice(s, s);
    let sympl = concat(&[&gp, &gq.neg()]);
    let dissip = params.dis_l.matmul(&params.dis_l.transpose().matmul(&grad));
    let zeros = tape.constant(&[s], vec![0.0; s]);
    let forcing = concat(&[&zeros, params.src]);
    let rhs = sympl.sub(&dissip).add(&forcing);
    (rhs.slice(0, s), rhs.slice(s, s))
}

/// View into PINN parameter leaves.
pub struct PinnParams<'a> {
    pub t_w1: &'a Tensor,
    pub t_b1: &'a Tensor,
    pub t_w2: &'a Tensor,
    pub t_b2: &'a Tensor,
    pub f_w: &'a Tensor,
    pub f_b: &'a Tensor,
}

impl<'a> PinnParams<'a> {
    pub fn from_leaves(leaves: &'a [Tensor]) -> Self {
        Self {
            t_w1: &leaves[0],
            t_b1: &leaves[1],
            t_w2: &leaves[2],
            t_b2: &leaves[3],
            f_w: &leaves[4],
            f_b: &leaves[5],
        }
    }
}

/// Evaluates the PINN state network on a column of normalized times
/// `[K+1, 1]`, producing `[K+1, state]`.
pub fn pinn_eval(params: &PinnParams, times: &Tensor) -> Tensor {
    let h = linear(times, params.t_w1, params.t_b1).tanh();
    linear(&h, params.t_w2, params.t_b2)
}

/// The PINN's learnable right-hand side applied row-wise to `[K, state]`.
pub fn pinn_rhs(params: &PinnParams, x: &Tensor) -> Tensor {
    linear(x, params.f_w, params.f_b)
}
