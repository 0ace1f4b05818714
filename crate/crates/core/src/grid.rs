//! Power network topology, admittances, and derived matrices.
//!
//! A [`GridNetwork`] is immutable once built; operations that change the
//! network ([`GridNetwork::remove_line`]) return a fresh value, so networks
//! and their derived matrices can be shared freely across threads.

use std::collections::HashSet;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::{ComplexMatrix, RealMatrix};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("failed to read grid file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed grid file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("field \"n\" is {n} but \"nodes\" has {actual} entries")]
    NodeCountMismatch { n: usize, actual: usize },
    #[error("line {index}: self-loop at node {node}")]
    SelfLoop { index: usize, node: usize },
    #[error("line {index}: duplicate line {{{a}, {b}}}")]
    DuplicateLine { index: usize, a: usize, b: usize },
    #[error("line {index}: endpoint {node} out of range for n = {n}")]
    EndpointOutOfRange { index: usize, node: usize, n: usize },
    #[error("node {node}: field \"m\" must be positive, got {value}")]
    NonPositiveInertia { node: usize, value: f64 },
    #[error("line {index}: field \"b\" must be positive, got {value}")]
    NonPositiveSusceptance { index: usize, value: f64 },
    #[error("line {index}: field \"g\" must be nonnegative, got {value}")]
    NegativeConductance { index: usize, value: f64 },
    #[error("grid needs at least 2 nodes to carry a line, got n = {n}")]
    TooFewNodes { n: usize },
    #[error("no line {{{a}, {b}}} in the network")]
    UnknownLine { a: usize, b: usize },
    #[error("cannot realize {lines} lines on {n} nodes (need {min}..={max})")]
    InfeasibleDegree { n: usize, lines: usize, min: usize, max: usize },
    #[error("observed set must contain between 1 and {n} nodes, got {s}")]
    ObservedSetSize { s: usize, n: usize },
    #[error("observed set must be sorted ascending without duplicates at position {position}")]
    ObservedSetOrder { position: usize },
    #[error("observed node {node} out of range for n = {n}")]
    ObservedOutOfRange { node: usize, n: usize },
}

/// Per-node dynamic parameters, all in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    /// Inertia constant (s^2).
    pub m: f64,
    /// Damping / droop coefficient (s).
    pub d: f64,
    /// Net power injection.
    #[serde(rename = "P")]
    pub p: f64,
    /// Voltage magnitude.
    pub v: f64,
}

/// Transmission line between two nodes with conductance `g` and susceptance `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridFile {
    n: usize,
    nodes: Vec<NodeParams>,
    lines: Vec<Line>,
}

/// The power network under study: topology plus device parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridNetwork {
    nodes: Vec<NodeParams>,
    lines: Vec<Line>,
}

impl GridNetwork {
    /// Builds and validates a network from raw parts.
    pub fn new(nodes: Vec<NodeParams>, lines: Vec<Line>) -> Result<Self, GridError> {
        let n = nodes.len();
        let mut seen = HashSet::new();
        for (index, line) in lines.iter().enumerate() {
            if n < 2 {
                return Err(GridError::TooFewNodes { n });
            }
            if line.from == line.to {
                return Err(GridError::SelfLoop {
                    index,
                    node: line.from,
                });
            }
            for node in [line.from, line.to] {
                if node >= n {
                    return Err(GridError::EndpointOutOfRange { index, node, n });
                }
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !seen.insert(key) {
                return Err(GridError::DuplicateLine {
                    index,
                    a: key.0,
                    b: key.1,
                });
            }
            if line.b <= 0.0 || !line.b.is_finite() {
                return Err(GridError::NonPositiveSusceptance {
                    index,
                    value: line.b,
                });
            }
            if line.g < 0.0 || !line.g.is_finite() {
                return Err(GridError::NegativeConductance {
                    index,
                    value: line.g,
                });
            }
        }
        for (node, params) in nodes.iter().enumerate() {
            if params.m <= 0.0 || !params.m.is_finite() {
                return Err(GridError::NonPositiveInertia {
                    node,
                    value: params.m,
                });
            }
        }
        Ok(Self { nodes, lines })
    }

    /// Loads a network from the JSON grid schema.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let file: GridFile = serde_json::from_str(text)?;
        if file.nodes.len() != file.n {
            return Err(GridError::NodeCountMismatch {
                n: file.n,
                actual: file.nodes.len(),
            });
        }
        Self::new(file.nodes, file.lines)
    }

    pub fn to_json(&self) -> String {
        let file = GridFile {
            n: self.node_count(),
            nodes: self.nodes.clone(),
            lines: self.lines.clone(),
        };
        serde_json::to_string_pretty(&file).expect("grid serialization cannot fail")
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn node(&self, a: usize) -> &NodeParams {
        &self.nodes[a]
    }

    pub fn nodes(&self) -> &[NodeParams] {
        &self.nodes
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Index of the line {a, b}, if present.
    pub fn line_index(&self, a: usize, b: usize) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.lines
            .iter()
            .position(|l| (l.from.min(l.to), l.from.max(l.to)) == key)
    }

    /// Dense complex admittance matrix: `Y_ab = g_ab + i b_ab` on lines,
    /// diagonal `Y_aa = -sum_b Y_ab`.
    pub fn admittance_matrix(&self) -> ComplexMatrix {
        let n = self.node_count();
        let mut y = ComplexMatrix::zeros(n, n);
        for line in &self.lines {
            let adm = Complex64::new(line.g, line.b);
            y[(line.from, line.to)] += adm;
            y[(line.to, line.from)] += adm;
            y[(line.from, line.from)] -= adm;
            y[(line.to, line.to)] -= adm;
        }
        y
    }

    /// Symmetric renormalized adjacency `D^{-1/2} (|Y| + I) D^{-1/2}` where
    /// `|Y|` holds the entrywise moduli of the off-diagonal admittances and
    /// `D` is the diagonal of row sums.
    pub fn normalized_adjacency(&self) -> RealMatrix {
        let n = self.node_count();
        let mut a = RealMatrix::identity(n);
        for line in &self.lines {
            let w = Complex64::new(line.g, line.b).norm();
            a[(line.from, line.to)] = w;
            a[(line.to, line.from)] = w;
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| a[(i, j)]).sum::<f64>())
            .collect();
        let mut out = RealMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = a[(i, j)] / (deg[i] * deg[j]).sqrt();
            }
        }
        out
    }

    /// Returns a copy of the network with the line {a, b} deleted.
    pub fn remove_line(&self, a: usize, b: usize) -> Result<Self, GridError> {
        let index = self
            .line_index(a, b)
            .ok_or(GridError::UnknownLine { a, b })?;
        let mut lines = self.lines.clone();
        lines.remove(index);
        Ok(Self {
            nodes: self.nodes.clone(),
            lines,
        })
    }

    /// Subnetwork on the observed nodes: lines with both endpoints observed,
    /// reindexed by position in the observed set.
    pub fn induced_subgraph(&self, obs: &ObservedSet) -> Self {
        let position = |node: usize| obs.indices().iter().position(|&i| i == node);
        let nodes: Vec<NodeParams> = obs
            .indices()
            .iter()
            .map(|&i| self.nodes[i].clone())
            .collect();
        let lines: Vec<Line> = self
            .lines
            .iter()
            .filter_map(|l| {
                let from = position(l.from)?;
                let to = position(l.to)?;
                Some(Line {
                    from,
                    to,
                    g: l.g,
                    b: l.b,
                })
            })
            .collect();
        Self { nodes, lines }
    }

    /// True if every node can reach every other through the line set.
    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); n];
        for line in &self.lines {
            adj[line.from].push(line.to);
            adj[line.to].push(line.from);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }
}

/// Columns of `y` restricted to the observed nodes, in observed order.
pub fn observed_submatrix(y: &ComplexMatrix, obs: &ObservedSet) -> ComplexMatrix {
    let n = y.rows;
    let s = obs.len();
    let mut out = ComplexMatrix::zeros(n, s);
    for (col, &node) in obs.indices().iter().enumerate() {
        assert!(node < y.cols, "observed node {node} out of range");
        for row in 0..n {
            out[(row, col)] = y[(row, node)];
        }
    }
    out
}

/// Ordered set of sensor-equipped node indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedSet {
    indices: Vec<usize>,
}

impl ObservedSet {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self, GridError> {
        if indices.is_empty() || indices.len() > n {
            return Err(GridError::ObservedSetSize {
                s: indices.len(),
                n,
            });
        }
        for (position, pair) in indices.windows(2).enumerate() {
            if pair[0] >= pair[1] {
                return Err(GridError::ObservedSetOrder {
                    position: position + 1,
                });
            }
        }
        if let Some(&last) = indices.last() {
            if last >= n {
                return Err(GridError::ObservedOutOfRange { node: last, n });
            }
        }
        Ok(Self { indices })
    }

    /// All nodes observed.
    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    /// Deterministic random subset of `s` nodes.
    pub fn random(n: usize, s: usize, seed: u64) -> Result<Self, GridError> {
        if s == 0 || s > n {
            return Err(GridError::ObservedSetSize { s, n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        let mut picked: Vec<usize> = all.into_iter().take(s).collect();
        picked.sort_unstable();
        Self::new(picked, n)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, node: usize) -> bool {
        self.indices.binary_search(&node).is_ok()
    }
}

/// Synthesizes a connected random network with roughly the requested mean
/// degree; deterministic for a fixed seed.
///
/// When the line budget allows, the topology is a shuffled ring plus random
/// chords, so every single-line outage leaves the network connected.
/// Injections are constructed from a drawn equilibrium angle profile, which
/// guarantees the swing equations admit an exact steady state.
pub fn synthesize_grid(n: usize, avg_degree: f64, seed: u64) -> Result<GridNetwork, GridError> {
    if n < 2 {
        return Err(GridError::TooFewNodes { n });
    }
    assert!(
        (1.0..=4.0).contains(&avg_degree),
        "avg_degree must lie in [1, 4], got {avg_degree}"
    );
    let lines_wanted = (avg_degree * n as f64 / 2.0).round() as usize;
    let max = n * (n - 1) / 2;
    if lines_wanted < n - 1 || lines_wanted > max {
        return Err(GridError::InfeasibleDegree {
            n,
            lines: lines_wanted,
            min: n - 1,
            max,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut edges: HashSet<(usize, usize)> = HashSet::new();
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    if lines_wanted >= n && n >= 3 {
        // ring backbone: no single-line outage can island the network
        for i in 0..n {
            edges.insert(key(order[i], order[(i + 1) % n]));
        }
    } else {
        // random spanning tree
        for i in 1..n {
            let j = rng.gen_range(0..i);
            edges.insert(key(order[i], order[j]));
        }
    }
    while edges.len() < lines_wanted {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.insert(key(a, b));
        }
    }
    let mut edge_list: Vec<(usize, usize)> = edges.into_iter().collect();
    edge_list.sort_unstable();

    // Lines are synthesized lossless: with g > 0 the injections could not be
    // kept consistent across single-line outages (losses change with the
    // topology), and the N-1 protocol needs every post-fault state to settle
    // to an exact zero-frequency equilibrium. Susceptances correspond to
    // reactances of 0.05-0.125 p.u.; the inertia/damping balance keeps both
    // the soft interarea modes (rate ~ lambda_min/d) and the local modes
    // (rate ~ d/2m) decaying fast enough for 20-second transients.
    let lines: Vec<Line> = edge_list
        .into_iter()
        .map(|(from, to)| Line {
            from,
            to,
            g: 0.0,
            b: rng.gen_range(8.0..20.0),
        })
        .collect();

    let mut nodes: Vec<NodeParams> = (0..n)
        .map(|_| NodeParams {
            m: rng.gen_range(0.1..0.3),
            d: rng.gen_range(0.8..1.5),
            p: 0.0,
            v: rng.gen_range(0.98..1.02),
        })
        .collect();

    // draw an equilibrium angle profile and back out the injections so the
    // drawn angles solve the power balance exactly
    let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.15..0.15)).collect();
    for a in 0..n {
        let mut p = 0.0;
        for line in &lines {
            let other = match (line.from == a, line.to == a) {
                (true, _) => line.to,
                (_, true) => line.from,
                _ => continue,
            };
            let va = nodes[a].v;
            let vb = nodes[other].v;
            let delta = theta[a] - theta[other];
            p += line.b * va * vb * delta.sin();
            p += line.g * va * (va - vb * delta.cos());
        }
        nodes[a].p = p;
    }

    GridNetwork::new(nodes, lines)
}
