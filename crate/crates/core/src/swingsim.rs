//! Swing-equation integration and training-data synthesis.
//!
//! The per-node dynamics are
//!
//! ```text
//! m_a d²θ_a/dt² + d_a dθ_a/dt
//!     = P_a - Σ_b β_ab v_a v_b sin(θ_a - θ_b)
//!           - Σ_b g_ab v_a (v_a - v_b cos(θ_a - θ_b))
//! ```
//!
//! with sums over neighbors of `a`. Voltage magnitudes are held constant:
//! the model evolves phases only, so the magnitude channel of a
//! [`PathSample`] is constant unless the grid file varies `v`.
//!
//! Angles are stored unwrapped (no mod 2π) so reference pinning is stable.
//! Dataset generation derives one RNG stream per sample from
//! `(master seed, sample index)`, which makes results independent of
//! scheduling order.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{observed_submatrix, GridError, GridNetwork, ObservedSet};

/// Power-balance residual tolerance for a converged steady state.
pub const STEADY_STATE_TOL: f64 = 1e-10;
/// Frequency-deviation tolerance for a settled post-fault transient.
pub const SETTLED_OMEGA_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("steady state did not converge after {iterations} iterations (residual {residual:.3e})")]
    SteadyStateDiverged { iterations: usize, residual: f64 },
    #[error("removing line {{{a}, {b}}} islands the network; sample rejected")]
    Islanding { a: usize, b: usize },
    #[error(
        "post-fault transient for line {{{a}, {b}}} did not settle: |omega| = {omega_norm:.3e} after {horizon:.1} s"
    )]
    NotSettled { a: usize, b: usize, omega_norm: f64, horizon: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Phase and frequency-deviation state of every node at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub t: f64,
}

impl GridState {
    pub fn flat(n: usize) -> Self {
        Self {
            theta: vec![0.0; n],
            omega: vec![0.0; n],
            t: 0.0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.theta.len()
    }
}

/// States on the uniform grid `t_k = k * dt`, `k = 0..=steps`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<GridState>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

/// Precomputed coupling tables for fast right-hand-side evaluation.
///
/// Neighbor lists are sorted by node index; `b_vv` stores `β_ab v_a v_b`
/// and `g_va` stores `g_ab v_a`, so the inner loop is pure arithmetic.
pub struct SwingSystem {
    n: usize,
    m: Vec<f64>,
    d: Vec<f64>,
    p: Vec<f64>,
    v: Vec<f64>,
    neighbors: Vec<Vec<Neighbor>>,
}

struct Neighbor {
    node: usize,
    b_vv: f64,
    g_va: f64,
    vb: f64,
}

impl SwingSystem {
    pub fn new(net: &GridNetwork) -> Self {
        let n = net.node_count();
        let mut neighbors: Vec<Vec<Neighbor>> = (0..n).map(|_| Vec::new()).collect();
        for line in net.lines() {
            let (va, vb) = (net.node(line.from).v, net.node(line.to).v);
            neighbors[line.from].push(Neighbor {
                node: line.to,
                b_vv: line.b * va * vb,
                g_va: line.g * va,
                vb,
            });
            neighbors[line.to].push(Neighbor {
                node: line.from,
                b_vv: line.b * vb * va,
                g_va: line.g * vb,
                vb: va,
            });
        }
        for list in &mut neighbors {
            list.sort_by_key(|nb| nb.node);
        }
        Self {
            n,
            m: net.nodes().iter().map(|nd| nd.m).collect(),
            d: net.nodes().iter().map(|nd| nd.d).collect(),
            p: net.nodes().iter().map(|nd| nd.p).collect(),
            v: net.nodes().iter().map(|nd| nd.v).collect(),
            neighbors,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Net power residual `P_a - d_a ω_a - flow_a(θ)` before dividing by inertia.
    fn torque(&self, a: usize, theta: &[f64], omega: &[f64]) -> f64 {
        let mut acc = self.p[a] - self.d[a] * omega[a];
        let va = self.v[a];
        for nb in &self.neighbors[a] {
            let delta = theta[a] - theta[nb.node];
            acc -= nb.b_vv * delta.sin();
            acc -= nb.g_va * (va - nb.vb * delta.cos());
        }
        acc
    }

    /// Writes `dω_a/dt` into `out`.
    pub fn accel(&self, theta: &[f64], omega: &[f64], out: &mut [f64]) {
        for a in 0..self.n {
            out[a] = self.torque(a, theta, omega) / self.m[a];
        }
    }

    /// Power-balance residual at ω = 0 (zero at an equilibrium).
    pub fn residual(&self, theta: &[f64], out: &mut [f64]) {
        let omega = vec![0.0; self.n];
        for a in 0..self.n {
            out[a] = self.torque(a, theta, &omega);
        }
    }

    /// Flat-state right-hand side over `[θ..., ω...]`, for the integrator core.
    pub fn rhs_flat(&self, x: &[f64], out: &mut [f64]) {
        let (theta, omega) = x.split_at(self.n);
        let (dtheta, domega) = out.split_at_mut(self.n);
        dtheta.copy_from_slice(omega);
        for a in 0..self.n {
            domega[a] = self.torque(a, theta, omega) / self.m[a];
        }
    }
}

/// Per-node time derivatives `(dθ, dω)` of the swing equations.
pub fn swing_rhs(net: &GridNetwork, state: &GridState) -> (Vec<f64>, Vec<f64>) {
    let sys = SwingSystem::new(net);
    let mut domega = vec![0.0; sys.node_count()];
    sys.accel(&state.theta, &state.omega, &mut domega);
    (state.omega.clone(), domega)
}

/// Fixed-step integration of a generic autonomous system.
///
/// Euler realizes `x(t_{k+1}) = x(t_k) + Δ f(x(t_k))`; Rk4 is the classical
/// fourth-order scheme used for ground-truth generation.
pub fn integrate_core<F>(
    rhs: F,
    x0: &[f64],
    dt: f64,
    steps: usize,
    method: Method,
) -> Result<Vec<Vec<f64>>, SimError>
where
    F: Fn(&[f64], &mut [f64]),
{
    assert!(dt > 0.0, "time step must be positive, got {dt}");
    assert!(steps >= 1, "need at least one step");
    let dim = x0.len();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for step in 1..=steps {
        match method {
            Method::Euler => {
                rhs(&x, &mut k1);
                for i in 0..dim {
                    x[i] += dt * k1[i];
                }
            }
            Method::Rk4 => {
                rhs(&x, &mut k1);
                for i in 0..dim {
                    tmp[i] = x[i] + 0.5 * dt * k1[i];
                }
                rhs(&tmp, &mut k2);
                for i in 0..dim {
                    tmp[i] = x[i] + 0.5 * dt * k2[i];
                }
                rhs(&tmp, &mut k3);
                for i in 0..dim {
                    tmp[i] = x[i] + dt * k3[i];
                }
                rhs(&tmp, &mut k4);
                for i in 0..dim {
                    x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { step });
        }
        states.push(x.clone());
    }
    Ok(states)
}

/// Integrates the swing equations from `x0` for `steps` steps of size `dt`.
pub fn integrate(
    net: &GridNetwork,
    x0: &GridState,
    dt: f64,
    steps: usize,
    method: Method,
) -> Result<Trajectory, SimError> {
    let sys = SwingSystem::new(net);
    let n = sys.node_count();
    assert_eq!(x0.node_count(), n, "state size does not match network");
    let mut flat = x0.theta.clone();
    flat.extend_from_slice(&x0.omega);
    let states = integrate_core(|x, out| sys.rhs_flat(x, out), &flat, dt, steps, method)?;
    Ok(Trajectory {
        dt,
        states: states
            .into_iter()
            .enumerate()
            .map(|(k, flat)| GridState {
                theta: flat[..n].to_vec(),
                omega: flat[n..].to_vec(),
                t: x0.t + k as f64 * dt,
            })
            .collect(),
    })
}

/// Solves the power balance for an ω = 0 equilibrium with node 0 as phase
/// reference, by damped Newton iteration on the remaining angles.
pub fn steady_state(net: &GridNetwork, guess: &GridState) -> Result<GridState, SimError> {
    let sys = SwingSystem::new(net);
    let n = sys.node_count();
    assert_eq!(guess.node_count(), n, "guess size does not match network");
    let max_iters = 100;

    // pin the reference node
    let mut theta: Vec<f64> = guess.theta.iter().map(|t| t - guess.theta[0]).collect();
    let mut residual = vec![0.0; n];
    sys.residual(&theta, &mut residual);
    let free = n - usize::from(n > 0);

    let inf_norm = |r: &[f64]| r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));

    if free > 0 {
        let mut res_norm = inf_norm(&residual[1..]);
        for _ in 0..max_iters {
            if res_norm < 1e-12 {
                break;
            }
            // Jacobian of the residual at the free nodes
            let mut jac = nalgebra::DMatrix::<f64>::zeros(free, free);
            for a in 1..n {
                for nb in &sys.neighbors[a] {
                    let delta = theta[a] - theta[nb.node];
                    let coupling = nb.b_vv * delta.cos() + nb.g_va * nb.vb * delta.sin();
                    jac[(a - 1, a - 1)] -= coupling;
                    if nb.node > 0 {
                        jac[(a - 1, nb.node - 1)] += coupling;
                    }
                }
            }
            let rhs = nalgebra::DVector::from_iterator(free, residual[1..].iter().map(|r| -r));
            let Some(delta) = jac.lu().solve(&rhs) else {
                return Err(SimError::SteadyStateDiverged {
                    iterations: max_iters,
                    residual: res_norm,
                });
            };
            // damped update: halve the step while it fails to reduce the residual
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> = (0..n)
                    .map(|a| {
                        if a == 0 {
                            theta[0]
                        } else {
                            theta[a] + scale * delta[a - 1]
                        }
                    })
                    .collect();
                let mut trial_res = vec![0.0; n];
                sys.residual(&trial, &mut trial_res);
                let trial_norm = inf_norm(&trial_res[1..]);
                if trial_norm < res_norm || trial_norm < 1e-12 {
                    theta = trial;
                    residual = trial_res;
                    res_norm = trial_norm;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                return Err(SimError::SteadyStateDiverged {
                    iterations: max_iters,
                    residual: res_norm,
                });
            }
        }
    }

    sys.residual(&theta, &mut residual);
    let full_norm = inf_norm(&residual);
    if full_norm >= STEADY_STATE_TOL {
        return Err(SimError::SteadyStateDiverged {
            iterations: max_iters,
            residual: full_norm,
        });
    }
    Ok(GridState {
        theta,
        omega: vec![0.0; n],
        t: 0.0,
    })
}

/// Total energy `Σ m_a ω_a²/2 - Σ P_a θ_a - Σ β_ab v_a v_b cos(θ_a - θ_b)`.
///
/// Conserved along undamped lossless trajectories; decays at rate
/// `Σ d_a ω_a²` when damping is present.
pub fn system_energy(net: &GridNetwork, state: &GridState) -> f64 {
    let kinetic: f64 = net
        .nodes()
        .iter()
        .zip(&state.omega)
        .map(|(nd, w)| 0.5 * nd.m * w * w)
        .sum();
    let injection: f64 = net
        .nodes()
        .iter()
        .zip(&state.theta)
        .map(|(nd, th)| nd.p * th)
        .sum();
    let coupling: f64 = net
        .lines()
        .iter()
        .map(|l| {
            let (va, vb) = (net.node(l.from).v, net.node(l.to).v);
            l.b * va * vb * (state.theta[l.from] - state.theta[l.to]).cos()
        })
        .sum();
    kinetic - injection - coupling
}

/// One fault-localization training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultSample {
    /// `x = Y_sub ΔU`, length n.
    pub x: Vec<Complex64>,
    /// Index of the faulted line in the intact network's line list.
    pub label: usize,
    pub obs: ObservedSet,
}

impl FaultSample {
    /// One-hot label over `lines` classes.
    pub fn one_hot(&self, lines: usize) -> Vec<f64> {
        let mut y = vec![0.0; lines];
        y[self.label] = 1.0;
        y
    }
}

#[derive(Serialize, Deserialize)]
struct FaultSampleWire {
    x_re: Vec<f64>,
    x_im: Vec<f64>,
    y: usize,
    obs: Vec<usize>,
}

impl FaultSample {
    pub fn to_json_line(&self) -> String {
        let wire = FaultSampleWire {
            x_re: self.x.iter().map(|c| c.re).collect(),
            x_im: self.x.iter().map(|c| c.im).collect(),
            y: self.label,
            obs: self.obs.indices().to_vec(),
        };
        serde_json::to_string(&wire).expect("fault sample serialization cannot fail")
    }

    pub fn from_json_line(line: &str, n: usize) -> Result<Self, GridError> {
        let wire: FaultSampleWire = serde_json::from_str(line)?;
        let x = wire
            .x_re
            .iter()
            .zip(&wire.x_im)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect();
        Ok(Self {
            x,
            label: wire.y,
            obs: ObservedSet::new(wire.obs, n)?,
        })
    }
}

/// The linear sample map `x = Y_sub ΔU`.
pub fn fault_input(
    y: &crate::matrix::ComplexMatrix,
    obs: &ObservedSet,
    du: &[Complex64],
) -> Vec<Complex64> {
    let sub = observed_submatrix(y, obs);
    sub.matvec(du)
}

/// Integrates the post-fault transient after removing `edge` and returns the
/// settled state.
fn settle_after_removal(
    net: &GridNetwork,
    base: &GridState,
    edge: (usize, usize),
    dt: f64,
    steps: usize,
) -> Result<GridState, SimError> {
    let (a, b) = edge;
    let post = net.remove_line(a, b)?;
    if !post.is_connected() {
        return Err(SimError::Islanding { a, b });
    }
    let start = GridState {
        theta: base.theta.clone(),
        omega: vec![0.0; base.node_count()],
        t: 0.0,
    };
    let trajectory = integrate(&post, &start, dt, steps, Method::Rk4)?;
    let settled = trajectory.states.last().expect("at least one state");
    let omega_norm = settled.omega.iter().fold(0.0_f64, |m, w| m.max(w.abs()));
    if omega_norm >= SETTLED_OMEGA_TOL {
        return Err(SimError::NotSettled {
            a,
            b,
            omega_norm,
            horizon: trajectory.horizon(),
        });
    }
    Ok(settled.clone())
}

fn sample_from_settled(
    net: &GridNetwork,
    y: &crate::matrix::ComplexMatrix,
    base: &GridState,
    settled: &GridState,
    label: usize,
    obs: &ObservedSet,
) -> FaultSample {
    let du: Vec<Complex64> = obs
        .indices()
        .iter()
        .map(|&node| {
            let v = net.node(node).v;
            let before = Complex64::from_polar(v, base.theta[node]);
            let after = Complex64::from_polar(v, settled.theta[node]);
            after - before
        })
        .collect();
    FaultSample {
        x: fault_input(y, obs, &du),
        label,
        obs: obs.clone(),
    }
}

/// Removes `edge`, integrates the post-fault transient to a settled state,
/// and forms the localization sample from the observed voltage change.
///
/// `steps` bounds the transient horizon at `steps * dt` seconds; a sample is
/// rejected if the network islands or the frequency deviation has not
/// dropped below [`SETTLED_OMEGA_TOL`] at the horizon.
pub fn make_fault_sample(
    net: &GridNetwork,
    base: &GridState,
    edge: (usize, usize),
    obs: &ObservedSet,
    dt: f64,
    steps: usize,
) -> Result<FaultSample, SimError> {
    let (a, b) = edge;
    let label = net
        .line_index(a, b)
        .ok_or(GridError::UnknownLine { a, b })?;
    let settled = settle_after_removal(net, base, edge, dt, steps)?;
    let y = net.admittance_matrix();
    Ok(sample_from_settled(net, &y, base, &settled, label, obs))
}

/// Pre-fault equilibrium plus the settled post-fault state of every line
/// whose outage converges. The transients do not depend on the observed set,
/// so one catalog serves any number of placements.
pub struct FaultCatalog {
    pub base: GridState,
    /// (line index, settled state) for accepted outages.
    pub settled: Vec<(usize, GridState)>,
    pub rejected: Vec<SimError>,
}

/// Integrates every single-line outage once.
pub fn build_fault_catalog(
    net: &GridNetwork,
    dt: f64,
    steps: usize,
) -> Result<FaultCatalog, SimError> {
    let base = steady_state(net, &GridState::flat(net.node_count()))?;
    let results: Vec<(usize, Result<GridState, SimError>)> = net
        .lines()
        .par_iter()
        .enumerate()
        .map(|(label, line)| {
            (
                label,
                settle_after_removal(net, &base, (line.from, line.to), dt, steps),
            )
        })
        .collect();
    let mut settled = Vec::new();
    let mut rejected = Vec::new();
    for (label, r) in results {
        match r {
            Ok(state) => settled.push((label, state)),
            Err(e) => rejected.push(e),
        }
    }
    Ok(FaultCatalog {
        base,
        settled,
        rejected,
    })
}

/// Localization samples for one placement, read off a prebuilt catalog.
pub fn catalog_samples(
    net: &GridNetwork,
    catalog: &FaultCatalog,
    obs: &ObservedSet,
) -> Vec<FaultSample> {
    let y = net.admittance_matrix();
    catalog
        .settled
        .iter()
        .map(|(label, state)| sample_from_settled(net, &y, &catalog.base, state, *label, obs))
        .collect()
}

/// Generates one fault sample per line, collecting rejections separately.
pub fn make_fault_dataset(
    net: &GridNetwork,
    obs: &ObservedSet,
    dt: f64,
    steps: usize,
) -> Result<(Vec<FaultSample>, Vec<SimError>), SimError> {
    let catalog = build_fault_catalog(net, dt, steps)?;
    let samples = catalog_samples(net, &catalog, obs);
    Ok((samples, catalog.rejected))
}

/// Random initial-condition offsets for path generation, plus an optional
/// observation noise level (standard deviation, off when zero).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub theta_mag: f64,
    pub omega_mag: f64,
    #[serde(default)]
    pub noise_std: f64,
}

/// One dynamic-state-estimation sample: the observed path (channels:
/// magnitude, phase) and the full-state target path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub obs: Vec<usize>,
    pub dt: f64,
    /// `[2][s][K+1]`, channel-major.
    pub input: Vec<Vec<Vec<f64>>>,
    /// `[2][n][K+1]`, channel-major.
    pub target: Vec<Vec<Vec<f64>>>,
}

impl PathSample {
    pub fn steps(&self) -> usize {
        self.input[0][0].len() - 1
    }

    pub fn observed_count(&self) -> usize {
        self.input[0].len()
    }

    pub fn node_count(&self) -> usize {
        self.target[0].len()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("path sample serialization cannot fail")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Integrates `count` randomly perturbed trajectories around the equilibrium.
/// Deterministic per seed: sample `i` draws from stream `i` of the master seed.
pub fn make_path_dataset(
    net: &GridNetwork,
    pert: &PerturbationSpec,
    obs: &ObservedSet,
    dt: f64,
    steps: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PathSample>, SimError> {
    assert!(
        pert.theta_mag >= 0.0 && pert.omega_mag >= 0.0 && pert.theta_mag + pert.omega_mag >= 0.0,
        "perturbation magnitudes must be nonnegative"
    );
    let base = steady_state(net, &GridState::flat(net.node_count()))?;
    let n = net.node_count();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut x0 = base.clone();
            for a in 0..n {
                if pert.theta_mag > 0.0 {
                    x0.theta[a] += rng.gen_range(-pert.theta_mag..pert.theta_mag);
                }
                if pert.omega_mag > 0.0 {
                    x0.omega[a] += rng.gen_range(-pert.omega_mag..pert.omega_mag);
                }
            }
            let trajectory = integrate(net, &x0, dt, steps, Method::Rk4)?;
            let k1 = steps + 1;
            let magnitude = |node: usize| net.node(node).v;

            let mut target = vec![vec![vec![0.0; k1]; n]; 2];
            for (k, state) in trajectory.states.iter().enumerate() {
                for a in 0..n {
                    target[0][a][k] = magnitude(a);
                    target[1][a][k] = state.theta[a];
                }
            }
            let s = obs.len();
            let mut input = vec![vec![vec![0.0; k1]; s]; 2];
            for (col, &node) in obs.indices().iter().enumerate() {
                for k in 0..k1 {
                    input[0][col][k] = target[0][node][k];
                    input[1][col][k] = target[1][node][k];
                }
            }
            if pert.noise_std > 0.0 {
                for channel in &mut input {
                    for row in channel {
                        for v in row {
                            // Box-Muller from the same per-sample stream
                            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                            let u2: f64 = rng.gen::<f64>();
                            let z = (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos();
                            *v += pert.noise_std * z;
                        }
                    }
                }
            }
            Ok(PathSample {
                obs: obs.indices().to_vec(),
                dt,
                input,
                target,
            })
        })
        .collect()
}
