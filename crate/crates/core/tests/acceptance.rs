//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured numbers (run with `--nocapture` to see them).

use std::time::Instant;

use gridlearn_core::autodiff::{grad_check, Tape};
use gridlearn_core::grid::{synthesize_grid, GridNetwork, Line, NodeParams, ObservedSet};
use gridlearn_core::matrix::RealMatrix;
use gridlearn_core::models::{
    build, dirodenn_params_from_grid, dirodenn_rhs, hnn_hamiltonian, hnn_rhs, pinn_eval, pinn_rhs,
    DirodennParams, HnnParams, Model, ModelKind, ModelSpec, PinnParams, Task,
};
use gridlearn_core::placement::{
    brute_force_placement, optimize_alpha, soft_top_s_gate, top_s_indices, train_predictor,
    transfer_retrain, OpNet, PlacementSample, PlacementScorer, StageTwoConfig,
};
use gridlearn_core::swingsim::{
    build_fault_catalog, catalog_samples, integrate, integrate_core, make_fault_dataset,
    make_path_dataset, steady_state, swing_rhs, system_energy, GridState, Method,
    PerturbationSpec,
};
use gridlearn_core::train::{
    accuracy_db, cross_entropy, eval_dse, localizer_accuracy, train_dse, train_localizer,
    TrainConfig,
};

fn fixture_path() -> String {
    format!("{}/fixtures/grid68.json", env!("CARGO_MANIFEST_DIR"))
}

fn two_node(p: f64, m: (f64, f64), d: f64, b: f64) -> GridNetwork {
    GridNetwork::new(
        vec![
            NodeParams { m: m.0, d, p, v: 1.0 },
            NodeParams { m: m.1, d, p: -p, v: 1.0 },
        ],
        vec![Line { from: 0, to: 1, g: 0.0, b }],
    )
    .unwrap()
}

#[test]
fn c01_golden_parameter_counts() {
    let start = Instant::now();
    let eye68 = RealMatrix::identity(68);

    let static_spec = |kind: ModelKind| {
        let spec = ModelSpec::new(kind, Task::Localize, 68, 87);
        match kind {
            ModelKind::GCNN | ModelKind::GraphODE => spec.with_adjacency(eye68.clone()),
            _ => spec,
        }
    };
    for (kind, want) in [
        (ModelKind::LR, 6003),
        (ModelKind::FFNN, 5079),
        (ModelKind::GCNN, 5079),
        (ModelKind::AlexNet1D, 2071),
        (ModelKind::LinODE, 10695),
        (ModelKind::GraphODE, 10695),
    ] {
        let model = build(static_spec(kind), 0).unwrap();
        assert_eq!(model.param_count(), want, "static {kind}");
    }

    // dynamic task at full observability
    for (kind, want) in [
        (ModelKind::LR, 4692),
        (ModelKind::FFNN, 4452),
        (ModelKind::GCNN, 4452),
    ] {
        let spec = ModelSpec::new(kind, Task::DseStep, 68, 68);
        let spec = match kind {
            ModelKind::GCNN => spec
                .with_adjacency(eye68.clone())
                .with_embed((0..68).collect()),
            _ => spec,
        };
        let model = build(spec, 0).unwrap();
        assert_eq!(model.param_count(), want, "dynamic {kind} at 100%");
    }

    // dynamic LR across the partial-observability grid
    for (s, want) in [(46, 3196), (26, 1836), (13, 952), (6, 476), (3, 272)] {
        let model = build(ModelSpec::new(ModelKind::LR, Task::DseStep, s, 68), 0).unwrap();
        assert_eq!(model.param_count(), want, "dynamic LR s={s}");
    }

    // dynamic LinODE: no projection at full observability, Lin(s -> 68) below
    for (s, want) in [(68, 4692), (46, 5358), (26, 2538), (13, 1134), (6, 518)] {
        let model = build(ModelSpec::new(ModelKind::LinODE, Task::DsePath, s, 68), 0).unwrap();
        assert_eq!(model.param_count(), want, "dynamic LinODE s={s}");
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    println!("criterion 1 PASS: all golden parameter counts exact ({elapsed:?})");
}

#[test]
fn c02_gradient_checks() {
    use rand::Rng;
    use rand::SeedableRng;
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut worst_primitive = 0.0_f64;

    // 100 random fixtures per primitive; kink-bearing ops sampled away from
    // their kinks by a 1e-2 margin
    for _ in 0..100 {
        let away: Vec<f64> = (0..6)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.5);
                if rng.gen_bool(0.5) {
                    v + 0.01
                } else {
                    -v - 0.01
                }
            })
            .collect();
        let pos: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..2.0)).collect();
        let checks = [
            grad_check(|_t, l| l[0].relu().square().sum(), &[(vec![6], away.clone())], 1e-5),
            grad_check(|_t, l| l[0].sigmoid().sum(), &[(vec![6], away.clone())], 1e-5),
            grad_check(|_t, l| l[0].tanh().sum(), &[(vec![6], away.clone())], 1e-5),
            grad_check(|_t, l| l[0].sin().mul(&l[0].cos()).sum(), &[(vec![6], away.clone())], 1e-5),
            grad_check(|_t, l| l[0].log().sum(), &[(vec![6], pos.clone())], 1e-5),
            grad_check(|_t, l| l[0].recip().sum(), &[(vec![6], pos.clone())], 1e-5),
            grad_check(|_t, l| l[0].softmax().square().sum(), &[(vec![6], away.clone())], 1e-5),
            grad_check(|_t, l| l[0].mean(), &[(vec![6], away.clone())], 1e-5),
            grad_check(
                |_t, l| l[0].matmul(&l[1]).square().sum(),
                &[(vec![2, 3], away.clone()), (vec![3, 2], pos.clone())],
                1e-5,
            ),
            grad_check(
                |_t, l| l[0].div(&l[1]).sum(),
                &[(vec![6], away.clone()), (vec![6], pos.clone())],
                1e-5,
            ),
            grad_check(
                |t, l| {
                    let b = t.constant(&[1], vec![0.2]);
                    l[0].reshape(&[1, 1, 6])
                        .conv1d(&l[1].reshape(&[1, 1, 3]), &b, 1)
                        .maxpool1d(2, 2)
                        .square()
                        .sum()
                },
                &[(vec![6], away.clone()), (vec![3], pos[..3].to_vec())],
                1e-5,
            ),
            grad_check(
                |_t, l| {
                    l[0].gather(&[Some(4), None, Some(1), Some(1)], &[2, 2])
                        .square()
                        .sum()
                },
                &[(vec![6], away.clone())],
                1e-5,
            ),
        ];
        for err in checks {
            worst_primitive = worst_primitive.max(err);
        }
    }
    assert!(worst_primitive < 1e-5, "primitive grad error {worst_primitive}");

    // 100 random fixtures per full model kind, desk-size specs
    let net = synthesize_grid(4, 2.0, 5).unwrap();
    let obs = ObservedSet::full(4);
    let mut worst_model = 0.0_f64;
    for kind in ModelKind::ALL {
        let model = match kind {
            ModelKind::AlexNet1D => {
                build(ModelSpec::new(kind, Task::Localize, 60, 3), 6).unwrap()
            }
            ModelKind::PINN | ModelKind::HNN => {
                build(ModelSpec::dse_path(kind, &net, &obs).with_hidden(4), 6).unwrap()
            }
            ModelKind::DIRODENN => build(ModelSpec::dse_path(kind, &net, &obs), 6).unwrap(),
            _ => build(ModelSpec::localize(kind, &net).with_hidden(3), 6).unwrap(),
        };
        let point: Vec<(Vec<usize>, Vec<f64>)> = model
            .params
            .iter()
            .map(|p| (p.shape.clone(), p.values.clone()))
            .collect();
        for trial in 0..100 {
            let input_len = match kind {
                ModelKind::AlexNet1D => 60,
                _ => 4,
            };
            let input: Vec<f64> = (0..input_len).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let spec = model.spec.clone();
            let err = grad_check(
                |tape, leaves| match kind {
                    ModelKind::DIRODENN => {
                        let params = DirodennParams::from_leaves(leaves);
                        let theta = tape.constant(&[4], input[..4].to_vec());
                        let omega = tape.constant(&[4], input[..4].to_vec());
                        let (dt, dw) = dirodenn_rhs(&params, tape, &theta, &omega);
                        dt.square().sum().add(&dw.square().sum())
                    }
                    ModelKind::HNN => {
                        let params = HnnParams::from_leaves(leaves);
                        let q = tape.constant(&[4], input[..4].to_vec());
                        let p = tape.constant(&[4], input[..4].to_vec());
                        let (dq, dp) = hnn_rhs(&params, tape, &q, &p);
                        dq.square().sum().add(&dp.square().sum())
                    }
                    ModelKind::PINN => {
                        let params = PinnParams::from_leaves(leaves);
                        let times = tape.constant(&[3, 1], vec![0.0, 0.5, 1.0]);
                        let xhat = pinn_eval(&params, &times);
                        let res = pinn_rhs(&params, &xhat);
                        xhat.square().sum().add(&res.square().sum())
                    }
                    _ => {
                        let shape = match kind {
                            ModelKind::AlexNet1D => vec![1, 1, 60],
                            _ => vec![1, input_len],
                        };
                        let x = tape.constant(&shape, input.clone());
                        let stub = Model {
                            spec: spec.clone(),
                            params: vec![],
                            seed: 0,
                        };
                        stub.forward(tape, leaves, &x).square().sum()
                    }
                },
                &point,
                // a tighter step keeps the central difference on one side of
                // the relu/maxpool kinks that full models inevitably contain
                1e-6,
            );
            assert!(err < 1e-5, "{kind} trial {trial}: grad error {err}");
            worst_model = worst_model.max(err);
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}, budget 30 s");
    println!(
        "criterion 2 PASS: grad checks, worst primitive {worst_primitive:.2e}, worst model {worst_model:.2e} ({elapsed:?})"
    );
}

#[test]
fn c03_integrator_convergence_orders() {
    let start = Instant::now();
    let slope = |method: Method| -> f64 {
        let deltas: [f64; 5] = [0.1, 0.05, 0.025, 0.0125, 0.00625];
        let points: Vec<(f64, f64)> = deltas
            .iter()
            .map(|&dt| {
                let steps = (1.0 / dt).round() as usize;
                let states = integrate_core(|x, out| out[0] = x[0], &[1.0], dt, steps, method)
                    .unwrap();
                let err = (states.last().unwrap()[0] - std::f64::consts::E).abs();
                (dt.ln(), err.ln())
            })
            .collect();
        // least-squares slope of ln(err) vs ln(dt)
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    };

    let euler = slope(Method::Euler);
    let rk4 = slope(Method::Rk4);
    assert!((euler - 1.0).abs() <= 0.1, "euler slope {euler}");
    assert!((rk4 - 4.0).abs() <= 0.2, "rk4 slope {rk4}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}, budget 5 s");
    println!("criterion 3 PASS: euler order {euler:.3}, rk4 order {rk4:.3} ({elapsed:?})");
}

#[test]
fn c04_physics_structure() {
    let start = Instant::now();

    // undamped lossless swing: energy conserved to 1e-6 relative over 10 s
    let net = two_node(0.3, (1.0, 2.0), 0.0, 1.0);
    let base = steady_state(&net, &GridState::flat(2)).unwrap();
    let mut x0 = base.clone();
    x0.theta[1] += 0.1;
    let traj = integrate(&net, &x0, 1e-3, 10_000, Method::Rk4).unwrap();
    let e0 = system_energy(&net, &traj.states[0]);
    let drift = traj
        .states
        .iter()
        .map(|s| (system_energy(&net, s) - e0).abs())
        .fold(0.0_f64, f64::max)
        / e0.abs();
    assert!(drift < 1e-6, "energy drift {drift}");

    // damped case: non-increasing within 1e-9 per step
    let damped = two_node(0.3, (1.0, 2.0), 0.7, 1.0);
    let base = steady_state(&damped, &GridState::flat(2)).unwrap();
    let mut x0 = base.clone();
    x0.theta[1] += 0.15;
    let traj = integrate(&damped, &x0, 1e-3, 10_000, Method::Rk4).unwrap();
    let mut prev = system_energy(&damped, &traj.states[0]);
    for state in &traj.states[1..] {
        let e = system_energy(&damped, state);
        assert!(e <= prev + 1e-9, "damped energy rose {prev} -> {e}");
        prev = e;
    }

    // HNN with no dissipation and no forcing conserves its Hamiltonian
    // along an rk4 flow of its own right-hand side
    let mut hnn = build(ModelSpec::new(ModelKind::HNN, Task::DsePath, 2, 2), 11).unwrap();
    {
        // zero out dissipation factor and source, keep quad + random MLP
        let mut values: Vec<Vec<f64>> = hnn.params.iter().map(|p| p.values.clone()).collect();
        values[4].iter_mut().for_each(|v| *v = 0.0);
        values[5].iter_mut().for_each(|v| *v = 0.0);
        hnn.set_params(values);
    }
    let eval_rhs = |z: &[f64]| -> Vec<f64> {
        let tape = Tape::new();
        let leaves = hnn.leaves(&tape);
        let params = HnnParams::from_leaves(&leaves);
        let q = tape.constant(&[2], z[..2].to_vec());
        let p = tape.constant(&[2], z[2..].to_vec());
        let (dq, dp) = hnn_rhs(&params, &tape, &q, &p);
        let mut out = dq.value();
        out.extend(dp.value());
        out
    };
    let hval = |z: &[f64]| -> f64 {
        let tape = Tape::new();
        let leaves = hnn.leaves(&tape);
        let params = HnnParams::from_leaves(&leaves);
        let zt = tape.constant(&[4], z.to_vec());
        hnn_hamiltonian(&params, &zt).scalar_value()
    };
    let states = integrate_core(
        |z, out| out.copy_from_slice(&eval_rhs(z)),
        &[0.4, -0.6, 0.2, 0.5],
        1e-3,
        1000,
        Method::Rk4,
    )
    .unwrap();
    let h0 = hval(&states[0]);
    let h_drift = states
        .iter()
        .map(|z| (hval(z) - h0).abs())
        .fold(0.0_f64, f64::max)
        / h0.abs();
    assert!(h_drift < 1e-6, "Hamiltonian drift {h_drift}");

    // swing-structured rhs equals the simulator exactly on a lossless grid
    // (perfect-square inertias keep the reparameterized copy bitwise)
    let nodes = vec![
        NodeParams { m: 0.25, d: 0.9, p: 0.4, v: 1.0 },
        NodeParams { m: 1.0, d: 1.2, p: -0.1, v: 1.01 },
        NodeParams { m: 0.0625, d: 1.0, p: -0.3, v: 0.99 },
    ];
    let lines = vec![
        Line { from: 0, to: 1, g: 0.0, b: 3.0 },
        Line { from: 1, to: 2, g: 0.0, b: 2.0 },
        Line { from: 0, to: 2, g: 0.0, b: 4.0 },
    ];
    let lossless = GridNetwork::new(nodes, lines).unwrap();
    let mut dir = build(ModelSpec::new(ModelKind::DIRODENN, Task::DsePath, 3, 3), 0).unwrap();
    dirodenn_params_from_grid(&mut dir, &lossless);
    let state = GridState {
        theta: vec![0.17, -0.26, 0.33],
        omega: vec![0.04, 0.0, -0.09],
        t: 0.0,
    };
    let (want_dt, want_dw) = swing_rhs(&lossless, &state);
    let tape = Tape::new();
    let leaves = dir.leaves(&tape);
    let params = DirodennParams::from_leaves(&leaves);
    let theta = tape.constant(&[3], state.theta.clone());
    let omega = tape.constant(&[3], state.omega.clone());
    let (dt, dw) = dirodenn_rhs(&params, &tape, &theta, &omega);
    assert_eq!(dt.value(), want_dt, "theta derivatives must match exactly");
    let got = dw.value();
    for a in 0..3 {
        assert_eq!(got[a], want_dw[a], "omega derivative at node {a}");
    }

    let elapsed = start.elapsed();
    println!(
        "criterion 4 PASS: energy drift {drift:.2e}, H drift {h_drift:.2e}, swing parity exact ({elapsed:?})"
    );
}

#[test]
fn c05_loss_identities() {
    let tape = Tape::new();
    let logits = tape.constant(&[1, 87], vec![0.0; 87]);
    let mut label = vec![0.0; 87];
    label[42] = 1.0;
    let y = tape.constant(&[1, 87], label);
    let ce = cross_entropy(&logits, &y).unwrap().scalar_value();
    let err = (ce - 87.0_f64.ln()).abs();
    assert!(err < 1e-9, "uniform CE off by {err}");

    assert_eq!(accuracy_db(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    assert_eq!(accuracy_db(&[11.0, 0.0], &[10.0, 0.0]).unwrap(), -20.0);

    println!("criterion 5 PASS: uniform CE = ln 87 ± {err:.1e}; 0 dB and -20 dB fixtures exact");
}

#[test]
fn c06_localization_sanity() {
    let start = Instant::now();

    // 8-node grid, full observability, one sample per line: LR must reach
    // 100% training accuracy within 1000 epochs
    let small = synthesize_grid(8, 2.2, 3).unwrap();
    let obs = ObservedSet::full(8);
    let (samples, rejected) = make_fault_dataset(&small, &obs, 0.01, 2000).unwrap();
    assert!(rejected.is_empty(), "8-node fixture rejected lines: {rejected:?}");
    let mut lr = build(ModelSpec::localize(ModelKind::LR, &small), 1).unwrap();
    let report = train_localizer(&mut lr, &samples, &TrainConfig::new(1000, 1e-2, 0.0)).unwrap();
    assert_eq!(
        report.final_metric, 1.0,
        "LR training accuracy on the 8-node grid: {}",
        report.final_metric
    );

    // 68-node fixture: every model kind beats 10x chance within 1000 epochs
    let net = GridNetwork::load(fixture_path()).unwrap();
    assert_eq!((net.node_count(), net.line_count()), (68, 87));
    let obs = ObservedSet::full(68);
    let (samples, rejected) = make_fault_dataset(&net, &obs, 0.01, 2000).unwrap();
    assert!(rejected.is_empty(), "bundled fixture rejected lines: {rejected:?}");
    assert_eq!(samples.len(), 87);

    let chance_bar = 10.0 / 87.0;
    let mut summary = Vec::new();
    for kind in ModelKind::STATIC {
        let lr = match kind {
            ModelKind::LR | ModelKind::AlexNet1D => 1e-2,
            ModelKind::FFNN | ModelKind::GCNN => 1e-2,
            _ => 5e-3,
        };
        let mut model = build(ModelSpec::localize(kind, &net), 2).unwrap();
        let report =
            train_localizer(&mut model, &samples, &TrainConfig::new(1000, lr, 0.0)).unwrap();
        summary.push(format!("{kind} {:.3}", report.final_metric));
        assert!(
            report.final_metric > chance_bar,
            "{kind} reached only {:.3}, bar {chance_bar:.3}",
            report.final_metric
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}, budget 10 min");
    println!(
        "criterion 6 PASS: 8-node LR at 1.000; 68-node top-1 [{}] vs bar {chance_bar:.3} ({elapsed:?})",
        summary.join(", ")
    );
}

#[test]
fn c07_dse_sanity() {
    let start = Instant::now();

    // strongly damped pair: phase dynamics relax monotonically, which a
    // first-order model can represent; the structured model contains the
    // generator outright
    let net = two_node(0.0, (0.04, 0.04), 1.2, 1.0);
    let obs = ObservedSet::full(2);
    let pert = PerturbationSpec {
        theta_mag: 0.08,
        omega_mag: 0.0,
        noise_std: 0.0,
    };
    let dataset = make_path_dataset(&net, &pert, &obs, 0.01, 100, 4, 9).unwrap();

    let mut linode = build(ModelSpec::dse_path(ModelKind::LinODE, &net, &obs), 3).unwrap();
    let lin_report = train_dse(
        &mut linode,
        &dataset,
        &TrainConfig::new(1000, 1e-2, 0.0),
    )
    .unwrap();
    assert!(
        lin_report.final_metric <= -25.0,
        "LinODE reached {} dB, needs -25",
        lin_report.final_metric
    );

    let mut dir = build(ModelSpec::dse_path(ModelKind::DIRODENN, &net, &obs), 3).unwrap();
    let dir_report = train_dse(&mut dir, &dataset, &TrainConfig::new(1000, 5e-3, 0.0)).unwrap();
    assert!(
        dir_report.final_metric <= -25.0,
        "DIRODENN reached {} dB, needs -25",
        dir_report.final_metric
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}, budget 5 min");
    println!(
        "criterion 7 PASS: LinODE {:.1} dB, DIRODENN {:.1} dB ({elapsed:?})",
        lin_report.final_metric, dir_report.final_metric
    );
}

/// Predictor score of a subset at its canonical gate (mass 1/s per node).
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
fn c08_placement_pipeline() {
    let start = Instant::now();
    let net = synthesize_grid(8, 2.2, 3).unwrap();
    let n = 8;
    let s = 2;
    let level = 2; // 2/8 observability sits nearest the 20% head

    // measure all C(8,2) = 28 placements with a real LR localizer on a
    // tight epoch budget so accuracies spread below saturation
    let catalog = build_fault_catalog(&net, 0.01, 2000).unwrap();
    assert!(catalog.rejected.is_empty());
    let mut subsets = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            subsets.push(vec![a, b]);
        }
    }
    let measure_config = TrainConfig::new(120, 5e-3, 0.0);
    let samples: Vec<PlacementSample> = subsets
        .iter()
        .map(|set| {
            let obs = ObservedSet::new(set.clone(), n).unwrap();
            let data = catalog_samples(&net, &catalog, &obs);
            let mut model = build(ModelSpec::localize(ModelKind::LR, &net), 5).unwrap();
            let report = train_localizer(&mut model, &data, &measure_config).unwrap();
            let mut placement = vec![0u8; n];
            for &i in set {
                placement[i] = 1;
            }
            let mut accuracy = vec![None; 6];
            accuracy[level] = Some(report.final_metric);
            PlacementSample {
                placement,
                accuracy,
                model: "LR".into(),
            }
        })
        .collect();
    assert_eq!(samples.len(), 28);

    // stage 1: fit the predictor below 1e-3 on all 28 measured placements
    let config = TrainConfig::new(4000, 0.05, 0.0).with_schedule(1500, 0.1);
    let (op, report) = train_predictor(&samples, net.normalized_adjacency(), &config, 7).unwrap();
    assert!(
        report.final_metric < 1e-3,
        "predictor mse {} above 1e-3",
        report.final_metric
    );

    // stage 2: the searched candidate must rank in the top 3 of the
    // brute-force ranking of the predictor itself
    let candidate = optimize_alpha(
        &op,
        s,
        level,
        &StageTwoConfig {
            steps: 500,
            lr: 0.05,
            restarts: 8,
            seed: 4,
        },
    )
    .unwrap();
    let (_, ranking) =
        brute_force_placement(|set| canonical_score(&op, set, s, level), n, s).unwrap();
    let rank = ranking
        .iter()
        .position(|(set, _)| *set == candidate.selected)
        .expect("candidate set must appear in the ranking")
        + 1;
    assert!(
        rank <= 3,
        "candidate {:?} ranked {rank} of {}",
        candidate.selected,
        ranking.len()
    );

    // transfer retraining leaves the first three layers bitwise frozen
    let (transferred, _) =
        transfer_retrain(&op, &samples, &TrainConfig::placement_transfer()).unwrap();
    for slot in 0..6 {
        assert_eq!(
            op.params[slot].values, transferred.params[slot].values,
            "frozen tensor {slot} changed"
        );
    }

    // gate properties, exhaustively for n <= 6
    for nn in 1..=6usize {
        let alphas: Vec<Vec<f64>> = vec![
            (0..nn).map(|i| i as f64 * 0.37 - 0.5).collect(),
            vec![0.25; nn],                                    // all ties
            (0..nn).map(|i| ((i * 7919) % 5) as f64 * 0.3).collect(),
        ];
        for alpha in &alphas {
            for s in 1..=nn {
                let gate = soft_top_s_gate(alpha, s).unwrap();
                assert_eq!(gate.iter().filter(|&&g| g > 0.0).count(), s);
                assert!(gate.iter().sum::<f64>() <= 1.0 + 1e-12);

                // selection invariant under constant shifts
                let shifted: Vec<f64> = alpha.iter().map(|a| a + 11.25).collect();
                assert_eq!(top_s_indices(alpha, s), top_s_indices(&shifted, s));

                // permutation equivariance over every permutation
                let mut perm: Vec<usize> = (0..nn).collect();
                loop {
                    let mut pa = vec![0.0; nn];
                    for i in 0..nn {
                        pa[perm[i]] = alpha[i];
                    }
                    let pg = soft_top_s_gate(&pa, s).unwrap();
                    // ties break by position, so compare value multisets
                    // always and exact positions only for distinct alphas
                    let mut want: Vec<f64> = gate.clone();
                    let mut got: Vec<f64> = pg.clone();
                    want.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    got.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    for (w, g) in want.iter().zip(&got) {
                        assert!((w - g).abs() < 1e-15);
                    }
                    // distinct alpha values: exact positional equivariance
                    let distinct = {
                        let mut sorted = alpha.clone();
                        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
                        sorted.windows(2).all(|w| w[0] != w[1])
                    };
                    if distinct {
                        for i in 0..nn {
                            assert_eq!(gate[i], pg[perm[i]]);
                        }
                    }
                    if !next_permutation(&mut perm) {
                        break;
                    }
                }
            }
        }
    }

    let elapsed = start.elapsed();
    println!(
        "criterion 8 PASS: predictor mse {:.2e}, candidate {:?} rank {rank}/28, frozen layers bitwise, gate suite exhaustive ({elapsed:?})",
        report.final_metric, candidate.selected
    );
}

fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

#[test]
fn c09_schedules_honored() {
    // stage-1 default: 1200 epochs at 0.08, divided by 10 every 300
    let net = synthesize_grid(6, 2.3, 5).unwrap();
    let samples: Vec<PlacementSample> = (0..4)
        .map(|i| {
            let mut placement = vec![0u8; 6];
            placement[i] = 1;
            placement[(i + 2) % 6] = 1;
            let mut accuracy = vec![None; 6];
            accuracy[1] = Some(0.3 + 0.1 * i as f64);
            PlacementSample {
                placement,
                accuracy,
                model: "LR".into(),
            }
        })
        .collect();
    let stage1 = TrainConfig::placement_stage1();
    let (op, report) = train_predictor(&samples, net.normalized_adjacency(), &stage1, 1).unwrap();
    assert_eq!(report.config.epochs, 1200);
    assert_eq!(report.config.lr, 0.08);
    let decay = report.config.schedule.expect("stage-1 schedule");
    assert_eq!((decay.every, decay.factor), (300, 0.1));
    assert_eq!(report.loss_curve.len(), 1200);

    // transfer default: 300 epochs at 0.01, divided by 10 every 100
    let transfer = TrainConfig::placement_transfer();
    let (_, report) = transfer_retrain(&op, &samples, &transfer).unwrap();
    assert_eq!(report.config.epochs, 300);
    assert_eq!(report.config.lr, 0.01);
    let decay = report.config.schedule.expect("transfer schedule");
    assert_eq!((decay.every, decay.factor), (100, 0.1));
    assert_eq!(report.loss_curve.len(), 300);

    // HNN dynamic-state-estimation default: 200 epochs
    let pair = two_node(0.0, (0.25, 0.25), 1.0, 1.0);
    let obs = ObservedSet::full(2);
    let pert = PerturbationSpec {
        theta_mag: 0.05,
        omega_mag: 0.0,
        noise_std: 0.0,
    };
    let paths = make_path_dataset(&pair, &pert, &obs, 0.02, 10, 2, 3).unwrap();
    let mut hnn = build(ModelSpec::dse_path(ModelKind::HNN, &pair, &obs), 2).unwrap();
    let config = TrainConfig::dse_default(ModelKind::HNN, 100);
    let report = train_dse(&mut hnn, &paths, &config).unwrap();
    assert_eq!(report.config.epochs, 200);
    assert_eq!(report.loss_curve.len(), 200);

    println!("criterion 9 PASS: stage-1 1200/0.08/÷10@300, transfer 300/0.01/÷10@100, HNN DSE 200 epochs, all echoed");
}

// Criterion 10 (CLI determinism) lives in the CLI crate's test suite, next
// to the binary it exercises.

#[test]
fn fixture_is_the_documented_synthesis() {
    // the bundled network file is the seed-1 output of the synthesizer at
    // the target density
    let net = GridNetwork::load(fixture_path()).unwrap();
    let regenerated = synthesize_grid(68, 2.56, 1).unwrap();
    assert_eq!(net, regenerated);
}

#[test]
fn localizer_models_degrade_gracefully_under_partial_observability() {
    // not a numbered criterion: a sanity sweep that partial observability
    // still produces usable datasets end to end
    let net = GridNetwork::load(fixture_path()).unwrap();
    let obs = ObservedSet::random(68, 13, 5).unwrap();
    let (samples, rejected) = make_fault_dataset(&net, &obs, 0.01, 2000).unwrap();
    assert!(rejected.is_empty());
    assert_eq!(samples.len(), 87);
    let mut model = build(ModelSpec::localize(ModelKind::LR, &net), 3).unwrap();
    let report = train_localizer(&mut model, &samples, &TrainConfig::new(300, 1e-2, 0.0)).unwrap();
    assert!(report.final_metric > 10.0 / 87.0);
}

#[test]
fn dse_eval_roundtrip_through_checkpoint() {
    // eval after checkpoint reload reproduces the metric bitwise
    let net = two_node(0.0, (0.25, 0.25), 1.0, 2.0);
    let obs = ObservedSet::full(2);
    let pert = PerturbationSpec {
        theta_mag: 0.05,
        omega_mag: 0.0,
        noise_std: 0.0,
    };
    let paths = make_path_dataset(&net, &pert, &obs, 0.02, 20, 3, 4).unwrap();
    let mut model = build(ModelSpec::dse_path(ModelKind::LinODE, &net, &obs), 5).unwrap();
    let _ = train_dse(&mut model, &paths, &TrainConfig::new(50, 1e-2, 0.0)).unwrap();
    let db = eval_dse(&model, &paths, 1.0).unwrap();
    let reloaded = Model::from_checkpoint_json(&model.to_checkpoint_json()).unwrap();
    assert_eq!(eval_dse(&reloaded, &paths, 1.0).unwrap(), db);

    let meshed = synthesize_grid(5, 2.4, 8).unwrap();
    let acc = localizer_accuracy(
        &build(ModelSpec::localize(ModelKind::LR, &meshed), 1).unwrap(),
        &make_fault_dataset(&meshed, &ObservedSet::full(5), 0.01, 2000)
            .unwrap()
            .0,
    )
    .unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
