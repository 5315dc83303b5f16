use nalgebra::{DMatrix, DVector};
use ndarray::array;

use super::ideal::PlantShooting;
use super::koopman::LatentShooting;
use super::*;
use crate::dynamics::{make_plant, PlantParams};
use crate::model::{DecoderKind, KoopmanModel, LatentDynamics, Mlp, ModelMeta, ModelSpec, Structure};
use crate::rng::{self, Stream};
use crate::sampling::DelayWindow;

/// `z+ = 0.5 z + u`, `x = y = z`, identity scaling.
fn half_model() -> KoopmanModel {
    let mut enc = Mlp::zeros(&[1, 1], false);
    enc.weights[0][[0, 0]] = 1.0;
    let mut dec = Mlp::zeros(&[1, 2], false);
    dec.weights[0] = array![[1.0, 1.0]];
    let dynamics = LatentDynamics::new(Structure::Diagonal, vec![0.5], array![[1.0]], 1.0).unwrap();
    let meta = ModelMeta { n_delays: 0, n_z: 1, n_x: 1, n_y: 1, n_u: 1, dt: 1.0, embed_inputs: false };
    KoopmanModel::from_parts(enc, dynamics, dec, DecoderKind::Linear, ScalingSpec::identity(1, 1, 1), meta).unwrap()
}

fn chi(values: Vec<f64>, n_delays: usize) -> DelayWindow {
    DelayWindow { values, n_delays }
}

fn track(channel: Channel, sp: f64, horizon: usize, bounds: Vec<(f64, f64)>) -> ControlProblem {
    ControlProblem {
        horizon,
        tracking: vec![Tracking { channel, weight: 1.0, setpoints: vec![sp] }],
        input_bounds: bounds,
        channel_bounds: vec![],
    }
}

fn tight() -> SolverConfig {
    SolverConfig { tolerance: 1e-12, max_iterations: 20_000, ..SolverConfig::default() }
}

#[test]
fn two_step_least_squares_example() {
    let m = half_model();
    let p = track(Channel::Output(0), 1.0, 2, vec![(-10.0, 10.0)]);
    let sol = koopman_lmpc(&m, &chi(vec![0.0], 0), &p, None, &tight()).unwrap();
    assert!((sol.inputs[0][0] - 1.0).abs() < 1e-9, "{:?}", sol.inputs);
    assert!((sol.inputs[1][0] - 0.5).abs() < 1e-9);
    assert!(sol.objective < 1e-18);
    assert_eq!(sol.status, SolveStatus::Converged);
}

#[test]
fn collapsed_bounds_fix_the_input() {
    let m = half_model();
    let p = track(Channel::Output(0), 1.0, 4, vec![(0.3, 0.3)]);
    let sol = koopman_nmpc(&m, &chi(vec![0.2], 0), &p, None, &SolverConfig::default()).unwrap();
    assert!(sol.inputs.iter().all(|u| u[0] == 0.3));
}

#[test]
fn active_upper_bound_satisfies_kkt_sign() {
    let m = half_model();
    let p = track(Channel::Output(0), 5.0, 3, vec![(-1.0, 0.2)]);
    let c = chi(vec![0.0], 0);
    let sol = koopman_nmpc(&m, &c, &p, None, &SolverConfig::default()).unwrap();
    let cost = |u: &[Vec<f64>]| -> f64 {
        m.rollout_raw_from_scaled(&c, u).unwrap().outputs.iter().map(|y| (y[0] - 5.0).powi(2)).sum()
    };
    let j0 = cost(&sol.inputs);
    for k in 0..3 {
        assert_eq!(sol.inputs[k][0], 0.2);
        // Stepping inside the box must not lower the cost.
        let mut u = sol.inputs.clone();
        u[k][0] -= 1e-6;
        assert!(cost(&u) >= j0);
    }
}

fn random_model(seed: u64, decoder: DecoderKind) -> KoopmanModel {
    let spec = ModelSpec {
        n_z: 3,
        encoder_hidden: vec![4],
        decoder_hidden: vec![5],
        decoder,
        structure: Structure::Dense,
        ..ModelSpec::default()
    };
    let meta = ModelMeta { n_delays: 1, n_z: 3, n_x: 1, n_y: 2, n_u: 2, dt: 1.0, embed_inputs: false };
    let mut m = KoopmanModel::new(&spec, meta, ScalingSpec::identity(2, 1, 2), seed).unwrap();
    let mut r = rng::stream(seed, Stream::Scenario);
    let mut p = m.params();
    for v in p.iter_mut() {
        if *v == 0.0 {
            *v = rng::uniform(&mut r, -0.2, 0.2);
        }
    }
    m.set_params(&p);
    m
}

fn random_chi(seed: u64) -> DelayWindow {
    let mut r = rng::stream(seed, Stream::TestProfile);
    chi((0..4).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect(), 1)
}

fn bounded_problem() -> ControlProblem {
    ControlProblem {
        horizon: 5,
        tracking: vec![
            Tracking { channel: Channel::Output(0), weight: 1.0, setpoints: vec![0.8, 0.9] },
            Tracking { channel: Channel::State(0), weight: 0.3, setpoints: vec![0.1] },
        ],
        input_bounds: vec![(-1.0, 1.0), (-0.5, 2.0)],
        channel_bounds: vec![ChannelBound { channel: Channel::Output(1), lower: -0.1, upper: 0.05 }],
    }
}

#[test]
fn latent_gradient_matches_central_differences() {
    for (seed, kind) in [(1, DecoderKind::Nonlinear), (2, DecoderKind::Linear)] {
        let m = random_model(seed, kind);
        let p = bounded_problem();
        let sh = LatentShooting::new(&m, &random_chi(seed), &p).unwrap();
        let mut r = rng::stream(seed, Stream::Excitation);
        let u: Vec<f64> = (0..10).map(|_| rng::uniform(&mut r, -0.5, 0.5)).collect();
        let rho = 30.0;
        let mut g = vec![0.0; 10];
        sh.evaluate(&u, rho, Some(&mut g)).unwrap();
        let f = |u: &[f64]| {
            let (c, v) = sh.evaluate(u, rho, None).unwrap();
            c + rho * v
        };
        for i in 0..10 {
            let mut up = u.clone();
            up[i] += 1e-6;
            let mut um = u.clone();
            um[i] -= 1e-6;
            let fd = (f(&up) - f(&um)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "{kind:?} u{i}: {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn prediction_is_rollout_of_returned_inputs() {
    let m = random_model(3, DecoderKind::Nonlinear);
    let c = random_chi(3);
    let sol = koopman_nmpc(&m, &c, &bounded_problem(), None, &SolverConfig::default()).unwrap();
    let r = m.rollout(&c, &sol.inputs).unwrap();
    assert_eq!(sol.predicted_states, r.states);
    assert_eq!(sol.predicted_outputs, r.outputs);
    for u in &sol.inputs {
        assert!((-1.0..=1.0).contains(&u[0]) && (-0.5..=2.0).contains(&u[1]));
    }
}

#[test]
fn penalty_drives_predicted_violation_down() {
    let m = random_model(4, DecoderKind::Nonlinear);
    let c = random_chi(4);
    let mut p = bounded_problem();
    let free = koopman_nmpc(&m, &c, &ControlProblem { channel_bounds: vec![], ..p.clone() }, None, &tight()).unwrap();
    let y1_max = free.predicted_outputs.iter().map(|y| y[1]).fold(f64::NEG_INFINITY, f64::max);
    // Tighten the bound below the unconstrained optimum so it binds.
    p.channel_bounds[0].upper = y1_max - 0.02;
    p.channel_bounds[0].lower = -10.0;
    let sol = koopman_nmpc(&m, &c, &p, None, &SolverConfig::default()).unwrap();
    assert!(sol.penalty_weight > SolverConfig::default().penalty_initial);
    assert!(sol.max_violation < 1e-4, "violation {}", sol.max_violation);
}

#[test]
fn warm_start_never_needs_more_iterations() {
    let m = random_model(5, DecoderKind::Nonlinear);
    let c = random_chi(5);
    let p = bounded_problem();
    let cfg = SolverConfig::default();
    let cold = koopman_nmpc(&m, &c, &p, None, &cfg).unwrap();
    let warm = koopman_nmpc(&m, &c, &p, Some(&cold.inputs), &cfg).unwrap();
    assert!(warm.iterations <= cold.iterations, "{} > {}", warm.iterations, cold.iterations);
}

#[test]
fn linear_mpc_rejects_nonlinear_decoder() {
    let m = random_model(1, DecoderKind::Nonlinear);
    let r = koopman_lmpc(&m, &random_chi(1), &bounded_problem(), None, &SolverConfig::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn invalid_problems_are_rejected() {
    let m = half_model();
    let c = chi(vec![0.0], 0);
    let cfg = SolverConfig::default();
    for p in [
        track(Channel::Output(0), 1.0, 0, vec![(0.0, 1.0)]),
        track(Channel::Output(0), 1.0, 2, vec![(1.0, 0.0)]),
        track(Channel::Output(3), 1.0, 2, vec![(0.0, 1.0)]),
        track(Channel::Output(0), 1.0, 2, vec![]),
    ] {
        assert!(matches!(koopman_nmpc(&m, &c, &p, None, &cfg), Err(Error::Config(_))));
    }
}

/// Unconstrained tracking with a linear decoder against the normal equations.
#[test]
fn unconstrained_linear_tracking_matches_least_squares() {
    for seed in 0..5 {
        let m = random_model(10 + seed, DecoderKind::Linear);
        let c = random_chi(seed);
        let h = 4;
        let mut p = bounded_problem();
        p.horizon = h;
        p.channel_bounds.clear();
        p.input_bounds = vec![(-1e3, 1e3); 2];
        p.tracking.push(Tracking { channel: Channel::Output(1), weight: 2.0, setpoints: vec![-0.3] });
        let sol = koopman_lmpc(&m, &c, &p, None, &tight()).unwrap();
        let general = koopman_nmpc(&m, &c, &p, None, &tight()).unwrap();

        // Predictions are affine in the inputs: columns of G from unit moves.
        let zero = vec![vec![0.0; 2]; h];
        let base = m.rollout(&c, &zero).unwrap();
        let rows = |r: &crate::model::Rollout| -> Vec<f64> {
            let mut v = Vec::new();
            for t in &p.tracking {
                for k in 0..h {
                    v.push(match t.channel {
                        Channel::State(i) => r.states[k][i],
                        Channel::Output(i) => r.outputs[k][i],
                    });
                }
            }
            v
        };
        let b0 = rows(&base);
        let mut g = DMatrix::zeros(b0.len(), 2 * h);
        for j in 0..2 * h {
            let mut u = zero.clone();
            u[j / 2][j % 2] = 1.0;
            let col = rows(&m.rollout(&c, &u).unwrap());
            for i in 0..b0.len() {
                g[(i, j)] = col[i] - b0[i];
            }
        }
        let mut w = DVector::zeros(b0.len());
        let mut target = DVector::zeros(b0.len());
        for (ti, t) in p.tracking.iter().enumerate() {
            for k in 0..h {
                w[ti * h + k] = t.weight.sqrt();
                target[ti * h + k] = t.setpoints[k.min(t.setpoints.len() - 1)] - b0[ti * h + k];
            }
        }
        let gw = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| w[i] * g[(i, j)]);
        let rw = target.component_mul(&w);
        let u_star = (gw.transpose() * &gw).lu().solve(&(gw.transpose() * rw)).unwrap();
        for j in 0..2 * h {
            let got = sol.inputs[j / 2][j % 2];
            assert!((got - u_star[j]).abs() < 1e-8, "seed {seed} u{j}: {got} vs {}", u_star[j]);
        }
        // Same problem through the general solver: equal objectives, even
        // where conditioning keeps its inputs further from the minimiser.
        assert!((general.objective - sol.objective).abs() < 1e-8, "seed {seed}: {} vs {}", general.objective, sol.objective);
    }
}

fn lag_predictor() -> PlantPredictor {
    PlantPredictor {
        plant: make_plant("linear", &PlantParams::new()).unwrap(),
        dt: 0.5,
        substeps: 10,
        scaling: ScalingSpec::identity(1, 1, 1),
    }
}

#[test]
fn plant_gradient_matches_central_differences() {
    let pred = PlantPredictor {
        plant: make_plant("cstr", &PlantParams::new()).unwrap(),
        dt: 0.005,
        substeps: 5,
        scaling: ScalingSpec::identity(1, 2, 1),
    };
    let x0 = crate::dynamics::steady_state(&pred.plant, &[20.0], &[3.0, 1.0]).unwrap();
    let p = ControlProblem {
        horizon: 4,
        tracking: vec![Tracking { channel: Channel::Output(0), weight: 1.0, setpoints: vec![1.2] }],
        input_bounds: vec![(5.0, 35.0)],
        channel_bounds: vec![ChannelBound { channel: Channel::State(0), lower: 0.0, upper: 2.5 }],
    };
    let sh = PlantShooting::new(&pred, &x0, &p);
    let u = [18.0, 25.0, 12.0, 30.0];
    let mut g = [0.0; 4];
    sh.evaluate(&u, 10.0, Some(&mut g)).unwrap();
    let f = |u: &[f64]| {
        let (c, v) = sh.evaluate(u, 10.0, None).unwrap();
        c + 10.0 * v
    };
    for i in 0..4 {
        let mut up = u.to_vec();
        up[i] += 1e-4;
        let mut um = u.to_vec();
        um[i] -= 1e-4;
        let fd = (f(&up) - f(&um)) / 2e-4;
        assert!((fd - g[i]).abs() < 1e-4 * fd.abs().max(1e-3), "u{i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn ideal_controller_reaches_reachable_setpoint() {
    let pred = lag_predictor();
    let p = track(Channel::Output(0), 0.6, 10, vec![(0.0, 1.0)]);
    let sol = ideal_nmpc(&pred, &[0.2], &p, None, &tight()).unwrap();
    let last = sol.predicted_outputs.last().unwrap()[0];
    assert!((last - 0.6).abs() < 1e-6, "{last}");
    // The first move saturates to close the gap fastest.
    assert_eq!(sol.inputs[0][0], 1.0);
    let (xs, ys) = pred.predict(&[0.2], &sol.inputs).unwrap();
    assert_eq!(xs, sol.predicted_states);
    assert_eq!(ys, sol.predicted_outputs);
}

#[test]
fn shifted_warm_start_repeats_last_move() {
    let m = half_model();
    let p = track(Channel::Output(0), 1.0, 3, vec![(-10.0, 10.0)]);
    let sol = koopman_nmpc(&m, &chi(vec![0.0], 0), &p, None, &tight()).unwrap();
    let s = sol.shifted();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0], sol.inputs[1]);
    assert_eq!(s[2], sol.inputs[2]);
}

#[test]
fn steady_setpoint_from_steady_warm_start_stays() {
    // z = 1 is held by u = 0.5.
    let m = half_model();
    let p = track(Channel::Output(0), 1.0, 5, vec![(-10.0, 10.0)]);
    let warm = vec![vec![0.5]; 5];
    let sol = koopman_nmpc(&m, &chi(vec![1.0], 0), &p, Some(&warm), &SolverConfig::default()).unwrap();
    assert!(sol.inputs.iter().all(|u| (u[0] - 0.5).abs() < 1e-12), "{:?}", sol.inputs);
    assert!(sol.objective < 1e-12);
    assert_eq!(sol.iterations, 0);
}

#[test]
fn ideal_controller_leaves_column_at_rest() {
    let plant = make_plant("column", &PlantParams::new()).unwrap();
    let base = crate::dynamics::COLUMN_BASE_INPUT.to_vec();
    let x0 = crate::dynamics::steady_state(&plant, &base, &crate::sampling::initial_guess(&plant)).unwrap();
    let y0 = plant.output_vec(&x0, &base);
    let pred = PlantPredictor { plant, dt: 2.0, substeps: 20, scaling: ScalingSpec::identity(2, 12, 3) };
    let p = ControlProblem {
        horizon: 10,
        tracking: vec![Tracking { channel: Channel::Output(0), weight: 1.0, setpoints: vec![y0[0]] }],
        input_bounds: crate::dynamics::COLUMN_INPUT_BOUNDS.to_vec(),
        channel_bounds: vec![],
    };
    let warm = vec![base.clone(); 10];
    let sol = ideal_nmpc(&pred, &x0, &p, Some(&warm), &SolverConfig::default()).unwrap();
    for u in &sol.inputs {
        assert!((u[0] - base[0]).abs() < 1e-9 && (u[1] - base[1]).abs() < 1e-9, "{u:?}");
    }
    assert!(sol.objective < 1e-12, "{}", sol.objective);
}
