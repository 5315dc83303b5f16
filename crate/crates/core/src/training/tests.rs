use ndarray::{array, Array2};

use super::*;
use crate::dynamics::{make_plant, PlantParams};
use crate::model::{DecoderKind, LatentDynamics, Mlp, Structure};
use crate::sampling::{generate_dataset, SamplingConfig, ScalingSpec};

fn tiny_model(structure: Structure, decoder: DecoderKind, seed: u64) -> KoopmanModel {
    let spec = ModelSpec {
        n_z: 2,
        encoder_hidden: vec![3],
        decoder_hidden: vec![3],
        decoder,
        structure,
        ..ModelSpec::default()
    };
    let meta = ModelMeta { n_delays: 1, n_z: 2, n_x: 2, n_y: 1, n_u: 1, dt: 1.0, embed_inputs: false };
    let mut m = KoopmanModel::new(&spec, meta, ScalingSpec::identity(1, 2, 1), seed).unwrap();
    // Non-zero biases so their gradients are exercised.
    let mut p = m.params();
    for (i, v) in p.iter_mut().enumerate() {
        if *v == 0.0 {
            *v = 0.05 * ((i % 7) as f64 - 3.0);
        }
    }
    m.set_params(&p);
    m
}

fn random_window(s: usize, seed: u64) -> ScaledWindow {
    let mut r = rng::stream(seed, Stream::Scenario);
    let mut g = |rows: usize, cols: usize| Array2::from_shape_simple_fn((rows, cols), || rng::uniform(&mut r, 0.0, 1.0));
    ScaledWindow { chi: g(s, 2), inputs: g(s - 1, 1), targets: g(s, 3) }
}

/// Independent evaluation of the two loss sums, one sample at a time.
fn brute_force_loss(m: &KoopmanModel, w: &ScaledWindow) -> (f64, f64) {
    let s = w.len();
    let n_out = w.targets.ncols();
    let chi = |k: usize| crate::sampling::DelayWindow { values: w.chi.row(k).to_vec(), n_delays: 1 };
    let mse = |k: usize, z: &[f64]| {
        let (x, y) = m.decode(z).unwrap();
        let pred = [x, y].concat();
        (0..n_out).map(|j| (pred[j] - w.targets[[k, j]]).powi(2)).sum::<f64>() / n_out as f64
    };
    let mut l1 = 0.0;
    for k in 0..s - 1 {
        let z = m.latent_step(&m.encode(&chi(k)).unwrap(), &[w.inputs[[k, 0]]]).unwrap();
        l1 += mse(k + 1, &z);
    }
    let mut l2 = 0.0;
    let mut z = m.encode(&chi(0)).unwrap();
    for k in 0..s - 1 {
        z = m.latent_step(&z, &[w.inputs[[k, 0]]]).unwrap();
        l2 += mse(k + 1, &z);
    }
    (l1 / (s - 1) as f64, l2 / (s - 1) as f64)
}

#[test]
fn loss_matches_brute_force_sums() {
    for structure in [Structure::Diagonal, Structure::BlockDiagonal, Structure::Dense] {
        let m = tiny_model(structure, DecoderKind::Nonlinear, 3);
        let w = random_window(4, 11);
        let parts = loss(&m, &w, 1.0).unwrap();
        let (l1, l2) = brute_force_loss(&m, &w);
        assert!((parts.one_step - l1).abs() < 1e-12);
        assert!((parts.multi_step - l2).abs() < 1e-12);
        assert!((parts.total - (l1 + l2)).abs() < 1e-12);
    }
}

#[test]
fn two_sample_window_terms_coincide() {
    let m = tiny_model(Structure::Diagonal, DecoderKind::Nonlinear, 1);
    let p = loss(&m, &random_window(2, 5), 1.0).unwrap();
    assert_eq!(p.one_step, p.multi_step);
}

/// Exact model of `x+ = a x + (1 - a) u`, `y = x`, identity scaling.
fn exact_scalar(a: f64) -> KoopmanModel {
    let mut enc = Mlp::zeros(&[1, 1], false);
    enc.weights[0][[0, 0]] = 1.0;
    let mut dec = Mlp::zeros(&[1, 2], false);
    dec.weights[0] = array![[1.0, 1.0]];
    let dynamics = LatentDynamics::new(Structure::Diagonal, vec![a], array![[1.0 - a]], 1.0).unwrap();
    let meta = ModelMeta { n_delays: 0, n_z: 1, n_x: 1, n_y: 1, n_u: 1, dt: 1.0, embed_inputs: false };
    KoopmanModel::from_parts(enc, dynamics, dec, DecoderKind::Linear, ScalingSpec::identity(1, 1, 1), meta).unwrap()
}

fn scalar_window(a: f64, inputs: &[f64], x0: f64) -> ScaledWindow {
    let s = inputs.len() + 1;
    let mut xs = vec![x0];
    for u in inputs {
        let x = *xs.last().unwrap();
        xs.push(a * x + (1.0 - a) * u);
    }
    ScaledWindow {
        chi: Array2::from_shape_fn((s, 1), |(k, _)| xs[k]),
        inputs: Array2::from_shape_fn((s - 1, 1), |(k, _)| inputs[k]),
        targets: Array2::from_shape_fn((s, 2), |(k, _)| xs[k]),
    }
}

#[test]
fn exact_model_has_zero_loss_and_gradient() {
    let a = 0.8;
    let m = exact_scalar(a);
    let w = scalar_window(a, &[0.2, 0.9, 0.4, 0.4, 0.1], 0.5);
    let (parts, grad) = loss_and_gradient(&m, &[&w], 1.0).unwrap();
    assert!(parts.total < 1e-16);
    assert!(grad.flat().iter().all(|g| g.abs() < 1e-12));
}

fn group_errors(m: &KoopmanModel, analytic: &[f64], fd: &[f64]) -> Vec<(&'static str, f64)> {
    m.param_groups()
        .into_iter()
        .map(|(name, r)| {
            let diff: f64 = r.clone().map(|i| (analytic[i] - fd[i]).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = r.map(|i| fd[i].powi(2)).sum::<f64>().sqrt();
            (name, diff / norm.max(1e-12))
        })
        .collect()
}

#[test]
fn gradient_matches_central_differences() {
    for (seed, structure, decoder) in [
        (1, Structure::Diagonal, DecoderKind::Nonlinear),
        (2, Structure::BlockDiagonal, DecoderKind::Nonlinear),
        (3, Structure::Dense, DecoderKind::Nonlinear),
        (4, Structure::Diagonal, DecoderKind::Linear),
    ] {
        let m = tiny_model(structure, decoder, seed);
        let w = random_window(3, seed + 100);
        let (_, g) = loss_and_gradient(&m, &[&w], 1.0).unwrap();
        let g = g.flat();
        let fd = finite_difference_gradient(&m, &[&w], 1.0, 1e-5).unwrap();
        for (name, err) in group_errors(&m, &g, &fd) {
            assert!(err < 1e-5, "{structure:?}/{decoder:?} group {name}: relative error {err:e}");
        }
    }
}

#[test]
fn gradient_is_linear_in_term_weight() {
    let m = tiny_model(Structure::Diagonal, DecoderKind::Nonlinear, 8);
    let w = random_window(5, 8);
    let g = |wt: f64| loss_and_gradient(&m, &[&w], wt).unwrap().1.flat();
    let (g0, g1, g3) = (g(0.0), g(1.0), g(3.0));
    for i in 0..g0.len() {
        assert!((g3[i] - g1[i] - 2.0 * (g1[i] - g0[i])).abs() < 1e-12);
    }
}

#[test]
fn batch_gradient_is_mean_and_order_independent() {
    let m = tiny_model(Structure::Dense, DecoderKind::Nonlinear, 5);
    let ws: Vec<ScaledWindow> = (0..3).map(|i| random_window(4, 20 + i)).collect();
    let (_, g) = loss_and_gradient(&m, &[&ws[0], &ws[1], &ws[2]], 1.0).unwrap();
    let (_, h) = loss_and_gradient(&m, &[&ws[2], &ws[0], &ws[1]], 1.0).unwrap();
    let singles: Vec<Vec<f64>> = ws.iter().map(|w| loss_and_gradient(&m, &[w], 1.0).unwrap().1.flat()).collect();
    for (i, (a, b)) in g.flat().iter().zip(h.flat()).enumerate() {
        assert!((a - b).abs() < 1e-14);
        let mean = (singles[0][i] + singles[1][i] + singles[2][i]) / 3.0;
        assert!((a - mean).abs() < 1e-14);
    }
}

fn linear_dataset() -> Dataset {
    let plant = make_plant("linear", &PlantParams::new()).unwrap();
    let cfg = SamplingConfig {
        dt: 0.2,
        n_steps: 12,
        step_duration: 2.0,
        n_delays: 1,
        window: 6,
        stride: 4,
        ..SamplingConfig::default()
    };
    generate_dataset(&plant, &PlantParams::new(), &cfg, 2).unwrap()
}

#[test]
fn zero_epochs_rejected() {
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let ds = linear_dataset();
    assert!(train(&ds, &ModelSpec::default(), &cfg, 1).is_err());
}

#[test]
fn training_is_deterministic_and_keeps_best() {
    let ds = linear_dataset();
    let spec = ModelSpec { n_z: 2, encoder_hidden: vec![4], decoder_hidden: vec![4], ..ModelSpec::default() };
    let cfg = TrainConfig { epochs: 15, validation_every: 2, log_every: 0, ..TrainConfig::default() };
    let (m1, r1) = train(&ds, &spec, &cfg, 4).unwrap();
    let (m2, r2) = train(&ds, &spec, &cfg, 4).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(TrainReport { wall_time_s: 0.0, ..r1.clone() }, TrainReport { wall_time_s: 0.0, ..r2 });
    assert_eq!(r1.train_loss.len(), 15);
    let vals: Vec<(usize, f64)> =
        r1.val_loss.iter().enumerate().filter_map(|(e, v)| v.map(|v| (e + 1, v))).collect();
    assert_eq!(vals.iter().map(|v| v.0).collect::<Vec<_>>(), vec![2, 4, 6, 8, 10, 12, 14, 15]);
    let min = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    assert_eq!(r1.best_val_loss, min);
    let val_set = ds.scaled_validation();
    let recomputed = mean_loss(&m1, &val_set, 1.0, 32).unwrap();
    assert!((recomputed - r1.best_val_loss).abs() <= 1e-12 * r1.best_val_loss);
    for i in 0..15 {
        let (a, b, t) = (r1.train_one_step[i], r1.train_multi_step[i], r1.train_loss[i]);
        assert!(a >= 0.0 && b >= 0.0 && (a + b - t).abs() <= 1e-12 * t.max(1.0));
    }
    let mut csv = Vec::new();
    r1.write_losses_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 16);
}

#[test]
fn divergence_returns_best_snapshot() {
    let ds = linear_dataset();
    let spec = ModelSpec { n_z: 2, encoder_hidden: vec![3], decoder_hidden: vec![3], ..ModelSpec::default() };
    let cfg = TrainConfig { epochs: 40, learning_rate: 1e12, log_every: 0, ..TrainConfig::default() };
    match train(&ds, &spec, &cfg, 1) {
        Err(Error::TrainingDiverged { best, .. }) => {
            if let Some(b) = best {
                assert!(b.1.best_val_loss.is_finite());
            }
        }
        Ok((_, r)) => assert!(r.best_val_loss.is_finite()),
        Err(e) => panic!("unexpected {e}"),
    }
}
