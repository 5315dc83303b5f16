use ndarray::array;
use rand::Rng;

use super::*;
use crate::dynamics::{make_plant, simulate, InputProfile, PlantParams};
use crate::rng::Stream;

fn meta(n_delays: usize, n_z: usize, n_x: usize, n_y: usize, n_u: usize) -> ModelMeta {
    ModelMeta { n_delays, n_z, n_x, n_y, n_u, dt: 1.0, embed_inputs: false }
}

fn tiny(structure: Structure, decoder: DecoderKind) -> KoopmanModel {
    let spec = ModelSpec {
        n_z: 3,
        encoder_hidden: vec![4],
        decoder_hidden: vec![5],
        decoder,
        structure,
        ..ModelSpec::default()
    };
    KoopmanModel::new(&spec, meta(2, 3, 2, 1, 1), ScalingSpec::identity(1, 2, 1), 9).unwrap()
}

fn chi(values: Vec<f64>) -> DelayWindow {
    DelayWindow { values, n_delays: 2 }
}

/// Exact model of `dx/dt = -x + u`, `y = x`: encoder and decoder are
/// identities, `a = exp(-dt)`, `b = 1 - exp(-dt)`.
fn exact_lag_model(dt: f64) -> KoopmanModel {
    let mut enc = Mlp::zeros(&[1, 1], false);
    enc.weights[0][[0, 0]] = 1.0;
    let mut dec = Mlp::zeros(&[1, 2], false);
    dec.weights[0] = array![[1.0, 1.0]];
    let a = (-dt).exp();
    let dynamics = LatentDynamics::new(Structure::Diagonal, vec![a], array![[1.0 - a]], dt).unwrap();
    let meta = ModelMeta { dt, ..meta(0, 1, 1, 1, 1) };
    KoopmanModel::from_parts(enc, dynamics, dec, DecoderKind::Linear, ScalingSpec::identity(1, 1, 1), meta).unwrap()
}

#[test]
fn zero_weight_encoder_returns_bias() {
    let mut m = tiny(Structure::Diagonal, DecoderKind::Nonlinear);
    let n = m.encoder.n_layers();
    for w in &mut m.encoder.weights {
        w.fill(0.0);
    }
    m.encoder.biases[n - 1] = array![0.1, 0.2, 0.3];
    assert_eq!(m.encode(&chi(vec![1.0, -4.0, 9.0])).unwrap(), vec![0.1, 0.2, 0.3]);
    let c = chi(vec![0.2, 0.3, 0.4]);
    assert_eq!(m.encode(&c).unwrap(), m.encode(&c).unwrap());
    assert!(matches!(m.encode(&chi(vec![0.0])), Err(Error::Shape(_))));
}

#[test]
fn diagonal_matches_dense_over_random_steps() {
    let m = tiny(Structure::Diagonal, DecoderKind::Nonlinear);
    let dense = m.dynamics.to_dense();
    let mut r = rng::stream(3, Stream::Scenario);
    let mut z1 = vec![0.3, -0.2, 0.9];
    let mut z2 = z1.clone();
    for _ in 0..100 {
        let u = [r.random::<f64>() * 2.0 - 1.0];
        z1 = m.dynamics.step(&z1, &u).unwrap();
        z2 = dense.step(&z2, &u).unwrap();
    }
    for (a, b) in z1.iter().zip(&z2) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn single_step_rollout_is_composition() {
    let m = tiny(Structure::Diagonal, DecoderKind::Nonlinear);
    let c = chi(vec![0.1, 0.5, 0.9]);
    let r = m.rollout(&c, &[vec![0.4]]).unwrap();
    let z1 = m.latent_step(&m.encode(&c).unwrap(), &[0.4]).unwrap();
    let (x, y) = m.decode(&z1).unwrap();
    assert_eq!(r.latent[1], z1);
    for (a, b) in r.states[0].iter().chain(&r.outputs[0]).zip(x.iter().chain(&y)) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn stable_free_response_contracts() {
    let m = tiny(Structure::Diagonal, DecoderKind::Nonlinear);
    let r = m.rollout(&chi(vec![0.9, 0.1, 0.5]), &vec![vec![0.0]; 30]).unwrap();
    let norms: Vec<f64> = r.latent.iter().map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn rollout_continues_by_hand() {
    let m = tiny(Structure::BlockDiagonal, DecoderKind::Nonlinear);
    let inputs: Vec<Vec<f64>> = (0..12).map(|k| vec![(k as f64 * 0.7).sin()]).collect();
    let c = chi(vec![0.2, 0.4, 0.6]);
    let full = m.rollout(&c, &inputs).unwrap();
    let part = m.rollout(&c, &inputs[..5]).unwrap();
    let mut z = part.latent[5].clone();
    for (k, u) in inputs[5..].iter().enumerate() {
        z = m.latent_step(&z, u).unwrap();
        assert_eq!(z, full.latent[6 + k]);
    }
}

#[test]
fn exact_model_reproduces_linear_plant() {
    let dt = 0.5;
    let m = exact_lag_model(dt);
    let plant = make_plant("linear", &PlantParams::new()).unwrap();
    let levels: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64 * 1.3).cos()]).collect();
    let profile = InputProfile::steps(0.0, dt, levels.clone()).unwrap();
    let traj = simulate(&plant, &[0.0], &profile, dt, 9.0 * dt, 200).unwrap();
    let r = m.rollout(&DelayWindow { values: vec![0.0], n_delays: 0 }, &levels[..9]).unwrap();
    for k in 0..9 {
        assert!((r.states[k][0] - traj.states[k + 1][0]).abs() < 1e-10);
        assert!((r.outputs[k][0] - traj.states[k + 1][0]).abs() < 1e-10);
    }
}

#[test]
fn linear_decoder_blocks() {
    let mut m = tiny(Structure::Diagonal, DecoderKind::Linear);
    m.decoder.bias = false;
    m.decoder.biases[0].fill(0.0);
    m.decoder.weights[0].fill(0.0);
    assert_eq!(m.decode(&[1.0, 2.0, 3.0]).unwrap(), (vec![0.0, 0.0], vec![0.0]));
    // C = [I; H] restricted to the first two latent coordinates.
    m.decoder.weights[0] = array![[1.0, 0.0, 2.0], [0.0, 1.0, -1.0], [0.0, 0.0, 0.0]];
    let (x, y) = m.decode(&[0.5, 0.25, 7.0]).unwrap();
    assert_eq!(x, vec![0.5, 0.25]);
    assert_eq!(y, vec![0.75]);
}

#[test]
fn linear_decoder_superposition() {
    let mut m = tiny(Structure::Diagonal, DecoderKind::Linear);
    m.decoder.bias = false;
    m.decoder.biases[0].fill(0.0);
    let z1 = [0.25, -0.5, 1.0];
    let z2 = [0.5, 0.125, -2.0];
    let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
    let d = |z: &[f64]| {
        let (x, y) = m.decode(z).unwrap();
        [x, y].concat()
    };
    let lhs = d(&sum);
    let rhs: Vec<f64> = d(&z1).iter().zip(d(&z2)).map(|(a, b)| a + b).collect();
    for (a, b) in lhs.iter().zip(&rhs) {
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }
    // With an offset the map is affine: d(z1 + z2) + d(0) = d(z1) + d(z2).
    let mut affine = tiny(Structure::Diagonal, DecoderKind::Linear);
    affine.decoder.biases[0] = array![0.3, -0.1, 0.7];
    let d = |z: &[f64]| {
        let (x, y) = affine.decode(z).unwrap();
        [x, y].concat()
    };
    let lhs: Vec<f64> = d(&sum).iter().zip(d(&[0.0; 3])).map(|(a, b)| a + b).collect();
    let rhs: Vec<f64> = d(&z1).iter().zip(d(&z2)).map(|(a, b)| a + b).collect();
    for (a, b) in lhs.iter().zip(&rhs) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn linear_decoder_parameter_count() {
    let m = tiny(Structure::Diagonal, DecoderKind::Linear);
    assert_eq!(m.decoder.n_params(), 3 * 3 + 3);
    let spec = ModelSpec { n_z: 3, linear_decoder_bias: false, decoder: DecoderKind::Linear, ..ModelSpec::default() };
    let m = KoopmanModel::new(&spec, meta(2, 3, 2, 1, 1), ScalingSpec::identity(1, 2, 1), 1).unwrap();
    assert_eq!(m.decoder.n_params(), 3 * 3);
}

#[test]
fn initial_poles_span_the_range() {
    let p = initial_poles(10, (0.85, 0.999));
    assert!((p[0] - 0.999).abs() < 1e-12 && (p[9] - 0.85).abs() < 1e-12);
    assert!(p.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn params_round_trip() {
    let m = tiny(Structure::Dense, DecoderKind::Nonlinear);
    let p = m.params();
    assert_eq!(p.len(), m.n_params());
    assert_eq!(m.param_groups()[3].1.end, p.len());
    let mut n = tiny(Structure::Dense, DecoderKind::Nonlinear);
    n.set_params(&vec![0.0; p.len()]);
    n.set_params(&p);
    assert_eq!(n, m);
}

#[test]
fn discretization_round_trip_random_diagonal() {
    let mut r = rng::stream(17, Stream::Scenario);
    for _ in 0..100 {
        let n = 1 + (r.random::<u64>() % 6) as usize;
        let a: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, 0.05, 1.0)).collect();
        let b = Array2::from_shape_simple_fn((n, 2), || rng::uniform(&mut r, -3.0, 3.0));
        let dt = rng::uniform(&mut r, 0.1, 5.0);
        let d = LatentDynamics::new(Structure::Diagonal, a, b, dt).unwrap();
        let back = d.to_continuous().unwrap().to_discrete();
        for (x, y) in back.a.iter().chain(back.b.iter()).zip(d.a.iter().chain(d.b.iter())) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = tiny(Structure::BlockDiagonal, DecoderKind::Nonlinear);
    m.provenance.best_validation_loss = Some(1.0 / 3.0);
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back, m);
    let c = chi(vec![0.11, 0.22, 0.33]);
    assert_eq!(back.rollout(&c, &vec![vec![0.5]; 4]).unwrap(), m.rollout(&c, &vec![vec![0.5]; 4]).unwrap());
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let m = tiny(Structure::Diagonal, DecoderKind::Linear);
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    buf.truncate(buf.len() / 2);
    assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::CheckpointFormat(_))));
    let wrong = br#"{"schema_version": 99}"#;
    assert!(matches!(read_checkpoint(&wrong[..]), Err(Error::CheckpointFormat(_))));
}

#[test]
fn structure_mismatch_is_explicit() {
    let m = tiny(Structure::Diagonal, DecoderKind::Nonlinear);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    assert!(load_checkpoint_as(&path, Structure::Diagonal).is_ok());
    match load_checkpoint_as(&path, Structure::Dense) {
        Err(Error::StructureMismatch { found, requested }) => {
            assert_eq!((found.as_str(), requested.as_str()), ("diagonal", "dense"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn raw_rollout_applies_scaling() {
    let mut m = exact_lag_model(0.5);
    m.scaling.inputs[0].max = 2.0;
    m.scaling.states[0].max = 2.0;
    m.scaling.outputs[0].max = 2.0;
    let raw = m.rollout_raw(&DelayWindow { values: vec![1.0], n_delays: 0 }, &[vec![1.0]]).unwrap();
    assert!((raw.outputs[0][0] - 1.0).abs() < 1e-15);
}
