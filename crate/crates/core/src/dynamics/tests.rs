use proptest::prelude::*;

use super::*;

#[derive(Debug)]
struct Zero;

impl InputAffine for Zero {
    fn name(&self) -> &str {
        "zero"
    }
    fn n_x(&self) -> usize {
        3
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    fn drift(&self, _x: &[f64], dx: &mut [f64]) {
        dx.fill(0.0);
    }
    fn input_field(&self, _i: usize, _x: &[f64], g: &mut [f64]) {
        g.fill(0.0);
    }
    fn output(&self, x: &[f64], _u: &[f64], y: &mut [f64]) {
        y[0] = x[0];
    }
}

#[derive(Debug)]
struct Oscillator;

impl InputAffine for Oscillator {
    fn name(&self) -> &str {
        "oscillator"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        0
    }
    fn n_y(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], dx: &mut [f64]) {
        dx[0] = x[1];
        dx[1] = -x[0];
    }
    fn input_field(&self, _i: usize, _x: &[f64], _g: &mut [f64]) {}
    fn output(&self, x: &[f64], _u: &[f64], y: &mut [f64]) {
        y[0] = x[0];
    }
}

#[derive(Debug)]
struct Blowup;

impl InputAffine for Blowup {
    fn name(&self) -> &str {
        "blowup"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        0
    }
    fn n_y(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], dx: &mut [f64]) {
        dx[0] = 0.0;
        dx[1] = 1.0 / (x[1] - x[1]);
    }
    fn input_field(&self, _i: usize, _x: &[f64], _g: &mut [f64]) {}
    fn output(&self, x: &[f64], _u: &[f64], y: &mut [f64]) {
        y[0] = x[0];
    }
}

fn lag() -> PlantModel {
    make_plant("linear", &PlantParams::new()).unwrap()
}

fn column() -> PlantModel {
    make_plant("column", &PlantParams::new()).unwrap()
}

#[test]
fn zero_dynamics_step_is_identity() {
    let p = PlantModel::new(Zero);
    let x = vec![0.3, -1.0, 7.0];
    assert_eq!(rk4_step(&p, &x, &[5.0], 0.37).unwrap(), x);
}

#[test]
fn rk4_matches_exponential_decay() {
    let x = rk4_step(&lag(), &[1.0], &[0.0], 0.1).unwrap();
    assert!((x[0] - (-0.1f64).exp()).abs() < 1e-6);
    assert!((x[0] - 0.904837).abs() < 1e-6);
}

#[test]
fn rk4_conserves_oscillator_energy() {
    let p = PlantModel::new(Oscillator);
    let mut ws = Rk4Workspace::new(2);
    let mut x = vec![1.0, 0.0];
    for _ in 0..1000 {
        ws.step(&*p, &mut x, &[], 0.01).unwrap();
    }
    assert!((x[0] * x[0] + x[1] * x[1] - 1.0).abs() < 1e-6);
}

#[test]
fn rk4_is_fourth_order() {
    let p = lag();
    let err = |h: f64| {
        let mut ws = Rk4Workspace::new(1);
        let mut x = vec![1.0];
        let n = (1.0 / h).round() as usize;
        for _ in 0..n {
            ws.step(&*p, &mut x, &[0.0], h).unwrap();
        }
        (x[0] - (-1.0f64).exp()).abs()
    };
    let ratio = err(0.1) / err(0.05);
    assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn non_finite_derivative_names_state() {
    let p = PlantModel::new(Blowup);
    match rk4_step(&p, &[0.0, 1.0], &[], 0.1) {
        Err(Error::IntegrationFailure { index }) => assert_eq!(index, 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn rk4_rejects_bad_step() {
    assert!(rk4_step(&lag(), &[1.0], &[0.0], 0.0).is_err());
}

#[test]
fn zero_dynamics_simulation_is_constant() {
    let p = PlantModel::new(Zero);
    let x0 = vec![1.0, 2.0, 3.0];
    let tr = simulate(&p, &x0, &InputProfile::constant(0.0, vec![4.0]), 0.5, 10.0, 4).unwrap();
    assert_eq!(tr.len(), 21);
    assert!(tr.states.iter().all(|x| *x == x0));
    assert!(tr.inputs.iter().all(|u| u == &[4.0]));
}

#[test]
fn van_der_pol_step_halving() {
    let p = make_plant("vdp", &[("mu".to_string(), 1.0)].into()).unwrap();
    let prof = InputProfile::constant(0.0, vec![0.0]);
    let a = simulate(&p, &[0.1, 0.0], &prof, 0.1, 10.0, 2).unwrap();
    let b = simulate(&p, &[0.1, 0.0], &prof, 0.1, 10.0, 4).unwrap();
    for (xa, xb) in a.states.iter().zip(&b.states) {
        for (va, vb) in xa.iter().zip(xb) {
            assert!((va - vb).abs() < 1e-5);
        }
    }
}

#[test]
fn steady_states_of_simple_plants() {
    let vdp = make_plant("vdp", &PlantParams::new()).unwrap();
    let x = steady_state(&vdp, &[0.0], &[0.3, -0.2]).unwrap();
    assert!(x[0].abs() < 1e-10 && x[1].abs() < 1e-10);
    let x = steady_state(&lag(), &[2.0], &[0.0]).unwrap();
    assert!((x[0] - 2.0).abs() < 1e-10);
}

#[test]
fn steady_state_rejects_non_finite_guess() {
    assert!(matches!(steady_state(&lag(), &[1.0], &[f64::NAN]), Err(Error::SteadyStateFailure(_))));
}

#[test]
fn column_steady_state_balances() {
    let p = column();
    let u = COLUMN_BASE_INPUT;
    let x = steady_state(&p, &u, &vec![0.5; 12]).unwrap();
    let r = p.rhs_vec(&x, &u);
    assert!(r.iter().all(|v| v.abs() < 1e-10));
    let y = p.output_vec(&x, &u);
    let (d, b, f) = (y[0], y[1], u[1]);
    assert!((d + b - f).abs() < 1e-9);
    // light component: what enters with the feed leaves in distillate and bottoms
    let light_out = d * x[11] + b * x[0];
    assert!((light_out - f * 0.5).abs() < 1e-9, "{light_out}");
}

#[test]
fn column_rests_at_its_steady_state() {
    let p = column();
    let u = COLUMN_BASE_INPUT.to_vec();
    let xs = steady_state(&p, &u, &vec![0.5; 12]).unwrap();
    let tr = simulate(&p, &xs, &InputProfile::constant(0.0, u.clone()), 2.0, 120.0, 20).unwrap();
    let last = tr.states.last().unwrap();
    let rate = p.rhs_vec(last, &u);
    assert!(rate.iter().all(|v| v.abs() < 1e-6));
    for x in tr.states.iter().take(11) {
        for (a, b) in x.iter().zip(&xs) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn column_fused_rhs_is_input_affine() {
    let p = column();
    let x: Vec<f64> = (0..12).map(|i| 0.2 + 0.05 * i as f64).collect();
    let u = [0.83, 1.07];
    let fused = p.rhs_vec(&x, &u);
    let mut split = vec![0.0; 12];
    p.drift(&x, &mut split);
    let mut g = vec![0.0; 12];
    for (i, ui) in u.iter().enumerate() {
        p.input_field(i, &x, &mut g);
        for (s, gi) in split.iter_mut().zip(&g) {
            *s += gi * ui;
        }
    }
    for (a, b) in fused.iter().zip(&split) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn registry_dimensions() {
    let vdp = make_plant("vdp", &[("mu".to_string(), 1.0)].into()).unwrap();
    assert_eq!((vdp.n_x(), vdp.n_u(), vdp.n_y()), (2, 1, 1));
    let col = column();
    assert_eq!((col.n_x(), col.n_u(), col.n_y()), (12, 2, 3));
    let big = make_plant("column", &[("trays".to_string(), 20.0)].into()).unwrap();
    assert_eq!(big.n_x(), 22);
    assert!(matches!(make_plant("tank", &PlantParams::new()), Err(Error::Config(_))));
    assert!(matches!(make_plant("vdp", &[("nu".to_string(), 1.0)].into()), Err(Error::Config(_))));
    assert!(make_plant("column", &[("trays".to_string(), 2.5)].into()).is_err());
}

#[test]
fn split_profile_matches_one_shot() {
    let p = column();
    let xs = steady_state(&p, &COLUMN_BASE_INPUT, &vec![0.5; 12]).unwrap();
    let levels = vec![vec![0.75, 1.1], vec![0.88, 0.9], vec![0.71, 1.2], vec![0.8, 1.0]];
    let full = InputProfile::steps(0.0, 20.0, levels.clone()).unwrap();
    let whole = simulate(&p, &xs, &full, 2.0, 80.0, 20).unwrap();

    let first = InputProfile::steps(0.0, 20.0, levels[..2].to_vec()).unwrap();
    let a = simulate(&p, &xs, &first, 2.0, 40.0, 20).unwrap();
    let second = InputProfile::steps(40.0, 20.0, levels[2..].to_vec()).unwrap();
    let j = a.len() - 1;
    let b = simulate_from(&p, &a.states[j], &a.inputs[j - 1], &second, 40.0, 2.0, 80.0, SimOptions::default()).unwrap();
    assert_eq!(a.states[..j], whole.states[..j]);
    assert_eq!(b.states[..], whole.states[j..]);
    assert_eq!(b.outputs[..], whole.outputs[j..]);
    assert_eq!(a.outputs[..j], whole.outputs[..j]);
}

#[test]
fn divergence_is_reported_with_time() {
    let p = make_plant("linear", &PlantParams::new()).unwrap();
    // the lag has no bounds; the column does
    assert!(simulate(&p, &[1e6], &InputProfile::constant(0.0, vec![0.0]), 1.0, 2.0, 1).is_ok());
    let c = column();
    let x0 = vec![1.2; 12];
    match simulate(&c, &x0, &InputProfile::constant(0.0, vec![0.8, 1.0]), 2.0, 10.0, 20) {
        Err(Error::SimulationDiverged { time, .. }) => assert_eq!(time, 0.0),
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn column_fractions_stay_in_unit_interval(
        levels in prop::collection::vec((0.7f64..=0.9, 0.8f64..=1.2), 1..6),
        x0 in prop::collection::vec(0.0f64..=1.0, 12),
    ) {
        let p = column();
        let levels: Vec<Vec<f64>> = levels.into_iter().map(|(a, b)| vec![a, b]).collect();
        let n = levels.len() as f64;
        let prof = InputProfile::steps(0.0, 30.0, levels).unwrap();
        let tr = simulate(&p, &x0, &prof, 2.0, 30.0 * n, 20).unwrap();
        for x in &tr.states {
            for v in x {
                prop_assert!((0.0..=1.0).contains(v), "{v}");
            }
        }
    }
}
