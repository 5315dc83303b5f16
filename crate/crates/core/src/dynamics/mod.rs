//! Input-affine plants `dx/dt = f(x) + sum_i g_i(x) u_i`, fixed-step RK4
//! integration and steady-state search.
//!
//! Outputs are sampled with the input that was held over the interval ending
//! at the sample (left limit of the zero-order-hold signal). For plants whose
//! measurements are state-only this is irrelevant; for the surrogate column
//! the measured flows are algebraic in the inputs and this convention keeps
//! every measurement causal with respect to the next control move.

mod plants;
mod trajectory;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use plants::{BinaryColumn, Cstr, FirstOrderLag, VanDerPol, COLUMN_BASE_INPUT, COLUMN_INPUT_BOUNDS};
pub use trajectory::{fmt17, InputProfile, Trajectory};

/// A continuous-time input-affine system with an output map.
pub trait InputAffine: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_y(&self) -> usize;

    /// Drift field `f(x)`.
    fn drift(&self, x: &[f64], dx: &mut [f64]);

    /// Input field `g_i(x)`.
    fn input_field(&self, i: usize, x: &[f64], g: &mut [f64]);

    /// Measurement `y = h(x, u)` where `u` is the input held just before the sample.
    fn output(&self, x: &[f64], u: &[f64], y: &mut [f64]);

    /// Full right-hand side. Implementations may fuse the evaluation but must
    /// agree with `drift + sum_i input_field_i * u_i`.
    fn rhs(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        self.drift(x, dx);
        let mut g = vec![0.0; self.n_x()];
        for (i, &ui) in u.iter().enumerate() {
            self.input_field(i, x, &mut g);
            for (d, gi) in dx.iter_mut().zip(&g) {
                *d += gi * ui;
            }
        }
    }

    /// Physical range per state, used for divergence detection.
    fn state_bounds(&self) -> Option<Vec<(f64, f64)>> {
        None
    }

    /// States that are mole-fraction-like and get log-scaled for training.
    fn log_states(&self) -> Vec<usize> {
        Vec::new()
    }

    fn state_names(&self) -> Vec<String> {
        (1..=self.n_x()).map(|i| format!("x{i}")).collect()
    }

    fn output_names(&self) -> Vec<String> {
        (1..=self.n_y()).map(|i| format!("y{i}")).collect()
    }

    fn input_names(&self) -> Vec<String> {
        (1..=self.n_u()).map(|i| format!("u{i}")).collect()
    }
}

/// Shared handle to a plant. Cheap to clone; evaluation is pure.
#[derive(Clone)]
pub struct PlantModel(Arc<dyn InputAffine>);

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PlantModel({:?})", self.0)
    }
}

impl std::ops::Deref for PlantModel {
    type Target = dyn InputAffine;
    fn deref(&self) -> &Self::Target {
        self.0.as_ref()
    }
}

impl PlantModel {
    pub fn new<P: InputAffine + 'static>(plant: P) -> Self {
        PlantModel(Arc::new(plant))
    }

    pub fn output_vec(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_y()];
        self.output(x, u, &mut y);
        y
    }

    pub fn rhs_vec(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_x()];
        self.rhs(x, u, &mut dx);
        dx
    }

    /// Forward-difference Jacobian of the right-hand side w.r.t. the state,
    /// row-major `n_x x n_x`.
    pub fn state_jacobian(&self, x: &[f64], u: &[f64], f0: &[f64], jac: &mut [f64]) {
        let n = self.n_x();
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            self.rhs(&xp, u, &mut fp);
            xp[j] = x[j];
            for i in 0..n {
                jac[i * n + j] = (fp[i] - f0[i]) / h;
            }
        }
    }
}

/// Reusable buffers for RK4 stepping.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n_x: usize) -> Self {
        Rk4Workspace {
            k1: vec![0.0; n_x],
            k2: vec![0.0; n_x],
            k3: vec![0.0; n_x],
            k4: vec![0.0; n_x],
            tmp: vec![0.0; n_x],
        }
    }

    /// Advances `x` in place by one classical RK4 step of length `h`.
    pub fn step(&mut self, plant: &dyn InputAffine, x: &mut [f64], u: &[f64], h: f64) -> Result<()> {
        let n = x.len();
        plant.rhs(x, u, &mut self.k1);
        check_finite(&self.k1)?;
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        plant.rhs(&self.tmp, u, &mut self.k2);
        check_finite(&self.k2)?;
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        plant.rhs(&self.tmp, u, &mut self.k3);
        check_finite(&self.k3)?;
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        plant.rhs(&self.tmp, u, &mut self.k4);
        check_finite(&self.k4)?;
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|d| !d.is_finite()) {
        Some(index) => Err(Error::IntegrationFailure { index }),
        None => Ok(()),
    }
}

/// One RK4 step of length `dt` under constant input `u`.
pub fn rk4_step(plant: &PlantModel, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    if x.len() != plant.n_x() || u.len() != plant.n_u() {
        return Err(Error::Shape(format!(
            "rk4_step: state/input lengths {}/{} vs plant {}/{}",
            x.len(),
            u.len(),
            plant.n_x(),
            plant.n_u()
        )));
    }
    let mut ws = Rk4Workspace::new(plant.n_x());
    let mut out = x.to_vec();
    ws.step(&**plant, &mut out, u, dt)?;
    Ok(out)
}

/// Advances over one sampling interval with `substeps` RK4 steps.
pub fn advance(
    plant: &dyn InputAffine,
    ws: &mut Rk4Workspace,
    x: &mut [f64],
    u: &[f64],
    dt: f64,
    substeps: usize,
) -> Result<()> {
    let h = dt / substeps as f64;
    for _ in 0..substeps {
        ws.step(plant, x, u, h)?;
    }
    Ok(())
}

/// Integration settings shared by data generation and closed-loop runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub substeps: usize,
    /// Allowed excursion beyond `state_bounds` before declaring divergence.
    pub bound_slack: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { substeps: 20, bound_slack: 1e-3 }
    }
}

/// Samples the plant from `x0` at `t0, t0 + dt, ...` up to `t_end`.
///
/// The input recorded at sample `k` is the level held over `[t_k, t_k + dt)`.
/// The output at sample 0 uses `profile`'s first level as the previously held
/// input; use [`simulate_from`] to continue a run with a different one.
pub fn simulate(
    plant: &PlantModel,
    x0: &[f64],
    profile: &InputProfile,
    dt: f64,
    t_end: f64,
    substeps: usize,
) -> Result<Trajectory> {
    let t0 = profile.start();
    let prior = profile.level_at(t0).to_vec();
    simulate_from(
        plant,
        x0,
        &prior,
        profile,
        t0,
        dt,
        t_end,
        SimOptions { substeps, ..SimOptions::default() },
    )
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_from(
    plant: &PlantModel,
    x0: &[f64],
    prior_input: &[f64],
    profile: &InputProfile,
    t0: f64,
    dt: f64,
    t_end: f64,
    opts: SimOptions,
) -> Result<Trajectory> {
    if !(dt > 0.0) || opts.substeps == 0 {
        return Err(Error::Config("simulate needs dt > 0 and substeps >= 1".into()));
    }
    if x0.len() != plant.n_x() || prior_input.len() != plant.n_u() {
        return Err(Error::Shape("simulate: initial state or prior input has wrong length".into()));
    }
    if profile.n_u() != plant.n_u() {
        return Err(Error::Shape(format!(
            "profile has {} inputs, plant expects {}",
            profile.n_u(),
            plant.n_u()
        )));
    }
    let n_samples = ((t_end - t0) / dt + 1e-9).floor() as usize + 1;
    let bounds = plant.state_bounds();
    let mut traj = Trajectory::new(dt, t0);
    let mut ws = Rk4Workspace::new(plant.n_x());
    let mut x = x0.to_vec();
    let mut held_before = prior_input.to_vec();
    for k in 0..n_samples {
        let t = t0 + k as f64 * dt;
        if let Some(b) = &bounds {
            check_bounds(&x, b, opts.bound_slack, t)?;
        }
        let u = profile.level_at(t + 0.5 * dt).to_vec();
        let y = plant.output_vec(&x, &held_before);
        traj.push(u.clone(), x.clone(), y);
        if k + 1 < n_samples {
            advance(&**plant, &mut ws, &mut x, &u, dt, opts.substeps)?;
        }
        held_before = u;
    }
    Ok(traj)
}

fn check_bounds(x: &[f64], bounds: &[(f64, f64)], slack: f64, time: f64) -> Result<()> {
    for (index, (&v, &(lo, hi))) in x.iter().zip(bounds).enumerate() {
        if !(v >= lo - slack && v <= hi + slack) {
            return Err(Error::SimulationDiverged { time, index, value: v });
        }
    }
    Ok(())
}

/// Budget for [`steady_state`].
#[derive(Debug, Clone, Copy)]
pub struct SteadyStateOptions {
    pub tolerance: f64,
    pub max_newton: usize,
    /// Simulated time used to pull the iterate into the basin when Newton stalls.
    pub fallback_time: f64,
    pub fallback_step: f64,
    pub fallback_rounds: usize,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        SteadyStateOptions {
            tolerance: 1e-10,
            max_newton: 60,
            fallback_time: 200.0,
            fallback_step: 0.05,
            fallback_rounds: 5,
        }
    }
}

pub fn steady_state(plant: &PlantModel, u: &[f64], x_guess: &[f64]) -> Result<Vec<f64>> {
    steady_state_with(plant, u, x_guess, SteadyStateOptions::default())
}

/// Damped Newton on the residual with a finite-difference Jacobian, falling
/// back to long-horizon simulation between Newton attempts.
pub fn steady_state_with(
    plant: &PlantModel,
    u: &[f64],
    x_guess: &[f64],
    opts: SteadyStateOptions,
) -> Result<Vec<f64>> {
    if x_guess.iter().any(|v| !v.is_finite()) {
        return Err(Error::SteadyStateFailure("initial guess is not finite".into()));
    }
    if x_guess.len() != plant.n_x() || u.len() != plant.n_u() {
        return Err(Error::Shape("steady_state: guess or input has wrong length".into()));
    }
    let mut x = x_guess.to_vec();
    for round in 0..=opts.fallback_rounds {
        match newton(plant, u, &mut x, &opts) {
            Ok(()) => return Ok(x),
            Err(reason) => {
                log::debug!("steady-state Newton round {round} stalled: {reason}");
                if round == opts.fallback_rounds {
                    return Err(Error::SteadyStateFailure(reason));
                }
                x = x_guess.to_vec();
                let mut ws = Rk4Workspace::new(plant.n_x());
                let steps = (opts.fallback_time * (round + 1) as f64 / opts.fallback_step).ceil() as usize;
                for _ in 0..steps {
                    if ws.step(&**plant, &mut x, u, opts.fallback_step).is_err() {
                        return Err(Error::SteadyStateFailure("fallback simulation failed".into()));
                    }
                }
            }
        }
    }
    unreachable!()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
}

fn newton(plant: &PlantModel, u: &[f64], x: &mut Vec<f64>, opts: &SteadyStateOptions) -> std::result::Result<(), String> {
    let n = plant.n_x();
    let mut r = plant.rhs_vec(x, u);
    let mut jac = vec![0.0; n * n];
    for _ in 0..opts.max_newton {
        let norm = inf_norm(&r);
        if !norm.is_finite() {
            return Err("non-finite residual".into());
        }
        if norm < opts.tolerance {
            return Ok(());
        }
        plant.state_jacobian(x, u, &r, &mut jac);
        let j = DMatrix::from_row_slice(n, n, &jac);
        let rhs = DVector::from_column_slice(&r);
        let delta = j.lu().solve(&rhs).ok_or("singular Jacobian")?;
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda > 1e-6 {
            let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a - lambda * d).collect();
            let rt = plant.rhs_vec(&trial, u);
            let nt = inf_norm(&rt);
            if nt.is_finite() && nt < norm * (1.0 - 1e-4 * lambda) {
                *x = trial;
                r = rt;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(format!("line search failed at residual {norm:e}"));
        }
    }
    if inf_norm(&r) < opts.tolerance {
        Ok(())
    } else {
        Err(format!("no convergence in {} Newton iterations", opts.max_newton))
    }
}

/// Parameter map accepted by [`make_plant`].
pub type PlantParams = BTreeMap<String, f64>;

/// Plant registry: `vdp`, `cstr`, `column` and the scalar `linear` test plant.
pub fn make_plant(name: &str, params: &PlantParams) -> Result<PlantModel> {
    match name {
        "vdp" => Ok(PlantModel::new(VanDerPol::from_params(params)?)),
        "cstr" => Ok(PlantModel::new(Cstr::from_params(params)?)),
        "column" => Ok(PlantModel::new(BinaryColumn::from_params(params)?)),
        "linear" => Ok(PlantModel::new(FirstOrderLag::from_params(params)?)),
        other => Err(Error::Config(format!(
            "unknown plant `{other}` (expected vdp, cstr, column or linear)"
        ))),
    }
}

pub(crate) fn take_params(
    plant: &str,
    params: &PlantParams,
    allowed: &[(&str, f64)],
) -> Result<BTreeMap<String, f64>> {
    for key in params.keys() {
        if !allowed.iter().any(|(k, _)| k == key) {
            let names: Vec<&str> = allowed.iter().map(|(k, _)| *k).collect();
            return Err(Error::Config(format!(
                "unknown parameter `{key}` for plant `{plant}` (allowed: {})",
                names.join(", ")
            )));
        }
    }
    Ok(allowed
        .iter()
        .map(|(k, d)| (k.to_string(), params.get(*k).copied().unwrap_or(*d)))
        .collect())
}

#[cfg(test)]
mod tests;
