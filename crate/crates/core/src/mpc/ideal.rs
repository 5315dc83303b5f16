use std::time::Instant;

use ndarray::Array2;

use super::{finish, solve, ControlProblem, MpcSolution, ScaledProblem, Shooting, SolverConfig};
use crate::dynamics::{advance, PlantModel, Rk4Workspace};
use crate::error::{Error, Result};
use crate::sampling::ScalingSpec;

/// The full plant used as its own prediction model.
#[derive(Debug, Clone)]
pub struct PlantPredictor {
    pub plant: PlantModel,
    pub dt: f64,
    pub substeps: usize,
    /// Units in which the objective is posed, normally the reduced model's.
    pub scaling: ScalingSpec,
}

impl PlantPredictor {
    fn step(&self, ws: &mut Rk4Workspace, x: &mut [f64], u: &[f64]) -> Result<()> {
        advance(&*self.plant, ws, x, u, self.dt, self.substeps)
    }

    /// Raw states and outputs at steps `1..=inputs.len()`.
    pub fn predict(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut ws = Rk4Workspace::new(self.plant.n_x());
        let mut x = x0.to_vec();
        let mut xs = Vec::with_capacity(inputs.len());
        let mut ys = Vec::with_capacity(inputs.len());
        for u in inputs {
            self.step(&mut ws, &mut x, u)?;
            xs.push(x.clone());
            ys.push(self.plant.output_vec(&x, u));
        }
        Ok((xs, ys))
    }
}

fn fd_step(v: f64) -> f64 {
    1e-7 * v.abs().max(1.0)
}

pub(super) struct PlantShooting<'a> {
    pred: &'a PlantPredictor,
    x0: Vec<f64>,
    prob: ScaledProblem,
}

impl<'a> PlantShooting<'a> {
    pub(super) fn new(pred: &'a PlantPredictor, x0: &[f64], problem: &ControlProblem) -> Self {
        PlantShooting { pred, x0: x0.to_vec(), prob: ScaledProblem::new(problem, &pred.scaling) }
    }

    fn raw(&self, u: &[f64]) -> Vec<Vec<f64>> {
        u.chunks(self.prob.n_u).map(|c| self.pred.scaling.unscale_inputs(c)).collect()
    }
}

impl Shooting for PlantShooting<'_> {
    fn n_vars(&self) -> usize {
        self.prob.horizon * self.prob.n_u
    }

    fn evaluate(&self, u: &[f64], penalty: f64, grad: Option<&mut [f64]>) -> Result<(f64, f64)> {
        let sc = &self.pred.scaling;
        let plant = &self.pred.plant;
        let (n_x, n_y, n_u, h) = (plant.n_x(), plant.n_y(), self.prob.n_u, self.prob.horizon);
        let inputs = self.raw(u);
        let (xs, ys) = self.pred.predict(&self.x0, &inputs)?;
        let mut pred = Array2::zeros((h, n_x + n_y));
        for k in 0..h {
            for (j, v) in sc.scale_states(&xs[k]).into_iter().chain(sc.scale_outputs(&ys[k])).enumerate() {
                pred[[k, j]] = v;
            }
        }
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure("plant prediction is not finite".into()));
        }
        let Some(g) = grad else {
            return Ok(self.prob.terms(pred.view(), penalty, None));
        };
        let mut d = Array2::zeros(pred.raw_dim());
        let (cost, viol) = self.prob.terms(pred.view(), penalty, Some(&mut d));

        // Discrete adjoint with forward-difference sensitivities of the
        // sampled plant map and of the output map.
        let mut ws = Rk4Workspace::new(n_x);
        let mut mu = vec![0.0; n_x];
        let mut y_p = vec![0.0; n_y];
        for k in (0..h).rev() {
            let (x1, u_k) = (&xs[k], &inputs[k]);
            // dJ/dy_{k+1} in raw units.
            let dy: Vec<f64> = (0..n_y).map(|i| d[[k, n_x + i]] * sc.outputs[i].derivative(ys[k][i])).collect();
            // mu <- dJ/dx_{k+1} (direct) + Phi_x(k+1)^T mu, the latter already folded in.
            for j in 0..n_x {
                mu[j] += d[[k, j]] * sc.states[j].derivative(x1[j]);
            }
            let mut xp = x1.clone();
            for j in 0..n_x {
                let step = fd_step(x1[j]);
                xp[j] = x1[j] + step;
                plant.output(&xp, u_k, &mut y_p);
                xp[j] = x1[j];
                mu[j] += (0..n_y).map(|i| dy[i] * (y_p[i] - ys[k][i]) / step).sum::<f64>();
            }
            let x_prev = if k == 0 { &self.x0 } else { &xs[k - 1] };
            let mut up = u_k.clone();
            for i in 0..n_u {
                let step = fd_step(u_k[i]);
                up[i] = u_k[i] + step;
                let mut x = x_prev.clone();
                self.pred.step(&mut ws, &mut x, &up)?;
                plant.output(x1, &up, &mut y_p);
                up[i] = u_k[i];
                let via_state: f64 = (0..n_x).map(|j| mu[j] * (x[j] - x1[j]) / step).sum();
                let direct: f64 = (0..n_y).map(|l| dy[l] * (y_p[l] - ys[k][l]) / step).sum();
                let inv = 1.0 / sc.inputs[i].derivative(u_k[i]);
                g[k * n_u + i] = (via_state + direct) * inv;
            }
            if k > 0 {
                let mut next = vec![0.0; n_x];
                let mut xp = x_prev.clone();
                for j in 0..n_x {
                    let step = fd_step(x_prev[j]);
                    xp[j] = x_prev[j] + step;
                    let mut x = xp.clone();
                    self.pred.step(&mut ws, &mut x, u_k)?;
                    xp[j] = x_prev[j];
                    next[j] = (0..n_x).map(|l| mu[l] * (x[l] - x1[l]) / step).sum();
                }
                mu = next;
            }
        }
        Ok((cost, viol))
    }
}

/// Nonlinear MPC that predicts with the plant itself, from the measured
/// full state `x0`.
pub fn ideal_nmpc(
    pred: &PlantPredictor,
    x0: &[f64],
    problem: &ControlProblem,
    warm: Option<&[Vec<f64>]>,
    cfg: &SolverConfig,
) -> Result<MpcSolution> {
    let started = Instant::now();
    let p = &pred.plant;
    problem.validate(p.n_u(), p.n_x(), p.n_y())?;
    cfg.validate()?;
    if x0.len() != p.n_x() {
        return Err(Error::Shape(format!("state has length {}, plant has {} states", x0.len(), p.n_x())));
    }
    let sh = PlantShooting::new(pred, x0, problem);
    let u0 = sh.prob.initial_guess(warm, problem, &pred.scaling);
    let out = solve(&sh, &u0, &sh.prob.u_lo, &sh.prob.u_hi, cfg)?;
    finish(out, problem, &pred.scaling, started, |inputs| pred.predict(x0, inputs))
}
