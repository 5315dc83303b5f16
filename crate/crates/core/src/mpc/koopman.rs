use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};

use super::{finish, solve, ControlProblem, MpcSolution, ScaledProblem, Shooting, SolveStatus, SolverConfig, SolverOutcome};
use crate::error::{Error, Result};
use crate::model::{KoopmanModel, Mlp};
use crate::sampling::DelayWindow;

/// Single shooting through the latent recursion; the decoder is applied to
/// the whole predicted horizon at once.
pub(super) struct LatentShooting<'a> {
    model: &'a KoopmanModel,
    z0: Vec<f64>,
    /// Decoder cut down to the channels the objective refers to.
    decoder: Mlp,
    prob: ScaledProblem,
}

impl<'a> LatentShooting<'a> {
    pub(super) fn new(model: &'a KoopmanModel, chi0: &DelayWindow, problem: &ControlProblem) -> Result<Self> {
        let mut prob = ScaledProblem::new(problem, &model.scaling);
        let cols = prob.compact();
        let mut decoder = model.decoder.clone();
        let last = decoder.n_layers() - 1;
        decoder.weights[last] = decoder.weights[last].select(Axis(1), &cols);
        decoder.biases[last] = decoder.biases[last].select(Axis(0), &cols);
        Ok(LatentShooting { model, z0: model.encode(chi0)?, decoder, prob })
    }

    fn latent(&self, u: &[f64]) -> Result<Array2<f64>> {
        let (n_u, n_z) = (self.prob.n_u, self.model.meta.n_z);
        let mut zs = Array2::zeros((self.prob.horizon, n_z));
        let zs_flat = zs.as_slice_mut().expect("standard layout");
        for k in 0..self.prob.horizon {
            let (done, rest) = zs_flat.split_at_mut(k * n_z);
            let z = if k == 0 { &self.z0[..] } else { &done[(k - 1) * n_z..] };
            let next = &mut rest[..n_z];
            self.model.dynamics.step_into(z, &u[k * n_u..(k + 1) * n_u], next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutDiverged { step: k + 1 });
            }
        }
        Ok(zs)
    }
}

impl Shooting for LatentShooting<'_> {
    fn n_vars(&self) -> usize {
        self.prob.horizon * self.prob.n_u
    }

    fn evaluate(&self, u: &[f64], penalty: f64, grad: Option<&mut [f64]>) -> Result<(f64, f64)> {
        let zs = self.latent(u)?;
        let tape = self.decoder.forward_tape(zs.view());
        let pred = tape.output();
        let Some(g) = grad else {
            return Ok(self.prob.terms(pred.view(), penalty, None));
        };
        let mut d = Array2::zeros(pred.raw_dim());
        let (cost, viol) = self.prob.terms(pred.view(), penalty, Some(&mut d));
        let dz = self.decoder.backward(&tape, d, None, true).expect("input gradient requested");
        // Adjoint of z_{k+1} = A z_k + B u_k.
        let dyn_ = &self.model.dynamics;
        let (n_u, n_z) = (self.prob.n_u, self.model.meta.n_z);
        let mut lam = vec![0.0; n_z];
        let mut next = vec![0.0; n_z];
        for k in (0..self.prob.horizon).rev() {
            for (l, d) in lam.iter_mut().zip(dz.row(k)) {
                *l += d;
            }
            for j in 0..n_u {
                g[k * n_u + j] = (0..n_z).map(|i| lam[i] * dyn_.b[[i, j]]).sum();
            }
            dyn_.apply_a_transpose(&lam, &mut next);
            std::mem::swap(&mut lam, &mut next);
        }
        Ok((cost, viol))
    }
}

/// Nonlinear MPC on the reduced model. `chi0` is the scaled delay window of
/// the current instant; `warm` is a raw input sequence to start from.
pub fn koopman_nmpc(
    model: &KoopmanModel,
    chi0: &DelayWindow,
    problem: &ControlProblem,
    warm: Option<&[Vec<f64>]>,
    cfg: &SolverConfig,
) -> Result<MpcSolution> {
    let started = Instant::now();
    let m = &model.meta;
    problem.validate(m.n_u, m.n_x, m.n_y)?;
    cfg.validate()?;
    let sh = LatentShooting::new(model, chi0, problem)?;
    let u0 = sh.prob.initial_guess(warm, problem, &model.scaling);
    let out = solve(&sh, &u0, &sh.prob.u_lo, &sh.prob.u_hi, cfg)?;
    finish(out, problem, &model.scaling, started, |inputs| {
        let r = model.rollout_raw_from_scaled(chi0, inputs)?;
        Ok((r.states, r.outputs))
    })
}

/// The same controller restricted to a linear decoder, where the problem is a
/// convex quadratic program in the inputs.
pub fn koopman_lmpc(
    model: &KoopmanModel,
    chi0: &DelayWindow,
    problem: &ControlProblem,
    warm: Option<&[Vec<f64>]>,
    cfg: &SolverConfig,
) -> Result<MpcSolution> {
    if !model.is_linear() {
        return Err(Error::Config("linear MPC needs a model with a linear decoder".into()));
    }
    if !problem.channel_bounds.is_empty() {
        return koopman_nmpc(model, chi0, problem, warm, cfg);
    }
    let started = Instant::now();
    let m = &model.meta;
    problem.validate(m.n_u, m.n_x, m.n_y)?;
    cfg.validate()?;
    let sh = LatentShooting::new(model, chi0, problem)?;
    let u0 = sh.prob.initial_guess(warm, problem, &model.scaling);
    let out = match condensed_qp(&sh, &u0, cfg) {
        Some(out) => out,
        None => solve(&sh, &u0, &sh.prob.u_lo, &sh.prob.u_hi, cfg)?,
    };
    finish(out, problem, &model.scaling, started, |inputs| {
        let r = model.rollout_raw_from_scaled(chi0, inputs)?;
        Ok((r.states, r.outputs))
    })
}

/// Tracking-only problem with a linear decoder: predictions are affine in the
/// inputs, so the cost is `|M u - r|^2` and the box-constrained minimum is
/// found by projected Newton steps on the free variables. `None` when the
/// reduced Hessian is singular.
fn condensed_qp(sh: &LatentShooting<'_>, u0: &[f64], cfg: &SolverConfig) -> Option<SolverOutcome> {
    let n = sh.n_vars();
    let p = &sh.prob;
    let pred = |u: &[f64]| -> Option<Array2<f64>> {
        let zs = sh.latent(u).ok()?;
        Some(sh.decoder.forward_batch(zs.view()))
    };
    let rows = p.tracking.len() * p.horizon;
    let entries = |pr: &Array2<f64>| -> DVector<f64> {
        DVector::from_iterator(
            rows,
            p.tracking.iter().flat_map(|(col, w, sp)| (0..p.horizon).map(move |k| w.sqrt() * (pr[[k, *col]] - sp[k]))),
        )
    };
    let base = entries(&pred(&vec![0.0; n])?);
    let mut mm = DMatrix::zeros(rows, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        mm.set_column(j, &(entries(&pred(&e)?) - &base));
        e[j] = 0.0;
    }
    let q = mm.transpose() * &mm;
    let cost = |u: &DVector<f64>| (&mm * u + &base).norm_squared();
    let mut u = DVector::from_iterator(n, u0.iter().enumerate().map(|(i, v)| v.clamp(p.u_lo[i], p.u_hi[i])));
    let mut iterations = 0;
    let mut pg = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        let g = 2.0 * mm.transpose() * (&mm * &u + &base);
        pg = (0..n).map(|i| (u[i] - (u[i] - g[i]).clamp(p.u_lo[i], p.u_hi[i])).abs()).fold(0.0, f64::max);
        if pg < cfg.tolerance {
            break;
        }
        let free: Vec<usize> = (0..n)
            .filter(|&i| !((u[i] <= p.u_lo[i] && g[i] > 0.0) || (u[i] >= p.u_hi[i] && g[i] < 0.0)))
            .collect();
        let mut d = DVector::zeros(n);
        if !free.is_empty() {
            let qf = DMatrix::from_fn(free.len(), free.len(), |a, b| 2.0 * q[(free[a], free[b])]);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
            let step = qf.cholesky()?.solve(&gf);
            for (a, &i) in free.iter().enumerate() {
                d[i] = step[a];
            }
        }
        let f0 = cost(&u);
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..cfg.max_backtracks {
            let cand = DVector::from_iterator(n, (0..n).map(|i| (u[i] + alpha * d[i]).clamp(p.u_lo[i], p.u_hi[i])));
            if cost(&cand) <= f0 {
                next = Some(cand);
                break;
            }
            alpha *= cfg.backtrack;
        }
        iterations += 1;
        match next {
            Some(c) if c != u => u = c,
            _ => break,
        }
    }
    let u: Vec<f64> = u.iter().copied().collect();
    let (cost, violation) = sh.evaluate(&u, 0.0, None).ok()?;
    let status = if pg < cfg.tolerance { SolveStatus::Converged } else { SolveStatus::IterationLimit };
    Some(SolverOutcome { u, cost, violation, penalty: 0.0, iterations, status, pg_norm: pg, lipschitz: cfg.initial_lipschitz })
}
