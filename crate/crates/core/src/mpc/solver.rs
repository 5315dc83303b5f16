//! Single-shooting projected-gradient solver with a quadratic-penalty outer
//! loop. Problem-specific rollouts plug in through [`Shooting`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Penalized objective over a flat decision vector (horizon-major inputs,
/// scaled units).
pub trait Shooting {
    fn n_vars(&self) -> usize;

    /// `(tracking cost, squared-violation sum)` and, when requested, the
    /// gradient of `cost + weight * violation`. Non-finite values signal a
    /// failed rollout.
    fn evaluate(&self, u: &[f64], penalty: f64, grad: Option<&mut [f64]>) -> Result<(f64, f64)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Inner iterations per penalty weight.
    pub max_iterations: usize,
    /// Stop when the projected-gradient step `|u - P(u - g)|_inf` is below this.
    pub tolerance: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Squared-violation sum (scaled units) accepted as feasible.
    pub violation_tolerance: f64,
    /// Factor applied to the step length on a failed sufficient-decrease test.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Curvature estimate the first trial step is sized from (step `1/L`).
    pub initial_lipschitz: f64,
    /// Nesterov extrapolation with function-value restart.
    pub momentum: bool,
    /// Start from the shifted previous solution in closed loop.
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 500,
            tolerance: 1e-6,
            penalty_initial: 1e2,
            penalty_growth: 10.0,
            penalty_max: 1e6,
            violation_tolerance: 1e-8,
            backtrack: 0.5,
            max_backtracks: 60,
            initial_lipschitz: 1.0,
            momentum: true,
            warm_start: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mpc solver: {m}")));
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_iterations == 0 || self.max_backtracks == 0 {
            return bad("iteration budgets must be at least 1");
        }
        if !(self.penalty_initial > 0.0 && self.penalty_growth > 1.0 && self.penalty_max >= self.penalty_initial) {
            return bad("penalty schedule needs initial > 0, growth > 1, max >= initial");
        }
        if !(self.initial_lipschitz > 0.0 && self.initial_lipschitz.is_finite()) {
            return bad("initial Lipschitz estimate must be positive and finite");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack factor must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    IterationLimit,
    /// Rollout failed during the search; the best iterate is returned.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutcome {
    pub u: Vec<f64>,
    pub cost: f64,
    pub violation: f64,
    pub penalty: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub pg_norm: f64,
    /// Curvature estimate at exit, reusable as the next `initial_lipschitz`.
    pub lipschitz: f64,
}

fn project(u: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in u.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn pg_norm(u: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    u.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((v, gi), (l, h))| (v - (v - gi).clamp(*l, *h)).abs())
        .fold(0.0, f64::max)
}

/// A point with its objective parts and, once computed, its gradient.
#[derive(Clone)]
struct Point {
    u: Vec<f64>,
    cost: f64,
    viol: f64,
    grad: Option<Vec<f64>>,
}

impl Point {
    fn f(&self, penalty: f64) -> f64 {
        self.cost + penalty * self.viol
    }
}

fn eval_point<S: Shooting>(prob: &S, u: Vec<f64>, penalty: f64, with_grad: bool) -> Option<Point> {
    let mut g = with_grad.then(|| vec![0.0; u.len()]);
    match prob.evaluate(&u, penalty, g.as_deref_mut()) {
        Ok((cost, viol)) if (cost + penalty * viol).is_finite() => Some(Point { u, cost, viol, grad: g }),
        _ => None,
    }
}

/// Minimizes over the box `[lo, hi]` starting from `u0` (projected first).
///
/// Inner loop: accelerated projected gradient with a backtracked Lipschitz
/// estimate; momentum restarts whenever the objective would increase. Outer
/// loop: the penalty weight grows until the violation is within tolerance.
pub fn solve<S: Shooting>(prob: &S, u0: &[f64], lo: &[f64], hi: &[f64], cfg: &SolverConfig) -> Result<SolverOutcome> {
    let n = prob.n_vars();
    assert!(u0.len() == n && lo.len() == n && hi.len() == n, "decision vector sizes");
    let mut u0 = u0.to_vec();
    project(&mut u0, lo, hi);
    let mut penalty = cfg.penalty_initial;
    let mut cur = eval_point(prob, u0, penalty, true)
        .ok_or_else(|| Error::SolverFailure("objective is not finite at the initial guess".into()))?;
    let mut iterations = 0;
    let mut status;
    let mut pg;
    let mut lip = cfg.initial_lipschitz;
    // Only probe a longer step after one was accepted without backtracking.
    let mut probe_longer = false;
    loop {
        let mut prev_u = cur.u.clone();
        let mut t: f64 = 1.0;
        let mut converged = false;
        status = SolveStatus::IterationLimit;
        pg = f64::INFINITY;
        for _ in 0..cfg.max_iterations {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = if cfg.momentum { (t - 1.0) / t_next } else { 0.0 };
            let extrapolated = if beta > 0.0 {
                let mut y: Vec<f64> = (0..n).map(|i| cur.u[i] + beta * (cur.u[i] - prev_u[i])).collect();
                project(&mut y, lo, hi);
                eval_point(prob, y, penalty, true)
            } else {
                None
            };
            let mut t_after = t_next;
            let y = match extrapolated {
                Some(y) => y,
                None => {
                    if cur.grad.is_none() {
                        match eval_point(prob, cur.u.clone(), penalty, true) {
                            Some(p) => cur = p,
                            None => {
                                status = SolveStatus::Failed;
                                break;
                            }
                        }
                    }
                    if beta > 0.0 {
                        t_after = 1.0;
                    }
                    cur.clone()
                }
            };
            let gy = y.grad.as_ref().expect("gradient evaluated");
            pg = pg_norm(&y.u, gy, lo, hi);
            if pg < cfg.tolerance {
                if y.f(penalty) <= cur.f(penalty) {
                    cur = y;
                }
                converged = true;
                break;
            }
            let fy = y.f(penalty);
            // Objective round-off; without it the decrease test stalls long
            // before the gradient test can be met on large residuals.
            let slack = 16.0 * f64::EPSILON * fy.abs();
            if probe_longer {
                lip *= cfg.backtrack;
            }
            probe_longer = true;
            let mut accepted = None;
            for _ in 0..cfg.max_backtracks {
                let mut trial: Vec<f64> = (0..n).map(|i| y.u[i] - gy[i] / lip).collect();
                project(&mut trial, lo, hi);
                let (mut lin, mut sq) = (0.0, 0.0);
                for i in 0..n {
                    let d = trial[i] - y.u[i];
                    lin += gy[i] * d;
                    sq += d * d;
                }
                if sq == 0.0 {
                    break;
                }
                match eval_point(prob, trial, penalty, false) {
                    Some(p) if p.f(penalty) <= fy + lin + 0.5 * lip * sq + slack => {
                        accepted = Some(p);
                        break;
                    }
                    _ => {
                        lip /= cfg.backtrack;
                        probe_longer = false;
                    }
                }
            }
            let Some(next) = accepted else {
                // No decrease representable: stationary to working precision
                // unless the rollout itself keeps failing.
                converged = pg < cfg.tolerance.sqrt();
                if !converged {
                    status = SolveStatus::Failed;
                }
                break;
            };
            iterations += 1;
            if next.f(penalty) > cur.f(penalty) + slack {
                // Restart: drop momentum and retry from the current point.
                prev_u.clone_from(&cur.u);
                t = 1.0;
                continue;
            }
            prev_u = std::mem::replace(&mut cur, next).u;
            t = t_after;
        }
        if status == SolveStatus::Failed {
            break;
        }
        if cur.viol <= cfg.violation_tolerance || penalty >= cfg.penalty_max {
            status = if converged { SolveStatus::Converged } else { SolveStatus::IterationLimit };
            break;
        }
        penalty = (penalty * cfg.penalty_growth).min(cfg.penalty_max);
        cur.grad = None;
    }
    Ok(SolverOutcome { u: cur.u, cost: cur.cost, violation: cur.viol, penalty, iterations, status, pg_norm: pg, lipschitz: lip })
}
