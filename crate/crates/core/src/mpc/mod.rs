//! Receding-horizon tracking control on the reduced model, plus a reference
//! controller that optimizes through the full plant.

mod ideal;
mod koopman;
mod solver;

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{ChannelScale, ScalingSpec};

pub use ideal::{ideal_nmpc, PlantPredictor};
pub use koopman::{koopman_lmpc, koopman_nmpc};
pub use solver::{solve, Shooting, SolveStatus, SolverConfig, SolverOutcome};

/// A predicted quantity: a state or a measured output, by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    State(usize),
    Output(usize),
}

impl Channel {
    /// Column in the stacked `[x; y]` prediction.
    pub fn stacked(self, n_x: usize) -> usize {
        match self {
            Channel::State(i) => i,
            Channel::Output(i) => n_x + i,
        }
    }
}

/// Quadratic tracking term `weight * (c_k - r_k)^2` on a scaled channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracking {
    pub channel: Channel,
    pub weight: f64,
    /// Raw setpoints for steps `1..=horizon`; the last value is held if the
    /// list is shorter.
    pub setpoints: Vec<f64>,
}

/// Soft bound on a predicted channel, raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelBound {
    pub channel: Channel,
    pub lower: f64,
    pub upper: f64,
}

/// One optimal-control problem in raw units. Inputs are hard-bounded;
/// channel bounds are enforced by penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProblem {
    pub horizon: usize,
    pub tracking: Vec<Tracking>,
    pub input_bounds: Vec<(f64, f64)>,
    pub channel_bounds: Vec<ChannelBound>,
}

impl ControlProblem {
    pub fn validate(&self, n_u: usize, n_x: usize, n_y: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon == 0 {
            return bad("control horizon must be at least 1".into());
        }
        if self.input_bounds.len() != n_u {
            return bad(format!("{} input bounds given for {n_u} inputs", self.input_bounds.len()));
        }
        for (i, &(lo, hi)) in self.input_bounds.iter().enumerate() {
            if !(lo <= hi) {
                return bad(format!("input {i}: lower bound {lo} exceeds upper bound {hi}"));
            }
        }
        let check = |c: Channel| match c {
            Channel::State(i) if i >= n_x => bad(format!("state channel {i} out of range ({n_x} states)")),
            Channel::Output(i) if i >= n_y => bad(format!("output channel {i} out of range ({n_y} outputs)")),
            _ => Ok(()),
        };
        for t in &self.tracking {
            check(t.channel)?;
            if t.setpoints.is_empty() || !(t.weight >= 0.0) {
                return bad("tracking terms need setpoints and a non-negative weight".into());
            }
        }
        for b in &self.channel_bounds {
            check(b.channel)?;
            if !(b.lower <= b.upper) {
                return bad(format!("channel bound {:?}: lower {} exceeds upper {}", b.channel, b.lower, b.upper));
            }
        }
        Ok(())
    }

    /// Cold-start guess: the middle of the input box.
    pub fn midpoint(&self) -> Vec<Vec<f64>> {
        let u: Vec<f64> = self.input_bounds.iter().map(|(l, h)| 0.5 * (l + h)).collect();
        vec![u; self.horizon]
    }
}

/// Result of one solve. Inputs and predictions are in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// `u_0 .. u_{H-1}`.
    pub inputs: Vec<Vec<f64>>,
    /// `x_1 .. x_H` as predicted from the returned inputs.
    pub predicted_states: Vec<Vec<f64>>,
    pub predicted_outputs: Vec<Vec<f64>>,
    /// Tracking cost (scaled units), without the penalty.
    pub objective: f64,
    /// Largest predicted bound violation, raw units.
    pub max_violation: f64,
    pub penalty_weight: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Step-size curvature estimate the solver finished with.
    pub lipschitz: f64,
    pub solve_time_s: f64,
}

impl MpcSolution {
    /// Warm start for the next instant: drop the applied move and repeat the last.
    pub fn shifted(&self) -> Vec<Vec<f64>> {
        let mut u: Vec<Vec<f64>> = self.inputs[1..].to_vec();
        u.push(self.inputs.last().unwrap().clone());
        u
    }
}

fn scale_bound(c: &ChannelScale, v: f64) -> f64 {
    if c.log && v <= 0.0 {
        f64::NEG_INFINITY
    } else if v.is_infinite() {
        v
    } else {
        c.forward(v)
    }
}

/// A problem converted to scaled units, shared by both predictors.
#[derive(Debug, Clone)]
struct ScaledProblem {
    horizon: usize,
    n_u: usize,
    /// `(stacked column, weight, setpoint per step)`.
    tracking: Vec<(usize, f64, Vec<f64>)>,
    /// `(stacked column, lower, upper)`.
    bounds: Vec<(usize, f64, f64)>,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
}

impl ScaledProblem {
    fn new(p: &ControlProblem, scaling: &ScalingSpec) -> Self {
        let n_x = scaling.n_x();
        let tracking = p
            .tracking
            .iter()
            .map(|t| {
                let col = t.channel.stacked(n_x);
                let sc = scaling.stacked(col);
                let sp = (0..p.horizon).map(|k| sc.forward(t.setpoints[k.min(t.setpoints.len() - 1)])).collect();
                (col, t.weight, sp)
            })
            .collect();
        let bounds = p
            .channel_bounds
            .iter()
            .map(|b| {
                let col = b.channel.stacked(n_x);
                let sc = scaling.stacked(col);
                (col, scale_bound(sc, b.lower), scale_bound(sc, b.upper))
            })
            .collect();
        let mut u_lo = Vec::with_capacity(p.horizon * p.input_bounds.len());
        let mut u_hi = Vec::with_capacity(u_lo.capacity());
        for _ in 0..p.horizon {
            for (i, &(lo, hi)) in p.input_bounds.iter().enumerate() {
                u_lo.push(scaling.inputs[i].forward(lo));
                u_hi.push(scaling.inputs[i].forward(hi));
            }
        }
        ScaledProblem { horizon: p.horizon, n_u: p.input_bounds.len(), tracking, bounds, u_lo, u_hi }
    }

    /// Renumbers the referenced columns `0..m` in ascending order and returns
    /// their original indices.
    fn compact(&mut self) -> Vec<usize> {
        let mut cols: Vec<usize> = self.tracking.iter().map(|t| t.0).chain(self.bounds.iter().map(|b| b.0)).collect();
        cols.sort_unstable();
        cols.dedup();
        let pos = |c: usize| cols.binary_search(&c).unwrap();
        for t in &mut self.tracking {
            t.0 = pos(t.0);
        }
        for b in &mut self.bounds {
            b.0 = pos(b.0);
        }
        cols
    }

    /// Tracking cost and squared-violation sum of a scaled prediction
    /// (`horizon x (n_x + n_y)`); fills `d` with the gradient of
    /// `cost + penalty * violation` when given.
    fn terms(&self, pred: ArrayView2<f64>, penalty: f64, mut d: Option<&mut Array2<f64>>) -> (f64, f64) {
        if let Some(d) = d.as_deref_mut() {
            d.fill(0.0);
        }
        let mut cost = 0.0;
        for (col, w, sp) in &self.tracking {
            for k in 0..self.horizon {
                let e = pred[[k, *col]] - sp[k];
                cost += w * e * e;
                if let Some(d) = d.as_deref_mut() {
                    d[[k, *col]] += 2.0 * w * e;
                }
            }
        }
        let mut viol = 0.0;
        for &(col, lo, hi) in &self.bounds {
            for k in 0..self.horizon {
                let v = pred[[k, col]];
                let e = if v < lo {
                    v - lo
                } else if v > hi {
                    v - hi
                } else {
                    continue;
                };
                viol += e * e;
                if let Some(d) = d.as_deref_mut() {
                    d[[k, col]] += 2.0 * penalty * e;
                }
            }
        }
        (cost, viol)
    }

    fn initial_guess(&self, warm: Option<&[Vec<f64>]>, problem: &ControlProblem, scaling: &ScalingSpec) -> Vec<f64> {
        let mid = problem.midpoint();
        let guess = match warm {
            Some(w) if !w.is_empty() => w,
            _ => &mid[..],
        };
        let mut u = Vec::with_capacity(self.horizon * self.n_u);
        for k in 0..self.horizon {
            let row = &guess[k.min(guess.len() - 1)];
            u.extend(scaling.scale_inputs(row));
        }
        u
    }
}

/// Largest bound violation over a raw prediction.
fn max_violation(problem: &ControlProblem, states: &[Vec<f64>], outputs: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for b in &problem.channel_bounds {
        for (x, y) in states.iter().zip(outputs) {
            let v = match b.channel {
                Channel::State(i) => x[i],
                Channel::Output(i) => y[i],
            };
            worst = worst.max(b.lower - v).max(v - b.upper);
        }
    }
    worst
}

/// Converts scaled decision variables to raw inputs, clamped to the raw box
/// so round-off never leaves it.
fn raw_inputs(u: &[f64], problem: &ControlProblem, scaling: &ScalingSpec) -> Vec<Vec<f64>> {
    u.chunks(problem.input_bounds.len())
        .map(|c| {
            scaling
                .unscale_inputs(c)
                .into_iter()
                .zip(&problem.input_bounds)
                .map(|(v, &(lo, hi))| v.clamp(lo, hi))
                .collect()
        })
        .collect()
}

fn finish(
    out: SolverOutcome,
    problem: &ControlProblem,
    scaling: &ScalingSpec,
    started: Instant,
    predict: impl FnOnce(&[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
) -> Result<MpcSolution> {
    let inputs = raw_inputs(&out.u, problem, scaling);
    let (predicted_states, predicted_outputs) = predict(&inputs)?;
    Ok(MpcSolution {
        max_violation: max_violation(problem, &predicted_states, &predicted_outputs),
        inputs,
        predicted_states,
        predicted_outputs,
        objective: out.cost,
        penalty_weight: out.penalty,
        iterations: out.iterations,
        status: out.status,
        lipschitz: out.lipschitz,
        solve_time_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests;
