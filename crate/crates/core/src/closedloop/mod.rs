//! Plant-in-the-loop runs: measurement buffering, one controller call per
//! sampling instant, logging, and the solve-time comparison.

mod benchmark;
mod openloop;

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{advance, fmt17, steady_state, PlantModel, Rk4Workspace, COLUMN_BASE_INPUT, COLUMN_INPUT_BOUNDS};
use crate::error::{Error, Result};
use crate::model::KoopmanModel;
use crate::mpc::{
    ideal_nmpc, koopman_lmpc, koopman_nmpc, Channel, ChannelBound, ControlProblem, MpcSolution, PlantPredictor,
    SolveStatus, SolverConfig, Tracking,
};
use crate::sampling::{initial_guess, DelayWindow};

pub use benchmark::{benchmark_cpu, BenchmarkRow, BenchmarkTable};
pub use openloop::{evaluate_openloop, ChannelError, OpenLoopReport, OpenLoopTest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    KoopmanNmpc,
    KoopmanLmpc,
    IdealNmpc,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::KoopmanNmpc => "koopman_nmpc",
            ControllerKind::KoopmanLmpc => "koopman_lmpc",
            ControllerKind::IdealNmpc => "ideal_nmpc",
        }
    }
}

/// A closed-loop experiment. Times are in the plant's time unit (minutes for
/// the column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    /// The plant starts at its steady state under this input.
    pub initial_input: Vec<f64>,
    /// Piecewise-constant schedule `[time, value]` for the tracked channel.
    pub setpoints: Vec<[f64; 2]>,
    pub tracked: Channel,
    pub tracking_weight: f64,
    pub duration: f64,
    pub dt: f64,
    /// RK4 substeps per sampling interval of the simulated plant.
    pub substeps: usize,
    pub horizon: usize,
    pub input_bounds: Vec<[f64; 2]>,
    pub channel_bounds: Vec<ChannelBound>,
    pub controller: ControllerKind,
}

impl Default for Scenario {
    /// Four-level distillate-flow schedule on the surrogate column with the
    /// top-purity bound, 4 h at 2 min sampling.
    fn default() -> Self {
        Scenario {
            initial_input: COLUMN_BASE_INPUT.to_vec(),
            setpoints: vec![[0.0, 0.2], [30.0, 0.25], [150.0, 0.15], [210.0, 0.2]],
            tracked: Channel::Output(0),
            tracking_weight: 1.0,
            duration: 240.0,
            dt: 2.0,
            substeps: 20,
            horizon: 30,
            input_bounds: COLUMN_INPUT_BOUNDS.iter().map(|&(l, h)| [l, h]).collect(),
            channel_bounds: vec![ChannelBound { channel: Channel::State(11), lower: 0.85, upper: 0.95 }],
            controller: ControllerKind::KoopmanNmpc,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scenario: {m}")));
        if !(self.dt > 0.0 && self.duration >= 0.0) || self.substeps == 0 || self.horizon == 0 {
            return bad("dt, substeps and horizon must be positive, duration non-negative");
        }
        if self.setpoints.is_empty() || self.setpoints[0][0] > 0.0 {
            return bad("setpoint schedule must start at or before t = 0");
        }
        if self.setpoints.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return bad("setpoint times must increase");
        }
        if self.initial_input.len() != self.input_bounds.len() {
            return bad("initial_input and input_bounds differ in length");
        }
        Ok(())
    }

    pub fn n_instants(&self) -> usize {
        (self.duration / self.dt + 1e-9).floor() as usize + 1
    }

    pub fn setpoint_at(&self, t: f64) -> f64 {
        let mut v = self.setpoints[0][1];
        for s in &self.setpoints {
            if s[0] <= t + 1e-9 {
                v = s[1];
            }
        }
        v
    }

    /// The problem posed at time `t`, with the setpoint preview over the horizon.
    pub fn problem_at(&self, t: f64) -> ControlProblem {
        ControlProblem {
            horizon: self.horizon,
            tracking: vec![Tracking {
                channel: self.tracked,
                weight: self.tracking_weight,
                setpoints: (1..=self.horizon).map(|j| self.setpoint_at(t + j as f64 * self.dt)).collect(),
            }],
            input_bounds: self.input_bounds.iter().map(|b| (b[0], b[1])).collect(),
            channel_bounds: self.channel_bounds.clone(),
        }
    }
}

/// What a controller may read at one instant. `window` holds raw outputs,
/// newest first; `past_inputs` is `u_{k-1} .. u_{k-N}`.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub window: &'a DelayWindow,
    pub past_inputs: &'a [Vec<f64>],
    pub state: &'a [f64],
}

pub trait Controller {
    fn name(&self) -> &str;
    /// Number of past samples the controller needs besides the current one.
    fn n_delays(&self) -> usize;
    /// Sampling interval the controller was built for, if fixed.
    fn dt(&self) -> Option<f64>;
    fn warm_start(&self) -> bool;
    fn solve(&mut self, obs: &Observation<'_>, problem: &ControlProblem, warm: Option<&[Vec<f64>]>) -> Result<MpcSolution>;
}

/// With warm starting, the next solve also reuses the step size.
fn carry_step(cfg: &mut SolverConfig, sol: &MpcSolution) {
    if cfg.warm_start && sol.lipschitz.is_finite() && sol.lipschitz > 0.0 {
        cfg.initial_lipschitz = sol.lipschitz;
    }
}

/// Reduced-model controller fed by the measurement buffer.
#[derive(Debug, Clone)]
pub struct KoopmanController<'a> {
    pub model: &'a KoopmanModel,
    pub cfg: SolverConfig,
    pub linear: bool,
}

impl Controller for KoopmanController<'_> {
    fn name(&self) -> &str {
        if self.linear {
            ControllerKind::KoopmanLmpc.as_str()
        } else {
            ControllerKind::KoopmanNmpc.as_str()
        }
    }
    fn n_delays(&self) -> usize {
        self.model.meta.n_delays
    }
    fn dt(&self) -> Option<f64> {
        Some(self.model.meta.dt)
    }
    fn warm_start(&self) -> bool {
        self.cfg.warm_start
    }
    fn solve(&mut self, obs: &Observation<'_>, problem: &ControlProblem, warm: Option<&[Vec<f64>]>) -> Result<MpcSolution> {
        let chi = self.model.scale_chi(obs.window, Some(obs.past_inputs))?;
        let sol = if self.linear {
            koopman_lmpc(self.model, &chi, problem, warm, &self.cfg)?
        } else {
            koopman_nmpc(self.model, &chi, problem, warm, &self.cfg)?
        };
        carry_step(&mut self.cfg, &sol);
        Ok(sol)
    }
}

/// Benchmark controller with full-state feedback.
#[derive(Debug, Clone)]
pub struct IdealController {
    pub predictor: PlantPredictor,
    pub cfg: SolverConfig,
}

impl Controller for IdealController {
    fn name(&self) -> &str {
        ControllerKind::IdealNmpc.as_str()
    }
    fn n_delays(&self) -> usize {
        0
    }
    fn dt(&self) -> Option<f64> {
        Some(self.predictor.dt)
    }
    fn warm_start(&self) -> bool {
        self.cfg.warm_start
    }
    fn solve(&mut self, obs: &Observation<'_>, problem: &ControlProblem, warm: Option<&[Vec<f64>]>) -> Result<MpcSolution> {
        let sol = ideal_nmpc(&self.predictor, obs.state, problem, warm, &self.cfg)?;
        carry_step(&mut self.cfg, &sol);
        Ok(sol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub k: usize,
    pub t: f64,
    /// Measurement taken at `t`.
    pub y: Vec<f64>,
    /// Input applied over `[t, t + dt)`.
    pub u: Vec<f64>,
    /// Plant state at `t`.
    pub x: Vec<f64>,
    /// Controller's first-step output prediction; `None` when the input was held.
    pub yhat: Option<Vec<f64>>,
    pub solve_ms: f64,
    pub iterations: usize,
    pub objective: f64,
    /// Plant bound violation at `t`, raw units.
    pub violation: f64,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub controller: String,
    pub dt: f64,
    pub rows: Vec<LogRow>,
}

/// Tracking error at the end of one setpoint plateau.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauError {
    pub start: f64,
    pub end: f64,
    pub setpoint: f64,
    pub value: f64,
    /// `|value - setpoint| / |setpoint|`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopSummary {
    pub controller: String,
    pub plateaus: Vec<PlateauError>,
    pub max_relative_error: f64,
    /// Applied inputs outside the input box.
    pub input_violations: usize,
    /// Time integral of the plant's bound violation, raw units times time.
    pub violation_integral: f64,
    pub max_violation: f64,
    pub held_instants: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
}

impl ClosedLoopLog {
    /// `k,t,y..,u..,x..,yhat..,solve_ms,iters,objective,violation,held_flag`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let Some(first) = self.rows.first() else {
            wr.flush()?;
            return Ok(());
        };
        let (n_y, n_u, n_x) = (first.y.len(), first.u.len(), first.x.len());
        let mut header = vec!["k".to_string(), "t".into()];
        header.extend((1..=n_y).map(|i| format!("y{i}")));
        header.extend((1..=n_u).map(|i| format!("u{i}")));
        header.extend((1..=n_x).map(|i| format!("x{i}")));
        header.extend((1..=n_y).map(|i| format!("yhat{i}")));
        header.extend(["solve_ms", "iters", "objective", "violation", "held_flag"].map(String::from));
        wr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.k.to_string(), fmt17(r.t)];
            rec.extend(r.y.iter().chain(&r.u).chain(&r.x).map(|v| fmt17(*v)));
            match &r.yhat {
                Some(p) => rec.extend(p.iter().map(|v| fmt17(*v))),
                None => rec.extend(std::iter::repeat_n(String::new(), n_y)),
            }
            rec.push(format!("{:.3}", r.solve_ms));
            rec.push(r.iterations.to_string());
            rec.push(fmt17(r.objective));
            rec.push(fmt17(r.violation));
            rec.push(u8::from(r.held).to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn tracked_value(&self, row: &LogRow, channel: Channel) -> f64 {
        match channel {
            Channel::State(i) => row.x[i],
            Channel::Output(i) => row.y[i],
        }
    }

    pub fn summary(&self, scenario: &Scenario) -> ClosedLoopSummary {
        let mut plateaus = Vec::new();
        for (i, s) in scenario.setpoints.iter().enumerate() {
            let start = s[0].max(0.0);
            let end = scenario.setpoints.get(i + 1).map_or(scenario.duration, |n| n[0] - scenario.dt);
            if start > scenario.duration {
                break;
            }
            // Last instant still on this plateau.
            let Some(row) = self.rows.iter().rev().find(|r| r.t <= end + 1e-9 && r.t >= start - 1e-9) else {
                continue;
            };
            let value = self.tracked_value(row, scenario.tracked);
            plateaus.push(PlateauError {
                start,
                end: row.t,
                setpoint: s[1],
                value,
                relative_error: (value - s[1]).abs() / s[1].abs().max(f64::MIN_POSITIVE),
            });
        }
        let input_violations = self
            .rows
            .iter()
            .filter(|r| r.u.iter().zip(&scenario.input_bounds).any(|(v, b)| *v < b[0] || *v > b[1]))
            .count();
        let solves: Vec<f64> = self.rows.iter().map(|r| r.solve_ms).collect();
        ClosedLoopSummary {
            controller: self.controller.clone(),
            max_relative_error: plateaus.iter().map(|p| p.relative_error).fold(0.0, f64::max),
            plateaus,
            input_violations,
            violation_integral: self.rows.iter().map(|r| r.violation).sum::<f64>() * self.dt,
            max_violation: self.rows.iter().map(|r| r.violation).fold(0.0, f64::max),
            held_instants: self.rows.iter().filter(|r| r.held).count(),
            mean_solve_ms: solves.iter().sum::<f64>() / solves.len().max(1) as f64,
            max_solve_ms: solves.iter().copied().fold(0.0, f64::max),
        }
    }
}

fn bound_violation(bounds: &[ChannelBound], x: &[f64], y: &[f64]) -> f64 {
    bounds
        .iter()
        .map(|b| {
            let v = match b.channel {
                Channel::State(i) => x[i],
                Channel::Output(i) => y[i],
            };
            (b.lower - v).max(v - b.upper).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Runs `scenario` on `plant` under `ctrl`. A failed solve holds the previous
/// input and is flagged in the log.
pub fn run_closed_loop(plant: &PlantModel, ctrl: &mut dyn Controller, scenario: &Scenario) -> Result<ClosedLoopLog> {
    scenario.validate()?;
    if scenario.initial_input.len() != plant.n_u() {
        return Err(Error::Shape(format!("scenario has {} inputs, plant has {}", scenario.initial_input.len(), plant.n_u())));
    }
    if let Some(dt) = ctrl.dt() {
        if (dt - scenario.dt).abs() > 1e-12 * dt.abs().max(1.0) {
            return Err(Error::Config(format!("controller sampling interval {dt} differs from scenario dt {}", scenario.dt)));
        }
    }
    let n_y = plant.n_y();
    let n = ctrl.n_delays();
    let mut x = steady_state(plant, &scenario.initial_input, &initial_guess(plant))?;
    let mut u_prev = scenario.initial_input.clone();
    // The plant is at rest, so the warm-up buffer is the tiled steady output.
    let y0 = plant.output_vec(&x, &u_prev);
    let mut outputs: VecDeque<Vec<f64>> = std::iter::repeat_n(y0, n + 1).collect();
    let mut past_inputs: VecDeque<Vec<f64>> = std::iter::repeat_n(u_prev.clone(), n).collect();
    let mut ws = Rk4Workspace::new(plant.n_x());
    let mut previous: Option<MpcSolution> = None;
    let mut rows = Vec::with_capacity(scenario.n_instants());

    for k in 0..scenario.n_instants() {
        let t = k as f64 * scenario.dt;
        let y = plant.output_vec(&x, &u_prev);
        if k > 0 {
            outputs.pop_back();
            outputs.push_front(y.clone());
        }
        let mut values = Vec::with_capacity((n + 1) * n_y);
        outputs.iter().for_each(|o| values.extend_from_slice(o));
        let window = DelayWindow { values, n_delays: n };
        let past: Vec<Vec<f64>> = past_inputs.iter().cloned().collect();
        let problem = scenario.problem_at(t);
        let warm = if ctrl.warm_start() { previous.as_ref().map(MpcSolution::shifted) } else { None };

        let obs = Observation { window: &window, past_inputs: &past, state: &x };
        let started = Instant::now();
        let result = ctrl.solve(&obs, &problem, warm.as_deref());
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;

        let row = match result {
            Ok(sol) if sol.status != SolveStatus::Failed => {
                let r = LogRow {
                    k,
                    t,
                    y: y.clone(),
                    u: sol.inputs[0].clone(),
                    x: x.clone(),
                    yhat: Some(sol.predicted_outputs[0].clone()),
                    solve_ms,
                    iterations: sol.iterations,
                    objective: sol.objective,
                    violation: bound_violation(&scenario.channel_bounds, &x, &y),
                    held: false,
                };
                previous = Some(sol);
                r
            }
            failed => {
                let reason = match &failed {
                    Ok(_) => "solver reported failure".to_string(),
                    Err(e) => e.to_string(),
                };
                log::warn!("instant {k} (t = {t}): {reason}; holding previous input");
                LogRow {
                    k,
                    t,
                    y: y.clone(),
                    u: u_prev.clone(),
                    x: x.clone(),
                    yhat: None,
                    solve_ms,
                    iterations: 0,
                    objective: f64::NAN,
                    violation: bound_violation(&scenario.channel_bounds, &x, &y),
                    held: true,
                }
            }
        };
        let u = row.u.clone();
        rows.push(row);
        if k + 1 < scenario.n_instants() {
            advance(&**plant, &mut ws, &mut x, &u, scenario.dt, scenario.substeps)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SimulationDiverged { time: t + scenario.dt, index: 0, value: f64::NAN });
            }
        }
        if n > 0 {
            past_inputs.pop_back();
            past_inputs.push_front(u.clone());
        }
        u_prev = u;
    }
    Ok(ClosedLoopLog { controller: ctrl.name().to_string(), dt: scenario.dt, rows })
}
