use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{fmt17, simulate_from, steady_state, InputProfile, PlantModel, SimOptions, COLUMN_BASE_INPUT};
use crate::error::{Error, Result};
use crate::model::KoopmanModel;
use crate::sampling::{channel_names, initial_guess, DelayWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub duration: f64,
    pub input: Vec<f64>,
}

/// A step test started from steady state under `initial_input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpenLoopTest {
    pub initial_input: Vec<f64>,
    pub segments: Vec<Segment>,
    pub dt: f64,
    pub substeps: usize,
    /// Segments at least this long count as plateaus for the offset metric.
    pub plateau_min: f64,
    /// State whose complement `1 - x` is reported on a log scale.
    pub impurity_state: Option<usize>,
}

impl Default for OpenLoopTest {
    /// Feed step followed by a reflux step on the surrogate column.
    fn default() -> Self {
        OpenLoopTest {
            initial_input: COLUMN_BASE_INPUT.to_vec(),
            segments: vec![
                Segment { duration: 20.0, input: vec![0.8, 1.0] },
                Segment { duration: 120.0, input: vec![0.8, 1.2] },
                Segment { duration: 120.0, input: vec![0.9, 1.2] },
            ],
            dt: 2.0,
            substeps: 20,
            plateau_min: 60.0,
            impurity_state: Some(11),
        }
    }
}

impl OpenLoopTest {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    fn profile(&self) -> Result<InputProfile> {
        let mut t = 0.0;
        let mut breaks = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            breaks.push(t);
            t += s.duration;
        }
        InputProfile::new(breaks, self.segments.iter().map(|s| s.input.clone()).collect())
    }

    /// End times of segments long enough to count as plateaus.
    pub fn plateau_ends(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut ends = Vec::new();
        for s in &self.segments {
            t += s.duration;
            if s.duration + 1e-9 >= self.plateau_min {
                ends.push(t);
            }
        }
        ends
    }
}

/// Prediction error of one channel over the test, raw units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelError {
    pub name: String,
    pub rmse: f64,
    pub max_error: f64,
    /// `rmse / mean |truth|`.
    pub relative_rmse: f64,
    /// `max - min` of the true signal (1 when constant).
    pub range: f64,
    /// `|prediction - truth|` at the end of each plateau.
    pub plateau_offsets: Vec<f64>,
    /// Last plateau offset divided by `range`.
    pub final_offset_relative: f64,
    /// First prediction step with a non-finite value.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenLoopReport {
    pub outputs: Vec<ChannelError>,
    pub states: Vec<ChannelError>,
    pub plateau_ends: Vec<f64>,
    #[serde(skip)]
    pub times: Vec<f64>,
    /// Stacked `[x; y]` per sample `1..=K`.
    #[serde(skip)]
    pub truth: Vec<Vec<f64>>,
    #[serde(skip)]
    pub predicted: Vec<Vec<f64>>,
    #[serde(skip)]
    pub names: Vec<String>,
    #[serde(skip)]
    pub impurity_state: Option<usize>,
}

impl OpenLoopReport {
    pub fn diverged(&self) -> bool {
        self.outputs.iter().chain(&self.states).any(|c| c.diverged_at.is_some())
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelError> {
        self.outputs.iter().chain(&self.states).find(|c| c.name == name)
    }

    /// `t` then `<name>_true,<name>_pred` per channel, and the log10 impurity
    /// pair when configured.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        for n in &self.names {
            header.push(format!("{n}_true"));
            header.push(format!("{n}_pred"));
        }
        if self.impurity_state.is_some() {
            header.extend(["log10_impurity_true".to_string(), "log10_impurity_pred".into()]);
        }
        wr.write_record(&header)?;
        for ((t, tr), pr) in self.times.iter().zip(&self.truth).zip(&self.predicted) {
            let mut rec = vec![fmt17(*t)];
            for (a, b) in tr.iter().zip(pr) {
                rec.push(fmt17(*a));
                rec.push(fmt17(*b));
            }
            if let Some(i) = self.impurity_state {
                rec.push(fmt17((1.0 - tr[i]).log10()));
                rec.push(fmt17((1.0 - pr[i]).log10()));
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Simulates the test on the plant and rolls the model across it from the
/// initial delay window alone.
pub fn evaluate_openloop(model: &KoopmanModel, plant: &PlantModel, test: &OpenLoopTest) -> Result<OpenLoopReport> {
    let m = &model.meta;
    if plant.n_u() != m.n_u || plant.n_x() != m.n_x || plant.n_y() != m.n_y {
        return Err(Error::Shape("model and plant dimensions differ".into()));
    }
    if (test.dt - m.dt).abs() > 1e-12 * m.dt.abs().max(1.0) {
        return Err(Error::Config(format!("test dt {} differs from model dt {}", test.dt, m.dt)));
    }
    if test.segments.is_empty() {
        return Err(Error::Config("open-loop test needs at least one segment".into()));
    }
    let x0 = steady_state(plant, &test.initial_input, &initial_guess(plant))?;
    let profile = test.profile()?;
    let opts = SimOptions { substeps: test.substeps, ..SimOptions::default() };
    let traj = simulate_from(plant, &x0, &test.initial_input, &profile, 0.0, test.dt, test.duration(), opts)?;
    let k_max = traj.len() - 1;
    if k_max == 0 {
        return Err(Error::Config("open-loop test is shorter than one sample".into()));
    }

    let raw = DelayWindow::tiled(&traj.outputs[0], m.n_delays);
    let past = vec![test.initial_input.clone(); m.n_delays];
    let chi = model.scale_chi(&raw, Some(&past))?;
    let n_out = m.n_out();
    let mut predicted = vec![vec![f64::NAN; n_out]; k_max];
    let mut z = model.encode(&chi)?;
    for k in 0..k_max {
        let u = model.scaling.scale_inputs(&traj.inputs[k]);
        z = match model.latent_step(&z, &u) {
            Ok(z) if z.iter().all(|v| v.is_finite()) => z,
            _ => break,
        };
        let (xs, ys) = model.decode(&z)?;
        let mut row = model.scaling.unscale_states(&xs);
        row.extend(model.scaling.unscale_outputs(&ys));
        predicted[k] = row;
    }
    let truth: Vec<Vec<f64>> = (1..=k_max).map(|k| [traj.states[k].clone(), traj.outputs[k].clone()].concat()).collect();
    let times: Vec<f64> = (1..=k_max).map(|k| traj.time(k)).collect();
    let names = channel_names(plant);
    let all_names: Vec<String> = names.states.iter().chain(&names.outputs).cloned().collect();
    let plateau_ends = test.plateau_ends();
    let plateau_idx: Vec<usize> =
        plateau_ends.iter().filter_map(|te| times.iter().position(|t| (t - te).abs() < 1e-6 * test.dt)).collect();

    let channel = |j: usize| -> ChannelError {
        let tr: Vec<f64> = truth.iter().map(|r| r[j]).collect();
        let pr: Vec<f64> = predicted.iter().map(|r| r[j]).collect();
        let diverged_at = pr.iter().position(|v| !v.is_finite()).map(|k| k + 1);
        let err: Vec<f64> = tr.iter().zip(&pr).map(|(a, b)| (b - a).abs()).collect();
        let n = err.len() as f64;
        let (rmse, max_error) = if diverged_at.is_some() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            ((err.iter().map(|e| e * e).sum::<f64>() / n).sqrt(), err.iter().copied().fold(0.0, f64::max))
        };
        let mean_abs = tr.iter().map(|v| v.abs()).sum::<f64>() / n;
        let (lo, hi) = tr.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        let range = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
        let plateau_offsets: Vec<f64> = plateau_idx.iter().map(|&k| err[k]).collect();
        let last = plateau_offsets.last().copied().unwrap_or(err[err.len() - 1]);
        ChannelError {
            name: all_names[j].clone(),
            rmse,
            max_error,
            relative_rmse: rmse / mean_abs.max(f64::MIN_POSITIVE),
            range,
            plateau_offsets,
            final_offset_relative: last / range,
            diverged_at,
        }
    };
    Ok(OpenLoopReport {
        states: (0..m.n_x).map(channel).collect(),
        outputs: (m.n_x..n_out).map(channel).collect(),
        plateau_ends,
        times,
        truth,
        predicted,
        names: all_names,
        impurity_state: test.impurity_state.filter(|&i| i < m.n_x),
    })
}
