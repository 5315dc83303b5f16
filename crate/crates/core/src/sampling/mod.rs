//! Excitation data, delay coordinates, training windows and scaling.
//!
//! A record is cut into windows of `s` consecutive samples. Every window
//! carries the `N` samples preceding it so the delay vector
//! `chi_k = [y_k; y_{k-1}; ...; y_{k-N}]` (newest first) can be formed at each
//! of its samples without fabricating pre-record history.

mod scaling;
mod store;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    simulate_from, steady_state, InputProfile, PlantModel, PlantParams, SimOptions, Trajectory, COLUMN_INPUT_BOUNDS,
};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub use scaling::{fit_scaling, ChannelNames, ChannelScale, LogChannels, ScalingSpec};
pub use store::{load_dataset, save_dataset};

/// Piecewise-constant excitation with i.i.d. uniform levels.
///
/// Levels are drawn step by step, input by input, from the seed's
/// excitation stream.
pub fn random_step_sequence(bounds: &[(f64, f64)], n_steps: usize, step_duration: f64, seed: u64) -> Result<InputProfile> {
    if n_steps == 0 {
        return Err(Error::Config("random_step_sequence needs at least one step".into()));
    }
    if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::Config(format!("input bound [{lo}, {hi}] is inverted")));
    }
    let mut rng = rng::stream(seed, Stream::Excitation);
    let levels = (0..n_steps)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng::uniform(&mut rng, lo, hi)).collect())
        .collect();
    InputProfile::steps(0.0, step_duration, levels)
}

/// Delay-coordinate vector, newest sample first.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayWindow {
    pub values: Vec<f64>,
    pub n_delays: usize,
}

impl DelayWindow {
    /// Block of the sample `lag` steps back.
    pub fn lag(&self, lag: usize, n_y: usize) -> &[f64] {
        &self.values[lag * n_y..(lag + 1) * n_y]
    }

    /// Steady history: the same output repeated `n_delays + 1` times.
    pub fn tiled(y: &[f64], n_delays: usize) -> Self {
        DelayWindow { values: y.repeat(n_delays + 1), n_delays }
    }
}

/// One delay window per sample from index `n_delays` on.
pub fn build_delay_windows(outputs: &[Vec<f64>], n_delays: usize) -> Result<Vec<DelayWindow>> {
    if outputs.len() < n_delays + 1 {
        return Err(Error::InsufficientHistory { needed: n_delays + 1, available: outputs.len() });
    }
    Ok((n_delays..outputs.len())
        .map(|k| {
            let values = (0..=n_delays).flat_map(|lag| outputs[k - lag].iter().copied()).collect();
            DelayWindow { values, n_delays }
        })
        .collect())
}

/// Delay window with the `n_delays` most recent held inputs appended,
/// `[u_{k-1}; ...; u_{k-N}]`, for the optional input-embedding variant.
fn embed_inputs(window: &mut DelayWindow, inputs: &[Vec<f64>], k: usize) {
    for lag in 1..=window.n_delays {
        window.values.extend_from_slice(&inputs[k - lag]);
    }
}

/// `s` consecutive snapshots plus the `n_delays` samples before them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    /// `n_delays + s` rows; the window proper starts at row `n_delays`.
    pub record: Trajectory,
    pub n_delays: usize,
    pub is_steady: bool,
    /// Index of the first window sample in the source record.
    pub start: usize,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.record.len() - self.n_delays
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `u_0 .. u_{s-2}`.
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.record.inputs[self.n_delays..self.record.len() - 1]
    }

    pub fn targets_x(&self) -> &[Vec<f64>] {
        &self.record.states[self.n_delays..]
    }

    pub fn targets_y(&self) -> &[Vec<f64>] {
        &self.record.outputs[self.n_delays..]
    }

    pub fn chi_sequence(&self, with_inputs: bool) -> Vec<DelayWindow> {
        let mut chis = build_delay_windows(&self.record.outputs, self.n_delays)
            .expect("training windows always carry their history");
        if with_inputs {
            for (j, chi) in chis.iter_mut().enumerate() {
                embed_inputs(chi, &self.record.inputs, self.n_delays + j);
            }
        }
        chis
    }

    /// Window in scaled units, laid out for batched network evaluation.
    pub fn scaled(&self, scaling: &ScalingSpec, with_inputs: bool) -> ScaledWindow {
        let s = self.len();
        let n_y = scaling.n_y();
        let n_u = scaling.n_u();
        let chis = self.chi_sequence(with_inputs);
        let d_chi = chis[0].values.len();
        let mut chi = Array2::zeros((s, d_chi));
        for (k, w) in chis.iter().enumerate() {
            for (j, v) in w.values.iter().enumerate() {
                let c = if j < (self.n_delays + 1) * n_y {
                    &scaling.outputs[j % n_y]
                } else {
                    &scaling.inputs[(j - (self.n_delays + 1) * n_y) % n_u]
                };
                chi[[k, j]] = c.forward(*v);
            }
        }
        let inputs = self.inputs();
        let mut u = Array2::zeros((s - 1, n_u));
        for (k, row) in inputs.iter().enumerate() {
            for (j, v) in scaling.scale_inputs(row).into_iter().enumerate() {
                u[[k, j]] = v;
            }
        }
        let n_x = scaling.n_x();
        let mut targets = Array2::zeros((s, n_x + n_y));
        for k in 0..s {
            for (j, v) in scaling.scale_states(&self.targets_x()[k]).into_iter().enumerate() {
                targets[[k, j]] = v;
            }
            for (j, v) in scaling.scale_outputs(&self.targets_y()[k]).into_iter().enumerate() {
                targets[[k, n_x + j]] = v;
            }
        }
        ScaledWindow { chi, inputs: u, targets }
    }
}

/// A training window in scaled units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledWindow {
    /// `s x d_chi` delay vectors.
    pub chi: Array2<f64>,
    /// `(s-1) x n_u` inputs.
    pub inputs: Array2<f64>,
    /// `s x (n_x + n_y)` stacked state/output targets.
    pub targets: Array2<f64>,
}

impl ScaledWindow {
    pub fn len(&self) -> usize {
        self.chi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of windows `window_dataset` produces for a record of `len` samples.
pub fn window_count(len: usize, s: usize, stride: usize, n_delays: usize) -> usize {
    if len < n_delays + s {
        0
    } else {
        (len - n_delays - s) / stride + 1
    }
}

/// Sliding windows of `s` samples every `stride` samples, starting at index `n_delays`.
pub fn window_dataset(record: &Trajectory, s: usize, stride: usize, n_delays: usize) -> Result<Vec<TrainingWindow>> {
    if s < 2 || stride == 0 {
        return Err(Error::Config("window length must be >= 2 and stride >= 1".into()));
    }
    if record.len() < n_delays + s {
        return Err(Error::InsufficientHistory { needed: n_delays + s, available: record.len() });
    }
    let count = window_count(record.len(), s, stride, n_delays);
    Ok((0..count)
        .map(|i| {
            let start = n_delays + i * stride;
            TrainingWindow { record: record.slice(start - n_delays, start + s), n_delays, is_steady: false, start }
        })
        .collect())
}

/// One constant window at the steady state of each input level.
pub fn augment_steady_windows(
    plant: &PlantModel,
    input_levels: &[Vec<f64>],
    s: usize,
    n_delays: usize,
    dt: f64,
    x_guess: &[f64],
) -> Result<Vec<TrainingWindow>> {
    input_levels
        .iter()
        .map(|u| {
            let x = steady_state(plant, u, x_guess)?;
            let y = plant.output_vec(&x, u);
            let mut record = Trajectory::new(dt, 0.0);
            for _ in 0..n_delays + s {
                record.push(u.clone(), x.clone(), y.clone());
            }
            Ok(TrainingWindow { record, n_delays, is_steady: true, start: 0 })
        })
        .collect()
}

/// Seeded shuffle, then split into (train, validation).
pub fn split_windows(
    mut windows: Vec<TrainingWindow>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainingWindow>, Vec<TrainingWindow>)> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = rng::stream(seed, Stream::Split);
    rng::shuffle(&mut rng, &mut windows);
    let n_train = ((windows.len() as f64 * train_fraction).round() as usize).clamp(1, windows.len());
    let validation = windows.split_off(n_train);
    Ok((windows, validation))
}

/// Consecutive index batches of `batch_size`; the last partial batch is kept.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Data-generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Sampling interval (plant time units; minutes for the column).
    pub dt: f64,
    /// RK4 steps per sampling interval.
    pub substeps: usize,
    /// Number of random input steps.
    pub n_steps: usize,
    /// Duration of each input step.
    pub step_duration: f64,
    /// Per-input excitation range; plant default when empty.
    pub input_bounds: Vec<[f64; 2]>,
    /// Delay count `N`.
    pub n_delays: usize,
    /// Snapshots per training window `s`.
    pub window: usize,
    pub stride: usize,
    /// Add one steady-state window per distinct input level.
    pub steady_windows: bool,
    pub train_fraction: f64,
    /// Append the `N` most recent inputs to the delay vector.
    pub embed_inputs: bool,
    /// Allowed excursion beyond physical state bounds.
    pub bound_slack: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            dt: 2.0,
            substeps: 20,
            n_steps: 60,
            step_duration: 120.0,
            input_bounds: Vec::new(),
            n_delays: 20,
            window: 60,
            stride: 10,
            steady_windows: true,
            train_fraction: 0.8,
            embed_inputs: false,
            bound_slack: 1e-3,
        }
    }
}

impl SamplingConfig {
    /// Protocol scale: 400 steps of 3 h.
    pub fn paper_scale() -> Self {
        SamplingConfig { n_steps: 400, step_duration: 180.0, ..SamplingConfig::default() }
    }

    pub fn bounds_for(&self, plant: &PlantModel) -> Result<Vec<(f64, f64)>> {
        if !self.input_bounds.is_empty() {
            if self.input_bounds.len() != plant.n_u() {
                return Err(Error::Config(format!(
                    "sampling.input_bounds has {} entries, plant has {} inputs",
                    self.input_bounds.len(),
                    plant.n_u()
                )));
            }
            return Ok(self.input_bounds.iter().map(|b| (b[0], b[1])).collect());
        }
        default_input_bounds(plant.name())
            .ok_or_else(|| Error::Config(format!("sampling.input_bounds required for plant `{}`", plant.name())))
    }
}

pub fn default_input_bounds(plant: &str) -> Option<Vec<(f64, f64)>> {
    match plant {
        "column" => Some(COLUMN_INPUT_BOUNDS.to_vec()),
        "linear" => Some(vec![(0.0, 1.0)]),
        "vdp" => Some(vec![(-1.0, 1.0)]),
        "cstr" => Some(vec![(5.0, 35.0)]),
        _ => None,
    }
}

/// Provenance stored alongside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dt: f64,
    pub n_delays: usize,
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
    pub embed_inputs: bool,
    pub plant: String,
    pub plant_params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainingWindow>,
    pub validation: Vec<TrainingWindow>,
    pub scaling: ScalingSpec,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n_u(&self) -> usize {
        self.scaling.n_u()
    }
    pub fn n_x(&self) -> usize {
        self.scaling.n_x()
    }
    pub fn n_y(&self) -> usize {
        self.scaling.n_y()
    }

    pub fn scaled_train(&self) -> Vec<ScaledWindow> {
        self.train.iter().map(|w| w.scaled(&self.scaling, self.meta.embed_inputs)).collect()
    }

    pub fn scaled_validation(&self) -> Vec<ScaledWindow> {
        self.validation.iter().map(|w| w.scaled(&self.scaling, self.meta.embed_inputs)).collect()
    }
}

pub fn channel_names(plant: &PlantModel) -> ChannelNames {
    ChannelNames { inputs: plant.input_names(), states: plant.state_names(), outputs: plant.output_names() }
}

pub fn log_channels(plant: &PlantModel) -> LogChannels {
    LogChannels { states: plant.log_states(), ..Default::default() }
}

/// Fits the scaling on the given windows.
pub fn fit_windows(windows: &[TrainingWindow], names: &ChannelNames, logs: &LogChannels) -> Result<ScalingSpec> {
    fit_scaling(
        windows.iter().flat_map(|w| w.record.inputs.iter().map(Vec::as_slice)),
        windows.iter().flat_map(|w| w.record.states.iter().map(Vec::as_slice)),
        windows.iter().flat_map(|w| w.record.outputs.iter().map(Vec::as_slice)),
        names,
        logs,
    )
}

/// Full data-generation protocol: random steps, one continuous record from
/// the steady state of the first level, sliding windows, steady windows,
/// seeded split and scaling fitted on the training part.
pub fn generate_dataset(plant: &PlantModel, params: &PlantParams, cfg: &SamplingConfig, seed: u64) -> Result<Dataset> {
    let bounds = cfg.bounds_for(plant)?;
    let profile = random_step_sequence(&bounds, cfg.n_steps, cfg.step_duration, seed)?;
    let levels = profile.levels().to_vec();
    let guess = initial_guess(plant);
    let x0 = steady_state(plant, &levels[0], &guess)?;
    let t_end = cfg.n_steps as f64 * cfg.step_duration - cfg.dt;
    let record = simulate_from(
        plant,
        &x0,
        &levels[0],
        &profile,
        0.0,
        cfg.dt,
        t_end,
        SimOptions { substeps: cfg.substeps, bound_slack: cfg.bound_slack },
    )?;
    let mut windows = window_dataset(&record, cfg.window, cfg.stride, cfg.n_delays)?;
    if cfg.steady_windows {
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        for l in &levels {
            if !distinct.contains(l) {
                distinct.push(l.clone());
            }
        }
        windows.extend(augment_steady_windows(plant, &distinct, cfg.window, cfg.n_delays, cfg.dt, &x0)?);
    }
    let (train, validation) = split_windows(windows, cfg.train_fraction, seed)?;
    let scaling = fit_windows(&train, &channel_names(plant), &log_channels(plant))?;
    Ok(Dataset {
        train,
        validation,
        scaling,
        meta: DatasetMeta {
            dt: cfg.dt,
            n_delays: cfg.n_delays,
            window: cfg.window,
            stride: cfg.stride,
            seed,
            embed_inputs: cfg.embed_inputs,
            plant: plant.name().to_string(),
            plant_params: params.clone(),
        },
    })
}

/// Starting point for steady-state searches: mid-range for bounded states.
pub fn initial_guess(plant: &PlantModel) -> Vec<f64> {
    match plant.state_bounds() {
        Some(b) => b.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
        None => vec![0.0; plant.n_x()],
    }
}
