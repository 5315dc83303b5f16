//! Run configuration: one TOML document with a section per pipeline stage.
//!
//! Every key has a default, unknown keys are rejected, and `paper_scale =
//! true` swaps the sampling and training defaults for the full protocol
//! before the file's own values are applied.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::closedloop::{OpenLoopTest, Scenario};
use crate::dynamics::PlantParams;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::mpc::SolverConfig;
use crate::sampling::SamplingConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    /// `column`, `linear`, `cstr` or `vdp`.
    pub name: String,
    /// Overrides of named plant parameters.
    pub params: PlantParams,
}

impl Default for PlantSection {
    fn default() -> Self {
        PlantSection { name: "column".into(), params: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Run directory; `--out` overrides it.
    pub out_dir: Option<PathBuf>,
    /// Dataset directory read by `train`; defaults to `<out>/dataset`.
    pub dataset: Option<PathBuf>,
    /// Checkpoint read by the evaluation commands; defaults to `<out>/best.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Linear-decoder checkpoint compared against in `eval-openloop` and
    /// added to `benchmark`.
    pub linear_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paper_scale: bool,
    pub plant: PlantSection,
    pub sampling: SamplingConfig,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub mpc: SolverConfig,
    pub scenario: Scenario,
    pub openloop: OpenLoopTest,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::scaled(false)
    }
}

impl RunConfig {
    /// Defaults at desk scale, or with the full sampling and training protocol.
    pub fn scaled(paper_scale: bool) -> Self {
        let (sampling, training) = if paper_scale {
            (SamplingConfig::paper_scale(), TrainConfig::paper_scale())
        } else {
            (SamplingConfig::default(), TrainConfig::default())
        };
        RunConfig {
            seed: 1,
            paper_scale,
            plant: PlantSection::default(),
            sampling,
            model: ModelSpec::default(),
            training,
            mpc: SolverConfig::default(),
            scenario: Scenario::default(),
            openloop: OpenLoopTest::default(),
            io: IoSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let paper = match user.get("paper_scale") {
            None => false,
            Some(toml::Value::Boolean(b)) => *b,
            Some(v) => return Err(Error::Config(format!("paper_scale must be a boolean, got {v}"))),
        };
        let mut merged = to_table(&RunConfig::scaled(paper))?;
        merge(&mut merged, user);
        let cfg: RunConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration next to a run's artifacts.
    pub fn freeze(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.mpc.validate()?;
        self.scenario.validate()?;
        let s = &self.sampling;
        if !(s.dt > 0.0) || s.substeps == 0 || s.n_steps == 0 || !(s.step_duration > 0.0) {
            return Err(Error::Config("sampling: dt, substeps, n_steps and step_duration must be positive".into()));
        }
        if s.window < 2 || s.stride == 0 {
            return Err(Error::Config("sampling: window must be at least 2 and stride at least 1".into()));
        }
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(Error::Config(format!("sampling.train_fraction must lie in (0, 1), got {}", s.train_fraction)));
        }
        Ok(())
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    match toml::Value::try_from(v).map_err(|e| Error::Config(e.to_string()))? {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("structs serialize to tables"),
    }
}

/// Overlays `user` onto `base`, recursing into tables. Keys absent from
/// `base` are kept so that deserialization can reject them.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !is_free_map(&k) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Tables that are values in their own right: free parameter maps and
/// enum-valued keys.
fn is_free_map(key: &str) -> bool {
    matches!(key, "params" | "tracked")
}

/// One documented configuration key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyDoc {
    pub key: &'static str,
    pub unit: &'static str,
    pub help: &'static str,
}

const fn doc(key: &'static str, unit: &'static str, help: &'static str) -> KeyDoc {
    KeyDoc { key, unit, help }
}

/// Every configuration key. Defaults come from [`RunConfig::default`].
pub const KEY_DOCS: &[KeyDoc] = &[
    doc("seed", "-", "master seed of all random streams; --seed overrides"),
    doc("paper_scale", "-", "use the full sampling and training protocol as defaults"),
    doc("plant.name", "-", "plant model: column, linear, cstr, vdp"),
    doc("plant.params", "-", "table of named plant parameter overrides"),
    doc("sampling.dt", "min", "sampling interval"),
    doc("sampling.substeps", "-", "RK4 steps per sampling interval"),
    doc("sampling.n_steps", "-", "number of random input steps"),
    doc("sampling.step_duration", "min", "duration of each input step"),
    doc("sampling.input_bounds", "raw input units", "[lo, hi] per input; plant default when empty"),
    doc("sampling.n_delays", "samples", "delay count N of the embedding"),
    doc("sampling.window", "samples", "snapshots per training window s"),
    doc("sampling.stride", "samples", "offset between window starts"),
    doc("sampling.steady_windows", "-", "add one steady window per distinct input level"),
    doc("sampling.train_fraction", "-", "share of windows used for training"),
    doc("sampling.embed_inputs", "-", "append the N latest inputs to the delay vector"),
    doc("sampling.bound_slack", "state units", "tolerated excursion beyond physical state bounds"),
    doc("model.n_z", "-", "latent dimension"),
    doc("model.encoder_hidden", "neurons", "hidden layer sizes of the encoder"),
    doc("model.decoder_hidden", "neurons", "hidden layer sizes of the nonlinear decoder"),
    doc("model.decoder", "-", "nonlinear or linear"),
    doc("model.structure", "-", "latent transition layout: diagonal, block_diagonal, dense"),
    doc("model.linear_decoder_bias", "-", "constant offset in the linear decoder"),
    doc("model.a_init", "-", "range of the initial diagonal transition entries"),
    doc("training.epochs", "-", "passes over the training windows"),
    doc("training.batch_size", "windows", "windows per gradient step"),
    doc("training.learning_rate", "-", "Adam step size"),
    doc("training.beta1", "-", "Adam first-moment decay"),
    doc("training.beta2", "-", "Adam second-moment decay"),
    doc("training.epsilon", "-", "Adam denominator offset"),
    doc("training.validation_every", "epochs", "validation interval"),
    doc("training.grad_clip", "-", "global gradient-norm clip; off when unset"),
    doc("training.multi_step_weight", "-", "weight of the multi-step loss term"),
    doc("training.cosine_decay", "-", "cosine learning-rate decay to zero"),
    doc("training.log_every", "epochs", "progress log interval; 0 disables"),
    doc("mpc.max_iterations", "-", "inner iterations per penalty weight"),
    doc("mpc.tolerance", "scaled input units", "projected-gradient infinity-norm tolerance"),
    doc("mpc.penalty_initial", "-", "first weight of the bound-violation penalty"),
    doc("mpc.penalty_growth", "-", "penalty weight factor between outer rounds"),
    doc("mpc.penalty_max", "-", "largest penalty weight"),
    doc("mpc.violation_tolerance", "scaled units squared", "summed squared violation accepted as feasible"),
    doc("mpc.backtrack", "-", "step-size reduction factor of the line search"),
    doc("mpc.max_backtracks", "-", "line-search trials per iteration"),
    doc("mpc.initial_lipschitz", "-", "first curvature estimate; the first trial step is its inverse"),
    doc("mpc.momentum", "-", "Nesterov extrapolation with restart"),
    doc("mpc.warm_start", "-", "start from the shifted previous solution"),
    doc("scenario.initial_input", "raw input units", "the plant starts at rest under this input"),
    doc("scenario.setpoints", "[min, output units]", "piecewise-constant schedule of the tracked channel"),
    doc("scenario.tracked", "-", "tracked channel, e.g. { output = 0 }"),
    doc("scenario.tracking_weight", "-", "weight of the tracking term"),
    doc("scenario.duration", "min", "closed-loop run length"),
    doc("scenario.dt", "min", "controller sampling interval"),
    doc("scenario.substeps", "-", "RK4 steps per interval of the simulated plant"),
    doc("scenario.horizon", "samples", "prediction and control horizon"),
    doc("scenario.input_bounds", "raw input units", "[lo, hi] per input"),
    doc("scenario.channel_bounds", "raw channel units", "soft bounds: { channel, lower, upper }"),
    doc("scenario.controller", "-", "koopman_nmpc, koopman_lmpc or ideal_nmpc"),
    doc("openloop.initial_input", "raw input units", "the plant starts at rest under this input"),
    doc("openloop.segments", "[min, raw input units]", "step test: { duration, input } per segment"),
    doc("openloop.dt", "min", "sampling interval of the test"),
    doc("openloop.substeps", "-", "RK4 steps per interval"),
    doc("openloop.plateau_min", "min", "segments at least this long count as plateaus"),
    doc("openloop.impurity_state", "-", "state reported as log10(1 - x); unset disables"),
    doc("io.out_dir", "path", "run directory; --out overrides"),
    doc("io.dataset", "path", "dataset read by train; default <out>/dataset"),
    doc("io.checkpoint", "path", "model read by evaluation commands; default <out>/best.ckpt"),
    doc("io.linear_checkpoint", "path", "linear-decoder model for comparisons"),
];

/// Default of `key` rendered as TOML, or `unset`.
pub fn default_value(key: &str) -> String {
    let table = to_table(&RunConfig::default()).expect("defaults serialize");
    let mut node = toml::Value::Table(table);
    for part in key.split('.') {
        match node.get(part) {
            Some(v) => node = v.clone(),
            None => return "unset".into(),
        }
    }
    match node {
        toml::Value::Table(t) if t.is_empty() => "{}".into(),
        v => v.to_string(),
    }
}

/// Help text listing every key with its default and unit.
pub fn describe_keys() -> String {
    let mut out = String::from("Configuration keys (TOML; section.key = default [unit]):\n");
    for d in KEY_DOCS {
        out.push_str(&format!("  {:<28} = {:<24} [{}]\n      {}\n", d.key, default_value(d.key), d.unit, d.help));
    }
    out
}
