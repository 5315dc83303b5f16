//! Pipeline stages as run by the command-line tool. Each stage reads its
//! inputs from the run directory (or the paths in `io`) and writes its
//! artifacts there, together with the resolved configuration.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::closedloop::{
    benchmark_cpu, evaluate_openloop, run_closed_loop, BenchmarkTable, ClosedLoopLog, ClosedLoopSummary, Controller,
    ControllerKind, IdealController, KoopmanController, OpenLoopReport,
};
use crate::config::RunConfig;
use crate::dynamics::{make_plant, PlantModel};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, KoopmanModel};
use crate::mpc::PlantPredictor;
use crate::sampling::{generate_dataset, load_dataset, save_dataset, Dataset};
use crate::training::{train, train_from, TrainReport};

/// Relative RMSE bound per measured output in the open-loop test.
pub const MAX_RELATIVE_RMSE: f64 = 0.05;
/// Final-plateau offset bound, as a share of the signal range.
pub const MAX_FINAL_OFFSET: f64 = 0.01;

pub fn plant(cfg: &RunConfig) -> Result<PlantModel> {
    make_plant(&cfg.plant.name, &cfg.plant.params)
}

pub fn dataset_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.io.dataset.clone().unwrap_or_else(|| out.join("dataset"))
}

pub fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.io.checkpoint.clone().unwrap_or_else(|| out.join("best.ckpt"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub plant: String,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub steady_windows: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub n_u: usize,
    /// Raw range of every input, state and output channel.
    pub channels: Vec<ChannelRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl DatasetSummary {
    pub fn of(ds: &Dataset) -> Self {
        let sc = &ds.scaling;
        DatasetSummary {
            plant: ds.meta.plant.clone(),
            train_windows: ds.train.len(),
            validation_windows: ds.validation.len(),
            steady_windows: ds.train.iter().chain(&ds.validation).filter(|w| w.is_steady).count(),
            n_x: ds.n_x(),
            n_y: ds.n_y(),
            n_u: ds.n_u(),
            channels: sc
                .inputs
                .iter()
                .chain(&sc.states)
                .chain(&sc.outputs)
                .map(|c| ChannelRange { name: c.name.clone(), min: c.inverse(0.0), max: c.inverse(1.0) })
                .collect(),
        }
    }
}

/// Simulates the plant under random steps and stores the windowed dataset.
pub fn sample(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    cfg.freeze(out)?;
    let plant = plant(cfg)?;
    let ds = generate_dataset(&plant, &cfg.plant.params, &cfg.sampling, cfg.seed)?;
    let dir = dataset_dir(cfg, out);
    save_dataset(&dir, &ds)?;
    let summary = DatasetSummary::of(&ds);
    info!("{} training and {} validation windows in {}", summary.train_windows, summary.validation_windows, dir.display());
    write_json(&out.join("dataset_summary.json"), &summary)?;
    Ok(ds)
}

/// Trains a model on the stored dataset, or continues from `resume`.
pub fn train_model(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<(KoopmanModel, TrainReport)> {
    cfg.freeze(out)?;
    let ds = load_dataset(&dataset_dir(cfg, out))?;
    let (model, report) = match resume {
        Some(path) => {
            let model = load_checkpoint(path)?;
            info!("resuming from {}", path.display());
            train_from(model, &ds, &cfg.training, cfg.seed)?
        }
        None => train(&ds, &cfg.model, &cfg.training, cfg.seed)?,
    };
    save_checkpoint(&model, &out.join("best.ckpt"))?;
    write_json(&out.join("report.json"), &report)?;
    report.write_losses_csv(BufWriter::new(File::create(out.join("losses.csv"))?))?;
    report.write_timing(File::create(out.join("timing.json"))?)?;
    info!("best validation loss {:.4e} at epoch {}", report.best_val_loss, report.best_epoch);
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenLoopOutcome {
    pub model: OpenLoopReport,
    pub linear: Option<OpenLoopReport>,
}

impl OpenLoopOutcome {
    /// Final-plateau offset of the impurity state, raw units.
    pub fn impurity_offset(report: &OpenLoopReport) -> Option<f64> {
        let i = report.impurity_state?;
        report.states.get(i)?.plateau_offsets.last().copied()
    }

    /// Violated accuracy requirements, empty when all hold.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.model.outputs {
            if !(c.relative_rmse < MAX_RELATIVE_RMSE) {
                out.push(format!("{}: relative RMSE {:.4} >= {MAX_RELATIVE_RMSE}", c.name, c.relative_rmse));
            }
            if !(c.final_offset_relative < MAX_FINAL_OFFSET) {
                out.push(format!("{}: final offset {:.4} of range >= {MAX_FINAL_OFFSET}", c.name, c.final_offset_relative));
            }
        }
        if let Some(lin) = &self.linear {
            match (Self::impurity_offset(&self.model), Self::impurity_offset(lin)) {
                (Some(a), Some(b)) if a < b => {}
                (Some(a), Some(b)) => out.push(format!("impurity offset {a:.3e} not below linear variant's {b:.3e}")),
                _ => {}
            }
        }
        out
    }
}

/// Open-loop step test of the trained model, and of the linear-decoder
/// model when `io.linear_checkpoint` is set.
pub fn eval_openloop(cfg: &RunConfig, out: &Path) -> Result<OpenLoopOutcome> {
    cfg.freeze(out)?;
    let plant = plant(cfg)?;
    let model = load_checkpoint(&checkpoint_path(cfg, out))?;
    let report = evaluate_openloop(&model, &plant, &cfg.openloop)?;
    report.write_csv(BufWriter::new(File::create(out.join("openloop.csv"))?))?;
    let linear = match &cfg.io.linear_checkpoint {
        Some(path) => {
            let lin = load_checkpoint(path)?;
            let r = evaluate_openloop(&lin, &plant, &cfg.openloop)?;
            r.write_csv(BufWriter::new(File::create(out.join("openloop_linear.csv"))?))?;
            Some(r)
        }
        None => None,
    };
    let outcome = OpenLoopOutcome { model: report, linear };
    write_json(&out.join("openloop.json"), &outcome)?;
    if let Some(step) = outcome.model.outputs.iter().chain(&outcome.model.states).filter_map(|c| c.diverged_at).min() {
        return Err(Error::RolloutDiverged { step });
    }
    Ok(outcome)
}

fn ideal_controller(cfg: &RunConfig, plant: &PlantModel, model: &KoopmanModel) -> IdealController {
    IdealController {
        predictor: PlantPredictor {
            plant: plant.clone(),
            dt: cfg.scenario.dt,
            substeps: cfg.scenario.substeps,
            scaling: model.scaling.clone(),
        },
        cfg: cfg.mpc.clone(),
    }
}

/// Closed-loop run of the configured scenario.
pub fn run_mpc(cfg: &RunConfig, out: &Path) -> Result<(ClosedLoopLog, ClosedLoopSummary)> {
    cfg.freeze(out)?;
    let plant = plant(cfg)?;
    let model = load_checkpoint(&checkpoint_path(cfg, out))?;
    let sc = &cfg.scenario;
    let log = match sc.controller {
        ControllerKind::IdealNmpc => run_closed_loop(&plant, &mut ideal_controller(cfg, &plant, &model), sc)?,
        kind => {
            let linear = kind == ControllerKind::KoopmanLmpc;
            if linear && !model.is_linear() {
                return Err(Error::Config("koopman_lmpc needs a model with a linear decoder".into()));
            }
            run_closed_loop(&plant, &mut KoopmanController { model: &model, cfg: cfg.mpc.clone(), linear }, sc)?
        }
    };
    let summary = log.summary(sc);
    log.write_csv(BufWriter::new(File::create(out.join("closedloop.csv"))?))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok((log, summary))
}

/// Solver wall time of the selected controllers on the configured scenario,
/// run one after another. An empty selection means Koopman NMPC, Koopman
/// LMPC when `io.linear_checkpoint` is set, and ideal NMPC.
pub fn benchmark(cfg: &RunConfig, out: &Path, select: &[ControllerKind]) -> Result<BenchmarkTable> {
    cfg.freeze(out)?;
    let plant = plant(cfg)?;
    let model = load_checkpoint(&checkpoint_path(cfg, out))?;
    let linear = cfg.io.linear_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let kinds: Vec<ControllerKind> = if select.is_empty() {
        let mut k = vec![ControllerKind::KoopmanNmpc];
        if linear.is_some() {
            k.push(ControllerKind::KoopmanLmpc);
        }
        k.push(ControllerKind::IdealNmpc);
        k
    } else {
        select.to_vec()
    };
    let mut boxed: Vec<Box<dyn Controller + '_>> = Vec::with_capacity(kinds.len());
    for kind in kinds {
        boxed.push(match kind {
            ControllerKind::KoopmanNmpc => Box::new(KoopmanController { model: &model, cfg: cfg.mpc.clone(), linear: false }),
            ControllerKind::KoopmanLmpc => {
                let m = linear
                    .as_ref()
                    .ok_or_else(|| Error::Config("koopman_lmpc benchmark needs io.linear_checkpoint".into()))?;
                Box::new(KoopmanController { model: m, cfg: cfg.mpc.clone(), linear: true })
            }
            ControllerKind::IdealNmpc => Box::new(ideal_controller(cfg, &plant, &model)),
        });
    }
    let mut ctrls: Vec<&mut dyn Controller> = boxed.iter_mut().map(|b| &mut **b as &mut dyn Controller).collect();
    let table = benchmark_cpu(&plant, &mut ctrls, std::slice::from_ref(&cfg.scenario))?;
    table.write_csv(BufWriter::new(File::create(out.join("benchmark.csv"))?))?;
    let mut text = table.to_string();
    if let Some(s) = table.speedup(ControllerKind::KoopmanNmpc.as_str()) {
        text.push_str(&format!("koopman_nmpc speedup over ideal_nmpc: {s:.2}x\n"));
    }
    std::fs::write(out.join("benchmark.txt"), text)?;
    Ok(table)
}
