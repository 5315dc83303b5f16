//! Mini-batch Adam training of the reduced model with best-validation
//! checkpointing.

mod adam;
mod loss;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KoopmanModel, ModelMeta, ModelSpec};
use crate::rng::{self, Stream};
use crate::sampling::{batches, Dataset, ScaledWindow};

pub use adam::{AdamParams, AdamState};
pub use loss::{batch_loss, finite_difference_gradient, loss, loss_and_gradient, Gradient, LossParts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Validation loss is evaluated every this many epochs and after the last one.
    pub validation_every: usize,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Weight of the multi-step term relative to the one-step term.
    pub multi_step_weight: f64,
    /// Cosine learning-rate decay to zero over the run.
    pub cosine_decay: bool,
    /// Log progress every this many epochs (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_every: 1,
            grad_clip: None,
            multi_step_weight: 1.0,
            cosine_decay: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        TrainConfig { epochs: 10000, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("training.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("training.batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("training.learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("training.{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("training.epsilon must be positive".into());
        }
        if self.validation_every == 0 {
            return bad("training.validation_every must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("training.grad_clip must be positive".into());
            }
        }
        if !(self.multi_step_weight >= 0.0) {
            return bad("training.multi_step_weight must be non-negative".into());
        }
        Ok(())
    }

    fn adam(&self, epoch: usize) -> AdamParams {
        let lr = if self.cosine_decay {
            let t = epoch as f64 / self.epochs as f64;
            0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.learning_rate
        };
        AdamParams { learning_rate: lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

/// Loss history of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub train_one_step: Vec<f64>,
    pub train_multi_step: Vec<f64>,
    /// Validation loss per epoch where it was evaluated.
    pub val_loss: Vec<Option<f64>>,
    /// 1-based epoch of the returned parameters.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Not part of the numerical report; see [`TrainReport::write_timing`].
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss`; the last field is empty where no
    /// validation took place.
    pub fn write_losses_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "train_loss", "val_loss"])?;
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            let v = v.map(crate::dynamics::fmt17).unwrap_or_default();
            wr.write_record([(e + 1).to_string(), crate::dynamics::fmt17(*t), v])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_timing<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{{\"wall_time_s\": {}}}", self.wall_time_s)?;
        Ok(())
    }
}

fn model_meta(dataset: &Dataset, n_z: usize) -> ModelMeta {
    ModelMeta {
        n_delays: dataset.meta.n_delays,
        n_z,
        n_x: dataset.n_x(),
        n_y: dataset.n_y(),
        n_u: dataset.n_u(),
        dt: dataset.meta.dt,
        embed_inputs: dataset.meta.embed_inputs,
    }
}

/// Builds a fresh model for `dataset` and trains it.
pub fn train(dataset: &Dataset, spec: &ModelSpec, cfg: &TrainConfig, seed: u64) -> Result<(KoopmanModel, TrainReport)> {
    cfg.validate()?;
    let model = KoopmanModel::new(spec, model_meta(dataset, spec.n_z), dataset.scaling.clone(), seed)?;
    train_from(model, dataset, cfg, seed)
}

/// The same pipeline with a single linear decoder map.
pub fn train_linear_variant(
    dataset: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(KoopmanModel, TrainReport)> {
    train(dataset, &spec.linear_variant(), cfg, seed)
}

/// Continues training from the given parameters with a fresh optimizer.
pub fn train_from(mut model: KoopmanModel, dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(KoopmanModel, TrainReport)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.meta.embed_inputs != model.meta.embed_inputs || dataset.meta.n_delays != model.meta.n_delays {
        return Err(Error::Shape("model delay layout differs from the dataset".into()));
    }
    let started = Instant::now();
    let train_set = dataset.scaled_train();
    let val_set = dataset.scaled_validation();
    let mut shuffle = rng::stream(seed, Stream::Shuffle);
    let mut params = model.params();
    let mut adam = AdamState::new(params.len());
    let mut report = TrainReport { best_val_loss: f64::INFINITY, ..TrainReport::default() };
    let mut best = params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut shuffle, &mut order);
        let hp = cfg.adam(epoch);
        let mut sums = LossParts::default();
        for batch in batches(&order, cfg.batch_size) {
            let views: Vec<&ScaledWindow> = batch.iter().map(|&i| &train_set[i]).collect();
            let (parts, grad) = match loss_and_gradient(&model, &views, cfg.multi_step_weight) {
                Ok(v) => v,
                Err(e) => return Err(diverged(e, epoch + 1, &model, &best, report, started)),
            };
            let n = views.len() as f64;
            sums.one_step += parts.one_step * n;
            sums.multi_step += parts.multi_step * n;
            sums.total += parts.total * n;
            let mut g = grad.flat();
            if let Some(c) = cfg.grad_clip {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > c {
                    g.iter_mut().for_each(|v| *v *= c / norm);
                }
            }
            adam.step(&mut params, &g, &hp);
            model.set_params(&params);
        }
        let n = train_set.len() as f64;
        report.train_loss.push(sums.total / n);
        report.train_one_step.push(sums.one_step / n);
        report.train_multi_step.push(sums.multi_step / n);

        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.validation_every == 0 || last {
            let val = if val_set.is_empty() {
                Ok(sums.total / n)
            } else {
                mean_loss(&model, &val_set, cfg.multi_step_weight, cfg.batch_size)
            };
            match val {
                Ok(v) => {
                    report.val_loss.push(Some(v));
                    if v < report.best_val_loss {
                        report.best_val_loss = v;
                        report.best_epoch = epoch + 1;
                        best.copy_from_slice(&params);
                    }
                }
                Err(e) => return Err(diverged(e, epoch + 1, &model, &best, report, started)),
            }
        } else {
            report.val_loss.push(None);
        }
        if cfg.log_every > 0 && (epoch + 1) % cfg.log_every == 0 {
            log::info!(
                "epoch {:>5}: train {:.3e} val {:.3e} (best {:.3e} @ {})",
                epoch + 1,
                sums.total / n,
                report.val_loss.last().copied().flatten().unwrap_or(f64::NAN),
                report.best_val_loss,
                report.best_epoch
            );
        }
    }
    model.set_params(&best);
    model.provenance.seed = seed;
    model.provenance.epochs += cfg.epochs;
    model.provenance.best_epoch = Some(report.best_epoch);
    model.provenance.best_validation_loss = Some(report.best_val_loss);
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Mean loss over a set of windows, evaluated in chunks.
pub fn mean_loss(model: &KoopmanModel, windows: &[ScaledWindow], multi_step_weight: f64, chunk: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for c in windows.chunks(chunk.max(1)) {
        let views: Vec<&ScaledWindow> = c.iter().collect();
        total += batch_loss(model, &views, multi_step_weight)?.total * c.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

fn diverged(e: Error, epoch: usize, model: &KoopmanModel, best: &[f64], mut report: TrainReport, started: Instant) -> Error {
    let reason = match e {
        Error::TrainingDiverged { reason, .. } => reason,
        other => other.to_string(),
    };
    report.wall_time_s = started.elapsed().as_secs_f64();
    let snapshot = if report.best_epoch > 0 {
        let mut m = model.clone();
        m.set_params(best);
        m.provenance.best_epoch = Some(report.best_epoch);
        m.provenance.best_validation_loss = Some(report.best_val_loss);
        Some(Box::new((m, report)))
    } else {
        None
    };
    Error::TrainingDiverged { epoch, reason, best: snapshot }
}

#[cfg(test)]
mod tests;
