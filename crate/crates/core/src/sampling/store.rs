use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, ScalingSpec, TrainingWindow};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

const SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WindowEntry {
    file: String,
    is_steady: bool,
    start: usize,
    t0: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    meta: DatasetMeta,
    scaling: ScalingSpec,
    train: Vec<WindowEntry>,
    validation: Vec<WindowEntry>,
}

/// Writes `meta.json` plus one CSV per window under `train/` and `val/`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let write_split = |sub: &str, windows: &[TrainingWindow]| -> Result<Vec<WindowEntry>> {
        let d = dir.join(sub);
        fs::create_dir_all(&d)?;
        windows
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let file = format!("{sub}/{i:04}.csv");
                w.record.write_csv(BufWriter::new(File::create(dir.join(&file))?))?;
                Ok(WindowEntry { file, is_steady: w.is_steady, start: w.start, t0: w.record.t0 })
            })
            .collect()
    };
    let train = write_split("train", &ds.train)?;
    let validation = write_split("val", &ds.validation)?;
    let manifest = Manifest { schema: SCHEMA, meta: ds.meta.clone(), scaling: ds.scaling.clone(), train, validation };
    let f = BufWriter::new(File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let f = BufReader::new(File::open(dir.join("meta.json"))?);
    let manifest: Manifest = serde_json::from_reader(f)?;
    if manifest.schema != SCHEMA {
        return Err(Error::Config(format!("dataset schema {} is not supported", manifest.schema)));
    }
    let (n_u, n_x, n_y) = (manifest.scaling.n_u(), manifest.scaling.n_x(), manifest.scaling.n_y());
    let meta = &manifest.meta;
    let read = |entries: &[WindowEntry]| -> Result<Vec<TrainingWindow>> {
        entries
            .iter()
            .map(|e| {
                let mut record = Trajectory::read_csv(BufReader::new(File::open(dir.join(&e.file))?), n_u, n_x, n_y)?;
                if record.len() != meta.n_delays + meta.window {
                    return Err(Error::Shape(format!(
                        "{} has {} rows, expected {}",
                        e.file,
                        record.len(),
                        meta.n_delays + meta.window
                    )));
                }
                record.dt = meta.dt;
                record.t0 = e.t0;
                Ok(TrainingWindow { record, n_delays: meta.n_delays, is_steady: e.is_steady, start: e.start })
            })
            .collect()
    };
    let train = read(&manifest.train)?;
    let validation = read(&manifest.validation)?;
    Ok(Dataset { train, validation, scaling: manifest.scaling, meta: manifest.meta })
}
