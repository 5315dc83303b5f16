//! JSON checkpoints.
//!
//! Layout:
//! - `schema_version`: integer, currently 1.
//! - `meta`: `n_delays, n_z, n_x, n_y, n_u, dt, embed_inputs`, the latent
//!   `structure`, the `decoder` kind, the full `scaling` spec and training
//!   `provenance` (`seed, epochs, best_epoch, best_validation_loss`).
//! - `encoder`, `decoder`: `sizes` (layer widths), `bias` flag, `weights`
//!   (per layer, `in x out` row-major) and `biases` (per layer).
//! - `dynamics`: `a` in the structure's layout, `b` as `n_z x n_u` row-major.
//!
//! Floats are written with round-trip precision, so reloading is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DecoderKind, KoopmanModel, LatentDynamics, Mlp, ModelMeta, Provenance, Structure};
use crate::error::{Error, Result};
use crate::sampling::ScalingSpec;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MetaBlock {
    #[serde(flatten)]
    dims: ModelMeta,
    structure: Structure,
    decoder: DecoderKind,
    scaling: ScalingSpec,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct MlpBlock {
    sizes: Vec<usize>,
    bias: bool,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DynamicsBlock {
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    schema_version: u32,
    meta: MetaBlock,
    encoder: MlpBlock,
    dynamics: DynamicsBlock,
    decoder: MlpBlock,
}

fn mlp_block(m: &Mlp) -> MlpBlock {
    MlpBlock {
        sizes: m.sizes(),
        bias: m.bias,
        weights: m.weights.iter().map(|w| w.iter().copied().collect()).collect(),
        biases: m.biases.iter().map(|b| b.to_vec()).collect(),
    }
}

fn mlp_from_block(b: MlpBlock, what: &str) -> Result<Mlp> {
    let bad = |msg: String| Error::CheckpointFormat(format!("{what}: {msg}"));
    if b.sizes.len() < 2 || b.weights.len() != b.sizes.len() - 1 || b.biases.len() != b.weights.len() {
        return Err(bad("layer count does not match sizes".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (l, (w, bias)) in b.weights.into_iter().zip(b.biases).enumerate() {
        let (n_in, n_out) = (b.sizes[l], b.sizes[l + 1]);
        weights.push(Array2::from_shape_vec((n_in, n_out), w).map_err(|e| bad(format!("layer {l} weights: {e}")))?);
        if bias.len() != n_out {
            return Err(bad(format!("layer {l} has {} biases, expected {n_out}", bias.len())));
        }
        biases.push(Array1::from(bias));
    }
    Ok(Mlp { weights, biases, bias: b.bias })
}

pub fn write_checkpoint<W: Write>(model: &KoopmanModel, w: W) -> Result<()> {
    let doc = Document {
        schema_version: CHECKPOINT_VERSION,
        meta: MetaBlock {
            dims: model.meta.clone(),
            structure: model.dynamics.structure,
            decoder: model.decoder_kind,
            scaling: model.scaling.clone(),
            provenance: model.provenance.clone(),
        },
        encoder: mlp_block(&model.encoder),
        dynamics: DynamicsBlock { a: model.dynamics.a.clone(), b: model.dynamics.b.iter().copied().collect() },
        decoder: mlp_block(&model.decoder),
    };
    serde_json::to_writer_pretty(w, &doc)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<KoopmanModel> {
    let value: serde_json::Value =
        serde_json::from_reader(r).map_err(|e| Error::CheckpointFormat(format!("not a valid JSON document: {e}")))?;
    let version = value.get("schema_version").and_then(serde_json::Value::as_u64);
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::CheckpointFormat(format!(
            "unsupported schema version {version:?}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let doc: Document = serde_json::from_value(value).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let meta = doc.meta;
    let n_z = meta.dims.n_z;
    let b = Array2::from_shape_vec((n_z, meta.dims.n_u), doc.dynamics.b)
        .map_err(|e| Error::CheckpointFormat(format!("input matrix: {e}")))?;
    let dynamics = LatentDynamics::new(meta.structure, doc.dynamics.a, b, meta.dims.dt)
        .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let mut model = KoopmanModel::from_parts(
        mlp_from_block(doc.encoder, "encoder")?,
        dynamics,
        mlp_from_block(doc.decoder, "decoder")?,
        meta.decoder,
        meta.scaling,
        meta.dims,
    )
    .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    model.provenance = meta.provenance;
    Ok(model)
}

pub fn save_checkpoint(model: &KoopmanModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<KoopmanModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Loads and insists on a particular latent structure.
pub fn load_checkpoint_as(path: &Path, structure: Structure) -> Result<KoopmanModel> {
    let model = load_checkpoint(path)?;
    if model.dynamics.structure != structure {
        return Err(Error::StructureMismatch {
            found: model.dynamics.structure.as_str().into(),
            requested: structure.as_str().into(),
        });
    }
    Ok(model)
}
