//! Reduced model: delay-coordinate encoder, linear latent dynamics and a
//! nonlinear (Wiener-type) or linear decoder to the stacked `[x; y]`.
//!
//! Everything inside the model works in scaled units. The [`ScalingSpec`]
//! travels with the model so callers can convert at the boundary.

mod checkpoint;
mod latent;
mod mlp;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::sampling::{DelayWindow, ScalingSpec};

pub use checkpoint::{load_checkpoint, load_checkpoint_as, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use latent::{expm, logm, ContinuousDynamics, LatentDynamics, Stability, StabilityReport, Structure};
pub use mlp::{tanh, Mlp, MlpTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Network with hidden tanh layers (Wiener-type model).
    Nonlinear,
    /// Single affine map `C z (+ c)`.
    Linear,
}

/// Architecture of a model to be built and trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Latent dimension `n_z`.
    pub n_z: usize,
    pub encoder_hidden: Vec<usize>,
    /// Ignored for the linear decoder.
    pub decoder_hidden: Vec<usize>,
    pub decoder: DecoderKind,
    pub structure: Structure,
    /// Constant offset in the linear decoder.
    pub linear_decoder_bias: bool,
    /// Range the diagonal transition entries are initialised in.
    pub a_init: (f64, f64),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_z: 10,
            encoder_hidden: vec![50, 20],
            decoder_hidden: vec![20, 50],
            decoder: DecoderKind::Nonlinear,
            structure: Structure::Diagonal,
            linear_decoder_bias: true,
            a_init: (0.85, 0.999),
        }
    }
}

impl ModelSpec {
    /// Same encoder and latent size with a linear decoder.
    pub fn linear_variant(&self) -> Self {
        ModelSpec { decoder: DecoderKind::Linear, ..self.clone() }
    }

    /// Wide latent space with a linear decoder: `n_z = 50`, encoder (100, 75).
    pub fn extended_lifting() -> Self {
        ModelSpec { n_z: 50, encoder_hidden: vec![100, 75], decoder: DecoderKind::Linear, ..ModelSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_z == 0 {
            return Err(Error::Config("model.n_z must be positive".into()));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        let (lo, hi) = self.a_init;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("model.a_init must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Dimensions and sampling information fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub n_delays: usize,
    pub n_z: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub n_u: usize,
    pub dt: f64,
    pub embed_inputs: bool,
}

impl ModelMeta {
    pub fn chi_len(&self) -> usize {
        (self.n_delays + 1) * self.n_y + if self.embed_inputs { self.n_delays * self.n_u } else { 0 }
    }

    pub fn n_out(&self) -> usize {
        self.n_x + self.n_y
    }
}

/// Training provenance recorded in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub encoder: Mlp,
    pub dynamics: LatentDynamics,
    pub decoder: Mlp,
    pub decoder_kind: DecoderKind,
    pub scaling: ScalingSpec,
    pub meta: ModelMeta,
    pub provenance: Provenance,
}

/// Result of a model rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `z_0 .. z_K`.
    pub latent: Vec<Vec<f64>>,
    /// `x_1 .. x_K`.
    pub states: Vec<Vec<f64>>,
    /// `y_1 .. y_K`.
    pub outputs: Vec<Vec<f64>>,
}

impl KoopmanModel {
    /// Fresh model: Glorot encoder/decoder weights, `B` from the same
    /// stream, diagonal entries evenly spaced in log decay rate.
    pub fn new(spec: &ModelSpec, meta: ModelMeta, scaling: ScalingSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if meta.n_z != spec.n_z {
            return Err(Error::Shape(format!("meta n_z {} differs from spec n_z {}", meta.n_z, spec.n_z)));
        }
        if (scaling.n_u(), scaling.n_x(), scaling.n_y()) != (meta.n_u, meta.n_x, meta.n_y) {
            return Err(Error::Shape("scaling dimensions differ from model dimensions".into()));
        }
        let mut r = rng::stream(seed, Stream::WeightInit);
        let mut enc_sizes = vec![meta.chi_len()];
        enc_sizes.extend(&spec.encoder_hidden);
        enc_sizes.push(spec.n_z);
        let encoder = Mlp::glorot(&enc_sizes, true, &mut r);
        let n_z = spec.n_z;
        let diag = initial_poles(n_z, spec.a_init);
        let a = match spec.structure {
            Structure::Diagonal => diag,
            // Pairs start as real double poles (no rotation).
            Structure::BlockDiagonal => {
                let mut a = vec![0.0; n_z];
                let mut i = 0;
                while i + 1 < n_z {
                    a[i] = diag[i];
                    i += 2;
                }
                if i < n_z {
                    a[i] = diag[i];
                }
                a
            }
            Structure::Dense => {
                let mut a = vec![0.0; n_z * n_z];
                for i in 0..n_z {
                    a[i * n_z + i] = diag[i];
                }
                a
            }
        };
        let lim = (6.0 / (n_z + meta.n_u) as f64).sqrt();
        let b = Array2::from_shape_simple_fn((n_z, meta.n_u), || rng::uniform(&mut r, -lim, lim));
        let dynamics = LatentDynamics::new(spec.structure, a, b, meta.dt)?;
        let decoder = match spec.decoder {
            DecoderKind::Nonlinear => {
                let mut sizes = vec![n_z];
                sizes.extend(&spec.decoder_hidden);
                sizes.push(meta.n_out());
                Mlp::glorot(&sizes, true, &mut r)
            }
            DecoderKind::Linear => Mlp::glorot(&[n_z, meta.n_out()], spec.linear_decoder_bias, &mut r),
        };
        Ok(KoopmanModel {
            encoder,
            dynamics,
            decoder,
            decoder_kind: spec.decoder,
            scaling,
            meta,
            provenance: Provenance { seed, ..Provenance::default() },
        })
    }

    /// Assembles a model from explicit parts, checking shapes.
    pub fn from_parts(
        encoder: Mlp,
        dynamics: LatentDynamics,
        decoder: Mlp,
        decoder_kind: DecoderKind,
        scaling: ScalingSpec,
        meta: ModelMeta,
    ) -> Result<Self> {
        let m = KoopmanModel { encoder, dynamics, decoder, decoder_kind, scaling, meta, provenance: Provenance::default() };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let meta = &self.meta;
        let problems = [
            (self.encoder.n_in() == meta.chi_len(), "encoder input size differs from the delay-vector length"),
            (self.encoder.n_out() == meta.n_z, "encoder output size differs from n_z"),
            (self.dynamics.n_z() == meta.n_z, "latent dynamics size differs from n_z"),
            (self.dynamics.n_u() == meta.n_u, "input matrix width differs from n_u"),
            (self.decoder.n_in() == meta.n_z, "decoder input size differs from n_z"),
            (self.decoder.n_out() == meta.n_out(), "decoder output size differs from n_x + n_y"),
            (
                self.decoder_kind == DecoderKind::Nonlinear || self.decoder.n_layers() == 1,
                "linear decoder must be a single layer",
            ),
            (
                (self.scaling.n_u(), self.scaling.n_x(), self.scaling.n_y()) == (meta.n_u, meta.n_x, meta.n_y),
                "scaling dimensions differ from model dimensions",
            ),
        ];
        match problems.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Shape((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn is_linear(&self) -> bool {
        self.decoder_kind == DecoderKind::Linear
    }

    /// `Psi(chi)` for a delay window in scaled units.
    pub fn encode(&self, chi: &DelayWindow) -> Result<Vec<f64>> {
        self.encoder.forward(&chi.values)
    }

    /// Stacked `[x; y]` in scaled units.
    pub fn decode(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut out = self.decoder.forward(z)?;
        let y = out.split_off(self.meta.n_x);
        Ok((out, y))
    }

    pub fn latent_step(&self, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.dynamics.step(z, u)
    }

    /// Encodes `chi0`, iterates the latent dynamics over `inputs` and decodes
    /// every `z_k`, `k >= 1`. Everything in scaled units.
    pub fn rollout(&self, chi0: &DelayWindow, inputs: &[Vec<f64>]) -> Result<Rollout> {
        let z0 = self.encode(chi0)?;
        self.rollout_from(z0, inputs)
    }

    pub fn rollout_from(&self, z0: Vec<f64>, inputs: &[Vec<f64>]) -> Result<Rollout> {
        if inputs.is_empty() {
            return Err(Error::Shape("rollout needs at least one input".into()));
        }
        let mut latent = Vec::with_capacity(inputs.len() + 1);
        latent.push(z0);
        for (k, u) in inputs.iter().enumerate() {
            let z = self.dynamics.step(&latent[k], u)?;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutDiverged { step: k + 1 });
            }
            latent.push(z);
        }
        let zs = Array2::from_shape_fn((inputs.len(), self.meta.n_z), |(k, j)| latent[k + 1][j]);
        let out = self.decoder.forward_batch(zs.view());
        let mut states = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        for (k, row) in out.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutDiverged { step: k + 1 });
            }
            let row = row.to_vec();
            states.push(row[..self.meta.n_x].to_vec());
            outputs.push(row[self.meta.n_x..].to_vec());
        }
        Ok(Rollout { latent, states, outputs })
    }

    /// Rollout from raw measurements and raw inputs, returning raw units.
    pub fn rollout_raw(&self, chi0: &DelayWindow, inputs: &[Vec<f64>]) -> Result<Rollout> {
        let chi = self.scale_chi(chi0, None)?;
        self.rollout_raw_from_scaled(&chi, inputs)
    }

    /// Rollout from an already scaled window with raw inputs, returning raw units.
    pub fn rollout_raw_from_scaled(&self, chi: &DelayWindow, inputs: &[Vec<f64>]) -> Result<Rollout> {
        let scaled: Vec<Vec<f64>> = inputs.iter().map(|u| self.scaling.scale_inputs(u)).collect();
        let mut r = self.rollout(chi, &scaled)?;
        r.states = r.states.iter().map(|x| self.scaling.unscale_states(x)).collect();
        r.outputs = r.outputs.iter().map(|y| self.scaling.unscale_outputs(y)).collect();
        Ok(r)
    }

    /// Scales a raw delay window. `past_inputs` (`u_{k-1} .. u_{k-N}`, raw)
    /// is required when the model embeds inputs.
    pub fn scale_chi(&self, raw: &DelayWindow, past_inputs: Option<&[Vec<f64>]>) -> Result<DelayWindow> {
        let n_y = self.meta.n_y;
        let n = self.meta.n_delays;
        if raw.values.len() < (n + 1) * n_y {
            return Err(Error::Shape(format!("delay window has {} values, expected {}", raw.values.len(), (n + 1) * n_y)));
        }
        let mut values: Vec<f64> =
            raw.values[..(n + 1) * n_y].iter().enumerate().map(|(j, v)| self.scaling.outputs[j % n_y].forward(*v)).collect();
        if self.meta.embed_inputs {
            let past = match past_inputs {
                Some(p) if p.len() >= n => p,
                _ => {
                    return Err(Error::InsufficientHistory { needed: n, available: past_inputs.map_or(0, <[_]>::len) })
                }
            };
            for u in &past[..n] {
                values.extend(self.scaling.scale_inputs(u));
            }
        }
        Ok(DelayWindow { values, n_delays: n })
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.dynamics.a.len() + self.dynamics.b.len() + self.decoder.n_params()
    }

    /// Parameter ranges in the flat vector: encoder, transition, input matrix, decoder.
    pub fn param_groups(&self) -> [(&'static str, std::ops::Range<usize>); 4] {
        let e = self.encoder.n_params();
        let a = e + self.dynamics.a.len();
        let b = a + self.dynamics.b.len();
        let d = b + self.decoder.n_params();
        [("encoder", 0..e), ("A", e..a), ("B", a..b), ("decoder", b..d)]
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        self.encoder.push_params(&mut p);
        p.extend(&self.dynamics.a);
        p.extend(self.dynamics.b.iter());
        self.decoder.push_params(&mut p);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let mut i = self.encoder.pull_params(p);
        let n_a = self.dynamics.a.len();
        self.dynamics.a.copy_from_slice(&p[i..i + n_a]);
        i += n_a;
        for v in self.dynamics.b.iter_mut() {
            *v = p[i];
            i += 1;
        }
        self.decoder.pull_params(&p[i..]);
    }
}

/// Poles evenly spaced in log decay rate over `[lo, hi]`, slowest first.
fn initial_poles(n: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    if n == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (r_slow, r_fast) = (-hi.ln(), -lo.ln());
    if r_slow == 0.0 || r_slow == r_fast {
        return (0..n).map(|i| hi + (lo - hi) * i as f64 / (n - 1) as f64).collect();
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            (-(r_slow * (r_fast / r_slow).powf(t))).exp()
        })
        .collect()
}

#[cfg(test)]
mod tests;
