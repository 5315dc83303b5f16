//! Two-term prediction loss and its reverse-mode gradient.
//!
//! For a window of `s` samples:
//! - one-step term: re-encode every `chi_k`, advance once, decode and
//!   compare with `[x_{k+1}; y_{k+1}]`, `k = 0 .. s-2`;
//! - multi-step term: encode `chi_0` only, roll the latent state forward
//!   over the whole window and compare every decoded `z_{k+1}`.
//!
//! Each term averages the per-sample mean squared error over the `s - 1`
//! predictions. Batches are stacked row-wise (window-major) so every network
//! evaluation is a single matrix product.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{KoopmanModel, Mlp, MlpTape};
use crate::sampling::ScaledWindow;

/// Loss value split into its two terms (`total = one_step + weight * multi_step`).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub one_step: f64,
    pub multi_step: f64,
    pub total: f64,
}

/// Gradient of the batch-mean loss, laid out like [`KoopmanModel::params`].
#[derive(Debug, Clone)]
pub struct Gradient {
    pub encoder: Mlp,
    pub a: Vec<f64>,
    pub b: Array2<f64>,
    pub decoder: Mlp,
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        let mut g = Vec::new();
        self.encoder.push_params(&mut g);
        g.extend(&self.a);
        g.extend(self.b.iter());
        self.decoder.push_params(&mut g);
        g
    }
}

/// Loss of a single window.
pub fn loss(model: &KoopmanModel, window: &ScaledWindow, multi_step_weight: f64) -> Result<LossParts> {
    batch_loss(model, &[window], multi_step_weight)
}

/// Mean loss over a batch, without gradients.
pub fn batch_loss(model: &KoopmanModel, batch: &[&ScaledWindow], multi_step_weight: f64) -> Result<LossParts> {
    let fwd = Forward::run(model, batch, multi_step_weight)?;
    Ok(fwd.parts)
}

/// Mean loss over a batch and its exact gradient.
pub fn loss_and_gradient(
    model: &KoopmanModel,
    batch: &[&ScaledWindow],
    multi_step_weight: f64,
) -> Result<(LossParts, Gradient)> {
    let fwd = Forward::run(model, batch, multi_step_weight)?;
    let parts = fwd.parts;
    let grad = fwd.backward(model, batch, multi_step_weight);
    let finite = grad.encoder.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
        && grad.a.iter().all(|v| v.is_finite())
        && grad.b.iter().all(|v| v.is_finite())
        && grad.decoder.weights.iter().all(|w| w.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::TrainingDiverged { epoch: 0, reason: "non-finite gradient".into(), best: None });
    }
    Ok((parts, grad))
}

struct Forward {
    parts: LossParts,
    /// Rows `w (s-1) + k`: encoder input `chi_k`, `k = 0 .. s-2`.
    enc_tape: MlpTape,
    /// Latent states of the multi-step rollout, `z_0 .. z_{s-1}`, one row per window.
    rollout: Vec<Array2<f64>>,
    /// Decoder input: one-step predictions then multi-step predictions.
    dec_tape: MlpTape,
    /// Decoder output minus targets, same row layout as `dec_tape`.
    residual: Array2<f64>,
    inputs: Array2<f64>,
    steps: usize,
}

impl Forward {
    fn run(model: &KoopmanModel, batch: &[&ScaledWindow], w2: f64) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let s = batch[0].len();
        if s < 2 || batch.iter().any(|w| w.len() != s) {
            return Err(Error::Shape("batch windows must share a length of at least 2".into()));
        }
        let steps = s - 1;
        let nb = batch.len();
        let rows = nb * steps;
        let d_chi = batch[0].chi.ncols();
        let n_u = model.meta.n_u;
        let n_out = model.meta.n_out();
        let mut chi = Array2::zeros((rows, d_chi));
        let mut inputs = Array2::zeros((rows, n_u));
        let mut targets = Array2::zeros((2 * rows, n_out));
        for (w, win) in batch.iter().enumerate() {
            let r = w * steps;
            chi.slice_mut(s![r..r + steps, ..]).assign(&win.chi.slice(s![..steps, ..]));
            inputs.slice_mut(s![r..r + steps, ..]).assign(&win.inputs);
            targets.slice_mut(s![r..r + steps, ..]).assign(&win.targets.slice(s![1.., ..]));
            targets.slice_mut(s![rows + r..rows + r + steps, ..]).assign(&win.targets.slice(s![1.., ..]));
        }
        let enc_tape = model.encoder.forward_tape(chi.view());
        let z_enc = enc_tape.output();
        let a_t = model.dynamics.a_matrix().reversed_axes();
        let b_t = model.dynamics.b.t();
        let one_step = z_enc.dot(&a_t) + inputs.dot(&b_t);

        let mut rollout = Vec::with_capacity(s);
        rollout.push(z_enc.select(Axis(0), &(0..nb).map(|w| w * steps).collect::<Vec<_>>()));
        for k in 0..steps {
            let u_k = inputs.select(Axis(0), &(0..nb).map(|w| w * steps + k).collect::<Vec<_>>());
            let next = rollout[k].dot(&a_t) + u_k.dot(&b_t);
            rollout.push(next);
        }
        let n_z = model.meta.n_z;
        let mut dec_in = Array2::zeros((2 * rows, n_z));
        dec_in.slice_mut(s![..rows, ..]).assign(&one_step);
        for (k, z) in rollout.iter().enumerate().skip(1) {
            for w in 0..nb {
                dec_in.row_mut(rows + w * steps + k - 1).assign(&z.row(w));
            }
        }
        let dec_tape = model.decoder.forward_tape(dec_in.view());
        let residual = dec_tape.output() - &targets;
        let denom = (rows * n_out) as f64;
        let l1 = residual.slice(s![..rows, ..]).iter().map(|v| v * v).sum::<f64>() / denom;
        let l2 = residual.slice(s![rows.., ..]).iter().map(|v| v * v).sum::<f64>() / denom;
        let parts = LossParts { one_step: l1, multi_step: l2, total: l1 + w2 * l2 };
        if !parts.total.is_finite() {
            return Err(Error::TrainingDiverged { epoch: 0, reason: "non-finite loss".into(), best: None });
        }
        Ok(Forward { parts, enc_tape, rollout, dec_tape, residual, inputs, steps })
    }

    fn backward(self, model: &KoopmanModel, batch: &[&ScaledWindow], w2: f64) -> Gradient {
        let nb = batch.len();
        let steps = self.steps;
        let rows = nb * steps;
        let n_out = model.meta.n_out();
        let denom = (rows * n_out) as f64;
        let mut d_out = self.residual * (2.0 / denom);
        d_out.slice_mut(s![rows.., ..]).mapv_inplace(|v| v * w2);

        let mut dec_grad = model.decoder.zeros_like();
        let d_dec_in = model.decoder.backward(&self.dec_tape, d_out, Some(&mut dec_grad), true).expect("input gradient");
        let a = model.dynamics.a_matrix();
        let z_enc = self.enc_tape.output();

        // One-step term: z1 = A z_enc + B u.
        let d_one = d_dec_in.slice(s![..rows, ..]);
        let mut d_a = d_one.t().dot(z_enc);
        let mut d_b = d_one.t().dot(&self.inputs);
        let mut d_enc = d_one.dot(&a);

        // Multi-step term: adjoint sweep through the latent recursion.
        let d_multi = d_dec_in.slice(s![rows.., ..]);
        let pick = |k: usize| -> Array2<f64> {
            d_multi.select(Axis(0), &(0..nb).map(|w| w * steps + k).collect::<Vec<_>>())
        };
        let mut lambda = pick(steps - 1);
        for k in (0..steps).rev() {
            let u_k = self.inputs.select(Axis(0), &(0..nb).map(|w| w * steps + k).collect::<Vec<_>>());
            d_a += &lambda.t().dot(&self.rollout[k]);
            d_b += &lambda.t().dot(&u_k);
            let prev = lambda.dot(&a);
            lambda = if k > 0 { prev + pick(k - 1) } else { prev };
        }
        for w in 0..nb {
            let mut row = d_enc.row_mut(w * steps);
            row += &lambda.row(w);
        }
        let mut enc_grad = model.encoder.zeros_like();
        model.encoder.backward(&self.enc_tape, std::mem::take(&mut d_enc), Some(&mut enc_grad), false);
        let a_grad = model.dynamics.project_a_gradient(&d_a);
        Gradient { encoder: enc_grad, a: a_grad, b: d_b, decoder: dec_grad }
    }
}

/// Reference gradient by central differences on the flat parameter vector.
pub fn finite_difference_gradient(
    model: &KoopmanModel,
    batch: &[&ScaledWindow],
    multi_step_weight: f64,
    h: f64,
) -> Result<Vec<f64>> {
    let p = model.params();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(p.len());
    let mut q = p.clone();
    for i in 0..p.len() {
        q[i] = p[i] + h;
        probe.set_params(&q);
        let fp = batch_loss(&probe, batch, multi_step_weight)?.total;
        q[i] = p[i] - h;
        probe.set_params(&q);
        let fm = batch_loss(&probe, batch, multi_step_weight)?.total;
        q[i] = p[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}
