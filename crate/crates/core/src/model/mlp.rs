use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Fully connected network, tanh on hidden layers, identity on the output.
///
/// Weights are stored `in x out` so a batch `X` (one sample per row) maps to
/// `X W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Biases take part in training; when false they stay at zero.
    pub bias: bool,
}

/// Layer activations of a batched forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub acts: Vec<Array2<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape holds at least the input")
    }
}

impl Mlp {
    pub fn zeros(sizes: &[usize], bias: bool) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Mlp {
            weights: sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            biases: sizes[1..].iter().map(|&n| Array1::zeros(n)).collect(),
            bias,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(sizes: &[usize], bias: bool, rng: &mut R) -> Self {
        let mut m = Mlp::zeros(sizes, bias);
        for w in &mut m.weights {
            let (n_in, n_out) = w.dim();
            let lim = (6.0 / (n_in + n_out) as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng::uniform(rng, -lim, lim));
        }
        m
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].nrows()];
        s.extend(self.weights.iter().map(|w| w.ncols()));
        s
    }

    pub fn n_in(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len() + if self.bias { w.ncols() } else { 0 }).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Mlp::zeros(&self.sizes(), self.bias)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in() {
            return Err(Error::Shape(format!("network input has length {}, expected {}", x.len(), self.n_in())));
        }
        let mut h = Array1::from(x.to_vec());
        let last = self.n_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(tanh);
            }
        }
        Ok(h.to_vec())
    }

    /// Batched forward pass keeping every activation for the backward pass.
    pub fn forward_tape(&self, x: ArrayView2<f64>) -> MlpTape {
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(x.to_owned());
        let last = self.n_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = acts[l].dot(w);
            if self.bias {
                h += b;
            }
            if l < last {
                h.mapv_inplace(tanh);
            }
            acts.push(h);
        }
        MlpTape { acts }
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_tape(x).acts.pop().unwrap()
    }

    /// Back-propagates `dy` (gradient w.r.t. the output batch). Parameter
    /// gradients are accumulated into `grad` when given; the input gradient
    /// is returned when `want_dx` is set.
    pub fn backward(&self, tape: &MlpTape, dy: Array2<f64>, grad: Option<&mut Mlp>, want_dx: bool) -> Option<Array2<f64>> {
        let mut d = dy;
        let mut grad = grad;
        for l in (0..self.n_layers()).rev() {
            if let Some(g) = grad.as_deref_mut() {
                ndarray::linalg::general_mat_mul(1.0, &tape.acts[l].t(), &d, 1.0, &mut g.weights[l]);
                if self.bias {
                    g.biases[l] += &d.sum_axis(Axis(0));
                }
            }
            if l == 0 && !want_dx {
                return None;
            }
            let mut dx = d.dot(&self.weights[l].t());
            if l == 0 {
                return Some(dx);
            }
            dx.zip_mut_with(&tape.acts[l], |g, &a| *g *= 1.0 - a * a);
            d = dx;
        }
        unreachable!()
    }

    /// Appends parameters in layer order, weights row-major then biases.
    pub fn push_params(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            if self.bias {
                out.extend(b.iter());
            }
        }
    }

    /// Reads parameters in `push_params` order; returns the count consumed.
    pub fn pull_params(&mut self, src: &[f64]) -> usize {
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for v in w.iter_mut() {
                *v = src[i];
                i += 1;
            }
            if self.bias {
                for v in b.iter_mut() {
                    *v = src[i];
                    i += 1;
                }
            }
        }
        i
    }
}

/// `tanh` through a single `exp`; within a few ulp of `f64::tanh` and
/// markedly cheaper, which matters because activations dominate training.
#[inline]
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn zero_weights_return_output_bias() {
        let mut m = Mlp::zeros(&[3, 4, 2], true);
        m.biases[1] = array![0.3, -1.2];
        assert_eq!(m.forward(&[5.0, -2.0, 1.0]).unwrap(), vec![0.3, -1.2]);
    }

    #[test]
    fn hand_evaluated_single_hidden_layer() {
        let mut m = Mlp::zeros(&[2, 2, 1], true);
        m.weights[0] = array![[0.5, -1.0], [2.0, 0.25]];
        m.biases[0] = array![0.1, -0.2];
        m.weights[1] = array![[1.5], [-0.75]];
        m.biases[1] = array![0.05];
        let x = [0.3, -0.4];
        let h1 = (0.5 * 0.3 + 2.0 * -0.4 + 0.1f64).tanh();
        let h2 = (-1.0 * 0.3 + 0.25 * -0.4 - 0.2f64).tanh();
        let expected = 1.5 * h1 - 0.75 * h2 + 0.05;
        assert!((m.forward(&x).unwrap()[0] - expected).abs() < 1e-12);
        let batch = m.forward_batch(array![[0.3, -0.4]].view());
        assert!((batch[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn activation_matches_std_tanh() {
        for i in -4000..=4000 {
            let x = i as f64 * 5e-3;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15);
        }
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
        assert!(tanh(f64::NAN).is_nan());
    }

    #[test]
    fn rejects_wrong_input_length() {
        let m = Mlp::zeros(&[3, 1], true);
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn params_round_trip() {
        let mut r = rng::stream(1, rng::Stream::WeightInit);
        let m = Mlp::glorot(&[4, 3, 2], true, &mut r);
        let mut p = Vec::new();
        m.push_params(&mut p);
        assert_eq!(p.len(), m.n_params());
        let mut n = m.zeros_like();
        assert_eq!(n.pull_params(&p), p.len());
        assert_eq!(n, m);
        let unbiased = Mlp::zeros(&[5, 3], false);
        assert_eq!(unbiased.n_params(), 15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::stream(4, rng::Stream::WeightInit);
        let mut m = Mlp::glorot(&[3, 4, 2], true, &mut r);
        m.biases[0] = array![0.1, -0.3, 0.2, 0.05];
        let x = array![[0.2, -0.5, 0.9], [0.4, 0.1, -0.3]];
        // Objective: sum of output * c.
        let c = array![[1.0, -2.0], [0.5, 0.3]];
        let f = |m: &Mlp| (m.forward_batch(x.view()) * &c).sum();
        let tape = m.forward_tape(x.view());
        let mut g = m.zeros_like();
        let dx = m.backward(&tape, c.clone(), Some(&mut g), true).unwrap();
        let mut p = Vec::new();
        m.push_params(&mut p);
        let mut gp = Vec::new();
        g.push_params(&mut gp);
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += 1e-6;
            let mut mp = m.clone();
            mp.pull_params(&q);
            q[i] -= 2e-6;
            let mut mm = m.clone();
            mm.pull_params(&q);
            let fd = (f(&mp) - f(&mm)) / 2e-6;
            assert!((fd - gp[i]).abs() < 1e-7, "param {i}: {fd} vs {}", gp[i]);
        }
        let mut xp = x.clone();
        xp[[1, 2]] += 1e-6;
        let mut xm = x.clone();
        xm[[1, 2]] -= 1e-6;
        let fd = ((m.forward_batch(xp.view()) * &c).sum() - (m.forward_batch(xm.view()) * &c).sum()) / 2e-6;
        assert!((fd - dx[[1, 2]]).abs() < 1e-7);
    }
}
