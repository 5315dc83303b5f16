/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], p: &AdamParams) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - p.beta1.powi(self.t as i32);
        let c2 = 1.0 - p.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= p.learning_rate * m_hat / (v_hat.sqrt() + p.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let p = AdamParams::default();
        let mut s = AdamState::new(3);
        let mut x = vec![1.0, 1.0, 1.0];
        let g = [0.5, -3.0, 1e-3];
        s.step(&mut x, &g, &p);
        for (xi, gi) in x.iter().zip(g) {
            // m_hat = g, v_hat = g^2, so the step is lr * |g| / (|g| + eps).
            let expected = 1.0 - p.learning_rate * gi / (gi.abs() + p.epsilon);
            assert!((xi - expected).abs() < 1e-15);
            assert!(((1.0 - xi) - p.learning_rate * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let p = AdamParams::default();
        let mut s = AdamState::new(1);
        let mut x = vec![2.0];
        s.step(&mut x, &[1.0], &p);
        let (m, v, x1) = (s.m[0], s.v[0], x[0]);
        s.step(&mut x, &[0.0], &p);
        assert_eq!(s.m[0], 0.9 * m);
        assert_eq!(s.v[0], 0.999 * v);
        // The bias-corrected first moment is still non-zero, so the step is too.
        assert!(x[0] < x1);
        let mut fresh = AdamState::new(1);
        let mut y = vec![2.0];
        fresh.step(&mut y, &[0.0], &p);
        assert_eq!(y[0], 2.0);
    }

    #[test]
    fn runs_are_bit_identical() {
        let p = AdamParams::default();
        let run = || {
            let mut s = AdamState::new(2);
            let mut x = vec![0.3, -0.7];
            for k in 0..100 {
                let g = [x[0] * 2.0 + (k as f64).sin(), x[1] - 0.1];
                s.step(&mut x, &g, &p);
            }
            x
        };
        assert_eq!(run(), run());
    }
}
