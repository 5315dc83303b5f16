use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage layout of the latent transition matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// `n_z` real poles.
    Diagonal,
    /// 2x2 rotation-scaling blocks `[[a, b], [-b, a]]` (complex pairs
    /// `a +- ib`), with a trailing 1x1 block when `n_z` is odd.
    BlockDiagonal,
    /// Full `n_z x n_z` matrix, row-major.
    Dense,
}

impl Structure {
    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Diagonal => "diagonal",
            Structure::BlockDiagonal => "block_diagonal",
            Structure::Dense => "dense",
        }
    }

    /// Number of stored transition parameters.
    pub fn n_params(self, n_z: usize) -> usize {
        match self {
            Structure::Diagonal | Structure::BlockDiagonal => n_z,
            Structure::Dense => n_z * n_z,
        }
    }
}

/// Discrete linear latent dynamics `z+ = A z + B u` under zeroth-order hold.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDynamics {
    pub structure: Structure,
    /// Transition parameters in the layout given by `structure`.
    pub a: Vec<f64>,
    /// `n_z x n_u`.
    pub b: Array2<f64>,
    pub dt: f64,
}

impl LatentDynamics {
    pub fn new(structure: Structure, a: Vec<f64>, b: Array2<f64>, dt: f64) -> Result<Self> {
        let n_z = b.nrows();
        if a.len() != structure.n_params(n_z) {
            return Err(Error::Shape(format!(
                "{} transition with n_z = {n_z} needs {} entries, got {}",
                structure.as_str(),
                structure.n_params(n_z),
                a.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("latent dynamics need dt > 0, got {dt}")));
        }
        Ok(LatentDynamics { structure, a, b, dt })
    }

    pub fn n_z(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    /// Full transition matrix.
    pub fn a_matrix(&self) -> Array2<f64> {
        structured_matrix(self.structure, &self.a, self.n_z())
    }

    /// `A z + B u`.
    pub fn step(&self, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let n_z = self.n_z();
        if z.len() != n_z || u.len() != self.n_u() {
            return Err(Error::Shape(format!(
                "latent step got z of length {} and u of length {}, expected {n_z} and {}",
                z.len(),
                u.len(),
                self.n_u()
            )));
        }
        let mut out = vec![0.0; n_z];
        self.step_into(z, u, &mut out);
        Ok(out)
    }

    /// `A z + B u` into `out`; lengths are the caller's responsibility.
    pub fn step_into(&self, z: &[f64], u: &[f64], out: &mut [f64]) {
        self.apply_a(z, out);
        for (i, o) in out.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *o += self.b[[i, j]] * uj;
            }
        }
    }

    /// `A^T v` into `out`.
    pub fn apply_a_transpose(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        match self.structure {
            Structure::Diagonal => {
                for i in 0..n {
                    out[i] = self.a[i] * v[i];
                }
            }
            Structure::BlockDiagonal => {
                let mut i = 0;
                while i + 1 < n {
                    let (p, q) = (self.a[i], self.a[i + 1]);
                    out[i] = p * v[i] - q * v[i + 1];
                    out[i + 1] = q * v[i] + p * v[i + 1];
                    i += 2;
                }
                if i < n {
                    out[i] = self.a[i] * v[i];
                }
            }
            Structure::Dense => {
                for j in 0..n {
                    out[j] = (0..n).map(|i| self.a[i * n + j] * v[i]).sum();
                }
            }
        }
    }

    fn apply_a(&self, z: &[f64], out: &mut [f64]) {
        let n = z.len();
        match self.structure {
            Structure::Diagonal => {
                for i in 0..n {
                    out[i] = self.a[i] * z[i];
                }
            }
            Structure::BlockDiagonal => {
                let mut i = 0;
                while i + 1 < n {
                    let (p, q) = (self.a[i], self.a[i + 1]);
                    out[i] = p * z[i] + q * z[i + 1];
                    out[i + 1] = -q * z[i] + p * z[i + 1];
                    i += 2;
                }
                if i < n {
                    out[i] = self.a[i] * z[i];
                }
            }
            Structure::Dense => {
                for i in 0..n {
                    out[i] = (0..n).map(|j| self.a[i * n + j] * z[j]).sum();
                }
            }
        }
    }

    /// Batched step, one latent vector per row: `Z A^T + U B^T`.
    pub fn step_batch(&self, z: ArrayView2<f64>, u: ArrayView2<f64>) -> Array2<f64> {
        z.dot(&self.a_matrix().t()) + u.dot(&self.b.t())
    }

    /// Projects a full-matrix gradient `dL/dA` onto the stored parameters.
    pub fn project_a_gradient(&self, g: &Array2<f64>) -> Vec<f64> {
        let n = self.n_z();
        match self.structure {
            Structure::Diagonal => (0..n).map(|i| g[[i, i]]).collect(),
            Structure::BlockDiagonal => {
                let mut out = vec![0.0; n];
                let mut i = 0;
                while i + 1 < n {
                    out[i] = g[[i, i]] + g[[i + 1, i + 1]];
                    out[i + 1] = g[[i, i + 1]] - g[[i + 1, i]];
                    i += 2;
                }
                if i < n {
                    out[i] = g[[i, i]];
                }
                out
            }
            Structure::Dense => g.iter().copied().collect(),
        }
    }

    /// The same dynamics stored as a dense matrix.
    pub fn to_dense(&self) -> LatentDynamics {
        LatentDynamics {
            structure: Structure::Dense,
            a: self.a_matrix().iter().copied().collect(),
            b: self.b.clone(),
            dt: self.dt,
        }
    }

    pub fn spectral_check(&self) -> StabilityReport {
        let n = self.n_z();
        let radius = match self.structure {
            Structure::Diagonal => self.a.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            Structure::BlockDiagonal => {
                let mut r = 0.0f64;
                let mut i = 0;
                while i + 1 < n {
                    r = r.max(self.a[i].hypot(self.a[i + 1]));
                    i += 2;
                }
                if i < n {
                    r = r.max(self.a[i].abs());
                }
                r
            }
            Structure::Dense => {
                let m = DMatrix::from_row_slice(n, n, &self.a);
                m.complex_eigenvalues().iter().fold(0.0f64, |r, e| r.max(e.norm()))
            }
        };
        let class = if (radius - 1.0).abs() <= MARGINAL_BAND {
            Stability::Marginal
        } else if radius < 1.0 {
            Stability::Stable
        } else {
            Stability::Unstable
        };
        StabilityReport { spectral_radius: radius, class }
    }

    /// Continuous-time pair `(A_c, B_c)` with `exp(A_c dt) = A` and the
    /// zeroth-order-hold relation `B = A_c^{-1} (A - I) B_c`.
    pub fn to_continuous(&self) -> Result<ContinuousDynamics> {
        let n = self.n_z();
        let dt = self.dt;
        let a_c: Vec<f64> = match self.structure {
            Structure::Diagonal => self
                .a
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    if a > 0.0 {
                        Ok(a.ln() / dt)
                    } else {
                        Err(Error::NonRepresentable(format!("diagonal entry {i} is {a}, needs to be positive")))
                    }
                })
                .collect::<Result<_>>()?,
            Structure::BlockDiagonal => {
                let mut out = vec![0.0; n];
                let mut i = 0;
                while i + 1 < n {
                    let (p, q) = (self.a[i], self.a[i + 1]);
                    let r = p.hypot(q);
                    if r == 0.0 {
                        return Err(Error::NonRepresentable(format!("block {} is zero", i / 2)));
                    }
                    if q == 0.0 && p < 0.0 {
                        return Err(Error::NonRepresentable(format!("block {} has a negative real eigenvalue", i / 2)));
                    }
                    out[i] = r.ln() / dt;
                    out[i + 1] = q.atan2(p) / dt;
                    i += 2;
                }
                if i < n {
                    if !(self.a[i] > 0.0) {
                        return Err(Error::NonRepresentable(format!("diagonal entry {i} is {}", self.a[i])));
                    }
                    out[i] = self.a[i].ln() / dt;
                }
                out
            }
            Structure::Dense => {
                let m = DMatrix::from_row_slice(n, n, &self.a);
                if m.complex_eigenvalues().iter().any(|e| e.im.abs() <= 1e-12 * e.norm().max(1.0) && e.re <= 0.0) {
                    return Err(Error::NonRepresentable("transition has an eigenvalue on the closed negative real axis".into()));
                }
                let l = logm(&m)? / dt;
                l.transpose().iter().copied().collect()
            }
        };
        let cont = ContinuousDynamics { structure: self.structure, a: a_c, b: Array2::zeros(self.b.raw_dim()), dt };
        let b_c = match self.structure {
            Structure::Diagonal => {
                let mut b_c = self.b.clone();
                for (i, mut row) in b_c.rows_mut().into_iter().enumerate() {
                    let r = zoh_ratio(cont.a[i] * dt) * dt;
                    row.mapv_inplace(|v| v / r);
                }
                b_c
            }
            _ => {
                let gamma = cont.input_integral();
                let b = DMatrix::from_row_slice(n, self.n_u(), self.b.as_slice().expect("standard layout"));
                let sol = gamma
                    .lu()
                    .solve(&b)
                    .ok_or_else(|| Error::NonRepresentable("input integral is singular".into()))?;
                Array2::from_shape_fn((n, self.n_u()), |(i, j)| sol[(i, j)])
            }
        };
        Ok(ContinuousDynamics { b: b_c, ..cont })
    }
}

const MARGINAL_BAND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Marginal,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub spectral_radius: f64,
    pub class: Stability,
}

/// Continuous-time latent dynamics `dz/dt = A_c z + B_c u`.
///
/// `a` uses the same layout as the discrete structure: log-rates for
/// diagonal, `(sigma, omega)` pairs for block-diagonal, row-major for dense.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousDynamics {
    pub structure: Structure,
    pub a: Vec<f64>,
    pub b: Array2<f64>,
    pub dt: f64,
}

impl ContinuousDynamics {
    pub fn n_z(&self) -> usize {
        self.b.nrows()
    }

    pub fn a_matrix(&self) -> Array2<f64> {
        structured_matrix(self.structure, &self.a, self.n_z())
    }

    /// `int_0^dt exp(A_c s) ds`.
    fn input_integral(&self) -> DMatrix<f64> {
        let n = self.n_z();
        let a = self.a_matrix();
        let mut aug = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[[i, j]] * self.dt;
            }
            aug[(i, n + i)] = self.dt;
        }
        let e = expm(&aug);
        e.view((0, n), (n, n)).into_owned()
    }

    /// Exact zeroth-order-hold discretization with sampling interval `dt`.
    pub fn to_discrete(&self) -> LatentDynamics {
        let n = self.n_z();
        let dt = self.dt;
        let a = match self.structure {
            Structure::Diagonal => self.a.iter().map(|c| (c * dt).exp()).collect(),
            Structure::BlockDiagonal => {
                let mut out = vec![0.0; n];
                let mut i = 0;
                while i + 1 < n {
                    let r = (self.a[i] * dt).exp();
                    let th = self.a[i + 1] * dt;
                    out[i] = r * th.cos();
                    out[i + 1] = r * th.sin();
                    i += 2;
                }
                if i < n {
                    out[i] = (self.a[i] * dt).exp();
                }
                out
            }
            Structure::Dense => {
                let m = DMatrix::from_row_slice(n, n, &self.a) * dt;
                expm(&m).transpose().iter().copied().collect()
            }
        };
        let b = match self.structure {
            Structure::Diagonal => {
                let mut b = self.b.clone();
                for (i, mut row) in b.rows_mut().into_iter().enumerate() {
                    let r = zoh_ratio(self.a[i] * dt) * dt;
                    row.mapv_inplace(|v| v * r);
                }
                b
            }
            _ => {
                let g = self.input_integral();
                let bc = DMatrix::from_row_slice(n, self.b.ncols(), self.b.as_slice().expect("standard layout"));
                let prod = g * bc;
                Array2::from_shape_fn((n, self.b.ncols()), |(i, j)| prod[(i, j)])
            }
        };
        LatentDynamics { structure: self.structure, a, b, dt }
    }
}

/// `(exp(x) - 1) / x`, equal to 1 at `x = 0`. The scalar input integral is
/// `dt * zoh_ratio(a_c dt)`.
fn zoh_ratio(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.exp_m1() / x
    }
}

fn structured_matrix(structure: Structure, a: &[f64], n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    match structure {
        Structure::Diagonal => {
            for i in 0..n {
                m[[i, i]] = a[i];
            }
        }
        Structure::BlockDiagonal => {
            let mut i = 0;
            while i + 1 < n {
                m[[i, i]] = a[i];
                m[[i + 1, i + 1]] = a[i];
                m[[i, i + 1]] = a[i + 1];
                m[[i + 1, i]] = -a[i + 1];
                i += 2;
            }
            if i < n {
                m[[i, i]] = a[i];
            }
        }
        Structure::Dense => {
            for i in 0..n {
                for j in 0..n {
                    m[[i, j]] = a[i * n + j];
                }
            }
        }
    }
    m
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.abs().column_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let x = m / 2f64.powi(s);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &x / k as f64;
        sum += &term;
        if term.abs().max() < 1e-18 * sum.abs().max() {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Principal matrix logarithm by inverse scaling and squaring: repeated
/// square roots until close to the identity, then the `log(I + X)` series.
pub fn logm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mut a = m.clone();
    let mut k = 0;
    while (&a - &id).abs().column_sum().max() > 0.1 {
        a = sqrtm(&a)?;
        k += 1;
        if k > 60 {
            return Err(Error::NonRepresentable("matrix logarithm did not converge".into()));
        }
    }
    let x = &a - &id;
    let mut power = x.clone();
    let mut sum = x.clone();
    for j in 2..=40 {
        power = &power * &x;
        let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
        sum += &power * (sign / j as f64);
    }
    Ok(sum * 2f64.powi(k))
}

/// Principal square root by the Denman-Beavers iteration.
fn sqrtm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut y = m.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().ok_or_else(|| Error::NonRepresentable("singular matrix in square root".into()))?;
        let zi = z.clone().try_inverse().ok_or_else(|| Error::NonRepresentable("singular matrix in square root".into()))?;
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).abs().max();
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * y.abs().max() {
            return Ok(y);
        }
    }
    Ok(y)
}
