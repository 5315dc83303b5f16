use super::{take_params, InputAffine, PlantParams};
use crate::error::{Error, Result};

/// Binary distillation column with constant relative volatility, constant
/// molar holdups and constant vapour boil-up.
///
/// Stages are numbered from the bottom: 0 is the reboiler, `1..=trays` are
/// trays and `trays + 1` is the total condenser. Feed is saturated liquid on
/// `feed_tray`. States are light-component liquid mole fractions.
///
/// Inputs are the reflux ratio `xi = L/V` and the feed rate `F`. With `V`
/// fixed the balances are linear in `(xi, F)`. Measurements are the
/// distillate flow `D = V - L`, the bottoms flow `B = L + F - V` and the
/// composition on `measured_tray`. The top impurity `1 - x_cond` is a
/// controlled but unmeasured quantity.
#[derive(Debug, Clone)]
pub struct BinaryColumn {
    pub trays: usize,
    pub feed_tray: usize,
    pub measured_tray: usize,
    pub alpha: f64,
    pub tray_holdup: f64,
    pub reboiler_holdup: f64,
    pub condenser_holdup: f64,
    pub feed_composition: f64,
    pub vapor_flow: f64,
}

impl Default for BinaryColumn {
    fn default() -> Self {
        BinaryColumn {
            trays: 10,
            feed_tray: 5,
            measured_tray: 5,
            alpha: 1.6,
            tray_holdup: 0.5,
            reboiler_holdup: 5.0,
            condenser_holdup: 5.0,
            feed_composition: 0.5,
            vapor_flow: 1.0,
        }
    }
}

/// Reflux-ratio and feed-rate bounds the column is operated within.
pub const COLUMN_INPUT_BOUNDS: [(f64, f64); 2] = [(0.7, 0.9), (0.8, 1.2)];
/// Base operating point `(xi, F)`.
pub const COLUMN_BASE_INPUT: [f64; 2] = [0.8, 1.0];

impl BinaryColumn {
    pub fn from_params(params: &PlantParams) -> Result<Self> {
        let d = BinaryColumn::default();
        let p = take_params(
            "column",
            params,
            &[
                ("trays", d.trays as f64),
                ("feed_tray", d.feed_tray as f64),
                ("measured_tray", d.measured_tray as f64),
                ("alpha", d.alpha),
                ("tray_holdup", d.tray_holdup),
                ("reboiler_holdup", d.reboiler_holdup),
                ("condenser_holdup", d.condenser_holdup),
                ("feed_composition", d.feed_composition),
                ("vapor_flow", d.vapor_flow),
            ],
        )?;
        let count = |key: &str| -> Result<usize> {
            let v = p[key];
            if v.fract() != 0.0 || v < 1.0 {
                return Err(Error::Config(format!("column parameter `{key}` must be a positive integer, got {v}")));
            }
            Ok(v as usize)
        };
        let col = BinaryColumn {
            trays: count("trays")?,
            feed_tray: count("feed_tray")?,
            measured_tray: count("measured_tray")?,
            alpha: p["alpha"],
            tray_holdup: p["tray_holdup"],
            reboiler_holdup: p["reboiler_holdup"],
            condenser_holdup: p["condenser_holdup"],
            feed_composition: p["feed_composition"],
            vapor_flow: p["vapor_flow"],
        };
        if col.feed_tray > col.trays || col.measured_tray > col.trays {
            return Err(Error::Config("feed_tray and measured_tray must lie within 1..=trays".into()));
        }
        if !(col.alpha > 1.0) {
            return Err(Error::Config("relative volatility must exceed 1".into()));
        }
        if !(col.tray_holdup > 0.0 && col.reboiler_holdup > 0.0 && col.condenser_holdup > 0.0 && col.vapor_flow > 0.0) {
            return Err(Error::Config("holdups and vapour flow must be positive".into()));
        }
        if !(0.0..=1.0).contains(&col.feed_composition) {
            return Err(Error::Config("feed composition must lie in [0, 1]".into()));
        }
        Ok(col)
    }

    pub fn condenser(&self) -> usize {
        self.trays + 1
    }

    fn equilibrium(&self, x: f64) -> f64 {
        self.alpha * x / (1.0 + (self.alpha - 1.0) * x)
    }

    /// Component balances for liquid flow `l` above the feed, feed `f` and
    /// boil-up `v`. Linear in `(l, f, v)` jointly.
    fn balances(&self, x: &[f64], l: f64, f: f64, v: f64, dx: &mut [f64]) {
        let n = self.trays;
        let nf = self.feed_tray;
        let below = l + f;
        let liquid_out = |i: usize| if i <= nf { below } else { l };
        let b = below - v;
        let y0 = self.equilibrium(x[0]);
        dx[0] = (below * x[1] - v * y0 - b * x[0]) / self.reboiler_holdup;
        let mut y_prev = y0;
        for i in 1..=n {
            let yi = self.equilibrium(x[i]);
            let inflow = if i == n { l * x[n + 1] } else { liquid_out(i + 1) * x[i + 1] };
            let mut acc = inflow + v * y_prev - liquid_out(i) * x[i] - v * yi;
            if i == nf {
                acc += f * self.feed_composition;
            }
            dx[i] = acc / self.tray_holdup;
            y_prev = yi;
        }
        dx[n + 1] = v * (y_prev - x[n + 1]) / self.condenser_holdup;
    }
}

impl InputAffine for BinaryColumn {
    fn name(&self) -> &str {
        "column"
    }
    fn n_x(&self) -> usize {
        self.trays + 2
    }
    fn n_u(&self) -> usize {
        2
    }
    fn n_y(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64], dx: &mut [f64]) {
        self.balances(x, 0.0, 0.0, self.vapor_flow, dx);
    }

    fn input_field(&self, i: usize, x: &[f64], g: &mut [f64]) {
        match i {
            0 => self.balances(x, self.vapor_flow, 0.0, 0.0, g),
            1 => self.balances(x, 0.0, 1.0, 0.0, g),
            _ => panic!("column has two inputs, asked for field {i}"),
        }
    }

    fn rhs(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        self.balances(x, u[0] * self.vapor_flow, u[1], self.vapor_flow, dx);
    }

    fn output(&self, x: &[f64], u: &[f64], y: &mut [f64]) {
        let v = self.vapor_flow;
        let l = u[0] * v;
        y[0] = v - l;
        y[1] = l + u[1] - v;
        y[2] = x[self.measured_tray];
    }

    fn state_bounds(&self) -> Option<Vec<(f64, f64)>> {
        Some(vec![(0.0, 1.0); self.n_x()])
    }

    fn log_states(&self) -> Vec<usize> {
        (0..self.n_x()).collect()
    }

    fn state_names(&self) -> Vec<String> {
        let mut names = vec!["x_reboiler".to_string()];
        names.extend((1..=self.trays).map(|i| format!("x_tray{i}")));
        names.push("x_condenser".into());
        names
    }

    fn output_names(&self) -> Vec<String> {
        vec!["D".into(), "B".into(), format!("x_tray{}", self.measured_tray)]
    }

    fn input_names(&self) -> Vec<String> {
        vec!["xi".into(), "F".into()]
    }
}

/// Van der Pol oscillator forced on the velocity equation, position measured.
#[derive(Debug, Clone)]
pub struct VanDerPol {
    pub mu: f64,
}

impl VanDerPol {
    pub fn from_params(params: &PlantParams) -> Result<Self> {
        let p = take_params("vdp", params, &[("mu", 1.0)])?;
        Ok(VanDerPol { mu: p["mu"] })
    }
}

impl InputAffine for VanDerPol {
    fn name(&self) -> &str {
        "vdp"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], dx: &mut [f64]) {
        dx[0] = x[1];
        dx[1] = self.mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
    }
    fn input_field(&self, _i: usize, _x: &[f64], g: &mut [f64]) {
        g[0] = 0.0;
        g[1] = 1.0;
    }
    fn output(&self, x: &[f64], _u: &[f64], y: &mut [f64]) {
        y[0] = x[0];
    }
}

/// Van de Vusse reactor: `A -> B -> C`, `2A -> D`, dilution rate as input,
/// concentration of `B` measured.
#[derive(Debug, Clone)]
pub struct Cstr {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub feed_concentration: f64,
}

impl Cstr {
    pub fn from_params(params: &PlantParams) -> Result<Self> {
        let p = take_params(
            "cstr",
            params,
            &[("k1", 50.0), ("k2", 100.0), ("k3", 10.0), ("feed_concentration", 10.0)],
        )?;
        Ok(Cstr { k1: p["k1"], k2: p["k2"], k3: p["k3"], feed_concentration: p["feed_concentration"] })
    }
}

impl InputAffine for Cstr {
    fn name(&self) -> &str {
        "cstr"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], dx: &mut [f64]) {
        dx[0] = -self.k1 * x[0] - self.k3 * x[0] * x[0];
        dx[1] = self.k1 * x[0] - self.k2 * x[1];
    }
    fn input_field(&self, _i: usize, x: &[f64], g: &mut [f64]) {
        g[0] = self.feed_concentration - x[0];
        g[1] = -x[1];
    }
    fn output(&self, x: &[f64], _u: &[f64], y: &mut [f64]) {
        y[0] = x[1];
    }
    fn state_bounds(&self) -> Option<Vec<(f64, f64)>> {
        Some(vec![(0.0, self.feed_concentration); 2])
    }
}

/// Scalar first-order lag `tau dx/dt = -x + gain u`, `y = x`.
#[derive(Debug, Clone)]
pub struct FirstOrderLag {
    pub tau: f64,
    pub gain: f64,
}

impl FirstOrderLag {
    pub fn from_params(params: &PlantParams) -> Result<Self> {
        let p = take_params("linear", params, &[("tau", 1.0), ("gain", 1.0)])?;
        if !(p["tau"] > 0.0) {
            return Err(Error::Config("linear plant needs tau > 0".into()));
        }
        Ok(FirstOrderLag { tau: p["tau"], gain: p["gain"] })
    }
}

impl InputAffine for FirstOrderLag {
    fn name(&self) -> &str {
        "linear"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], dx: &mut [f64]) {
        dx[0] = -x[0] / self.tau;
    }
    fn input_field(&self, _i: usize, _x: &[f64], g: &mut [f64]) {
        g[0] = self.gain / self.tau;
    }
    fn output(&self, x: &[f64], _u: &[f64], y: &mut [f64]) {
        y[0] = x[0];
    }
}
