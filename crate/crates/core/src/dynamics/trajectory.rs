use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Piecewise-constant input signal. Interval `i` starts at `breakpoints[i]`
/// and lasts until the next breakpoint; the last level is held forever and
/// the first one is extended to the left.
#[derive(Debug, Clone, PartialEq)]
pub struct InputProfile {
    breakpoints: Vec<f64>,
    levels: Vec<Vec<f64>>,
}

impl InputProfile {
    pub fn new(breakpoints: Vec<f64>, levels: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != levels.len() {
            return Err(Error::Config(format!(
                "input profile needs one level per breakpoint ({} vs {})",
                breakpoints.len(),
                levels.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("input profile breakpoints must be strictly ascending".into()));
        }
        let n_u = levels[0].len();
        if levels.iter().any(|l| l.len() != n_u) {
            return Err(Error::Config("input profile levels differ in length".into()));
        }
        Ok(InputProfile { breakpoints, levels })
    }

    pub fn constant(t0: f64, level: Vec<f64>) -> Self {
        InputProfile { breakpoints: vec![t0], levels: vec![level] }
    }

    /// Equal-duration steps starting at `t0`.
    pub fn steps(t0: f64, step_duration: f64, levels: Vec<Vec<f64>>) -> Result<Self> {
        let breakpoints = (0..levels.len()).map(|i| t0 + i as f64 * step_duration).collect();
        InputProfile::new(breakpoints, levels)
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn n_u(&self) -> usize {
        self.levels[0].len()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn level_at(&self, t: f64) -> &[f64] {
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        &self.levels[idx.saturating_sub(1)]
    }
}

/// Equidistant samples of inputs, states and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t0: f64,
    /// `inputs[k]` is held over `[t_k, t_k + dt)`.
    pub inputs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(dt: f64, t0: f64) -> Self {
        Trajectory { dt, t0, inputs: Vec::new(), states: Vec::new(), outputs: Vec::new() }
    }

    pub fn push(&mut self, u: Vec<f64>, x: Vec<f64>, y: Vec<f64>) {
        self.inputs.push(u);
        self.states.push(x);
        self.outputs.push(y);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Rows `start..end` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            dt: self.dt,
            t0: self.time(start),
            inputs: self.inputs[start..end].to_vec(),
            states: self.states[start..end].to_vec(),
            outputs: self.outputs[start..end].to_vec(),
        }
    }

    pub fn header(n_u: usize, n_x: usize, n_y: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=n_u).map(|i| format!("u{i}")));
        h.extend((1..=n_x).map(|i| format!("x{i}")));
        h.extend((1..=n_y).map(|i| format!("y{i}")));
        h
    }

    /// CSV with header `t,u1..,x1..,y1..`, numbers at 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let (n_u, n_x, n_y) = self.dims();
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::header(n_u, n_x, n_y))?;
        for k in 0..self.len() {
            let mut row = vec![fmt17(self.time(k))];
            row.extend(self.inputs[k].iter().map(|v| fmt17(*v)));
            row.extend(self.states[k].iter().map(|v| fmt17(*v)));
            row.extend(self.outputs[k].iter().map(|v| fmt17(*v)));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, n_u: usize, n_x: usize, n_y: usize) -> Result<Trajectory> {
        let mut rd = csv::Reader::from_reader(r);
        let expected = Self::header(n_u, n_x, n_y);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != expected {
            return Err(Error::Shape(format!("trajectory CSV header {header:?}, expected {expected:?}")));
        }
        let mut times = Vec::new();
        let mut traj = Trajectory::new(0.0, 0.0);
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Shape(format!("bad number `{s}`: {e}"))))
                .collect::<Result<_>>()?;
            times.push(vals[0]);
            traj.push(
                vals[1..1 + n_u].to_vec(),
                vals[1 + n_u..1 + n_u + n_x].to_vec(),
                vals[1 + n_u + n_x..].to_vec(),
            );
        }
        if let Some(&t0) = times.first() {
            traj.t0 = t0;
        }
        if times.len() > 1 {
            traj.dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        }
        Ok(traj)
    }

    fn dims(&self) -> (usize, usize, usize) {
        match (self.inputs.first(), self.states.first(), self.outputs.first()) {
            (Some(u), Some(x), Some(y)) => (u.len(), x.len(), y.len()),
            _ => (0, 0, 0),
        }
    }
}

/// Formats with 17 significant digits, which round-trips any `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_lookup_is_left_closed() {
        let p = InputProfile::new(vec![0.0, 10.0], vec![vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(p.level_at(-5.0), &[1.0]);
        assert_eq!(p.level_at(9.999), &[1.0]);
        assert_eq!(p.level_at(10.0), &[2.0]);
        assert_eq!(p.level_at(1e9), &[2.0]);
    }

    #[test]
    fn rejects_unsorted_breakpoints() {
        assert!(InputProfile::new(vec![1.0, 1.0], vec![vec![0.0], vec![0.0]]).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut t = Trajectory::new(2.0, 0.0);
        t.push(vec![0.1], vec![std::f64::consts::PI, 1e-300], vec![-7.25e12]);
        t.push(vec![0.2], vec![1.0 / 3.0, 0.0], vec![f64::MIN_POSITIVE]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice(), 1, 2, 1).unwrap();
        assert_eq!(back, t);
    }
}
