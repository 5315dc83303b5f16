use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Min-max scaling of one channel, optionally after a natural log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub name: String,
    pub log: bool,
    /// Minimum of the (log-)transformed data.
    pub min: f64,
    /// Maximum of the (log-)transformed data.
    pub max: f64,
}

impl ChannelScale {
    pub fn identity(name: &str) -> Self {
        ChannelScale { name: name.to_string(), log: false, min: 0.0, max: 1.0 }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn forward(&self, v: f64) -> f64 {
        let t = if self.log { v.ln() } else { v };
        (t - self.min) / (self.max - self.min)
    }

    pub fn inverse(&self, s: f64) -> f64 {
        let t = self.min + s * (self.max - self.min);
        if self.log {
            t.exp()
        } else {
            t
        }
    }

    /// `d forward / d v` at raw value `v`.
    pub fn derivative(&self, v: f64) -> f64 {
        let d = 1.0 / (self.max - self.min);
        if self.log {
            d / v
        } else {
            d
        }
    }
}

/// Scaling for every input, state and output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub inputs: Vec<ChannelScale>,
    pub states: Vec<ChannelScale>,
    pub outputs: Vec<ChannelScale>,
}

/// Which channels are log-transformed before min-max scaling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogChannels {
    pub inputs: Vec<usize>,
    pub states: Vec<usize>,
    pub outputs: Vec<usize>,
}

/// Channel names used in scaling specs and error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelNames {
    pub inputs: Vec<String>,
    pub states: Vec<String>,
    pub outputs: Vec<String>,
}

impl ScalingSpec {
    pub fn identity(n_u: usize, n_x: usize, n_y: usize) -> Self {
        let mk = |p: &str, n: usize| (1..=n).map(|i| ChannelScale::identity(&format!("{p}{i}"))).collect();
        ScalingSpec { inputs: mk("u", n_u), states: mk("x", n_x), outputs: mk("y", n_y) }
    }

    pub fn n_u(&self) -> usize {
        self.inputs.len()
    }
    pub fn n_x(&self) -> usize {
        self.states.len()
    }
    pub fn n_y(&self) -> usize {
        self.outputs.len()
    }

    /// Scale of the `i`-th entry of the stacked `[x; y]` vector.
    pub fn stacked(&self, i: usize) -> &ChannelScale {
        if i < self.states.len() {
            &self.states[i]
        } else {
            &self.outputs[i - self.states.len()]
        }
    }

    pub fn scale_inputs(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.inputs).map(|(v, c)| c.forward(*v)).collect()
    }
    pub fn unscale_inputs(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.inputs).map(|(v, c)| c.inverse(*v)).collect()
    }
    pub fn scale_states(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.states).map(|(v, c)| c.forward(*v)).collect()
    }
    pub fn unscale_states(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.states).map(|(v, c)| c.inverse(*v)).collect()
    }
    pub fn scale_outputs(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.outputs).map(|(v, c)| c.forward(*v)).collect()
    }
    pub fn unscale_outputs(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.outputs).map(|(v, c)| c.inverse(*v)).collect()
    }
}

/// Per-channel min/max after applying `ln` on flagged channels.
///
/// `inputs`, `states` and `outputs` are iterators over raw rows.
pub fn fit_scaling<'a>(
    inputs: impl IntoIterator<Item = &'a [f64]>,
    states: impl IntoIterator<Item = &'a [f64]>,
    outputs: impl IntoIterator<Item = &'a [f64]>,
    names: &ChannelNames,
    log_channels: &LogChannels,
) -> Result<ScalingSpec> {
    Ok(ScalingSpec {
        inputs: fit_group(inputs, &names.inputs, &log_channels.inputs)?,
        states: fit_group(states, &names.states, &log_channels.states)?,
        outputs: fit_group(outputs, &names.outputs, &log_channels.outputs)?,
    })
}

fn fit_group<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    names: &[String],
    logs: &[usize],
) -> Result<Vec<ChannelScale>> {
    let n = names.len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let is_log: Vec<bool> = (0..n).map(|i| logs.contains(&i)).collect();
    let mut seen = false;
    for row in rows {
        seen = true;
        if row.len() != n {
            return Err(Error::Shape(format!("scaling row has {} channels, expected {n}", row.len())));
        }
        for (i, &v) in row.iter().enumerate() {
            let t = if is_log[i] {
                if !(v > 0.0) {
                    return Err(Error::NonPositiveLogChannel { channel: names[i].clone(), value: v });
                }
                v.ln()
            } else {
                v
            };
            lo[i] = lo[i].min(t);
            hi[i] = hi[i].max(t);
        }
    }
    if !seen {
        return Err(Error::EmptyDataset);
    }
    (0..n)
        .map(|i| {
            if !(hi[i] > lo[i]) {
                Err(Error::DegenerateChannel(names[i].clone()))
            } else {
                Ok(ChannelScale { name: names[i].clone(), log: is_log[i], min: lo[i], max: hi[i] })
            }
        })
        .collect()
}
