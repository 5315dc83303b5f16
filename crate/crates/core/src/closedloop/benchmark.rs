use std::fmt;
use std::io::Write;

use serde::Serialize;

use super::{run_closed_loop, Controller, ControllerKind, Scenario};
use crate::dynamics::PlantModel;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub controller: String,
    pub samples: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    /// `1 - mean / mean_ideal`; absent without an ideal-NMPC row.
    pub reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn row(&self, controller: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.controller == controller)
    }

    /// `mean_ideal / mean_controller`.
    pub fn speedup(&self, controller: &str) -> Option<f64> {
        let ideal = self.row(ControllerKind::IdealNmpc.as_str())?;
        Some(ideal.mean_ms / self.row(controller)?.mean_ms)
    }

    /// `controller,mean_ms,max_ms,reduction`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["controller", "mean_ms", "max_ms", "reduction"])?;
        for r in &self.rows {
            wr.write_record([
                r.controller.clone(),
                format!("{:.6}", r.mean_ms),
                format!("{:.6}", r.max_ms),
                r.reduction.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

impl fmt::Display for BenchmarkTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>8} {:>14} {:>14} {:>12}", "controller", "solves", "mean CPU [ms]", "max CPU [ms]", "reduction")?;
        for r in &self.rows {
            let red = r.reduction.map(|v| format!("{:.1} %", 100.0 * v)).unwrap_or_else(|| "-".into());
            writeln!(f, "{:<14} {:>8} {:>14.3} {:>14.3} {:>12}", r.controller, r.samples, r.mean_ms, r.max_ms, red)?;
        }
        Ok(())
    }
}

/// Runs every scenario under every controller, one after another, and
/// tabulates solver wall time.
pub fn benchmark_cpu(plant: &PlantModel, controllers: &mut [&mut dyn Controller], scenarios: &[Scenario]) -> Result<BenchmarkTable> {
    let mut rows = Vec::with_capacity(controllers.len());
    for ctrl in controllers.iter_mut() {
        let mut times = Vec::new();
        for sc in scenarios {
            let log = run_closed_loop(plant, &mut **ctrl, sc)?;
            times.extend(log.rows.iter().map(|r| r.solve_ms));
        }
        let n = times.len();
        rows.push(BenchmarkRow {
            controller: ctrl.name().to_string(),
            samples: n,
            mean_ms: times.iter().sum::<f64>() / n.max(1) as f64,
            max_ms: times.iter().copied().fold(0.0, f64::max),
            reduction: None,
        });
    }
    if let Some(ideal) = rows.iter().find(|r| r.controller == ControllerKind::IdealNmpc.as_str()).map(|r| r.mean_ms) {
        for r in &mut rows {
            r.reduction = Some(1.0 - r.mean_ms / ideal);
        }
    }
    Ok(BenchmarkTable { rows })
}
