//! CSV rendering. Floats are written with 17 significant digits so the
//! files round-trip exactly and compare byte-for-byte.

use std::io::Write;

use crate::error::Result;

use super::engine::{run_mse_experiment, McSummary};
use super::selection::SelectionTable;
use super::spec::ExperimentSpec;

pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

impl McSummary {
    pub const LONG_HEADER: &'static str = "point,axis_value,n,p,q,estimator,criterion,c_used,reps,bias,bias_se,mse,mse_se,improvement_pct,improvement_se";

    /// One row per grid point and estimator.
    pub fn write_long_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::LONG_HEADER)?;
        for point in &self.points {
            for e in &point.estimators {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    point.index,
                    fmt_float(point.axis_value),
                    point.dims.n,
                    point.dims.p,
                    point.dims.q,
                    e.label,
                    e.name,
                    fmt_opt(e.c_used),
                    self.reps,
                    fmt_float(e.bias),
                    fmt_float(e.bias_se),
                    fmt_float(e.mse),
                    fmt_float(e.mse_se),
                    fmt_float(e.improvement_pct),
                    fmt_float(e.improvement_se),
                )?;
            }
        }
        Ok(())
    }

    /// One row per grid point: the sweep value, then MSE, its standard
    /// error, improvement and its standard error for every estimator.
    pub fn write_wide_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let axis = if self.sweep_axis.is_empty() { "axis_value" } else { &self.sweep_axis };
        let mut header = vec![axis.to_string()];
        for label in &self.labels {
            for suffix in ["mse", "mse_se", "improvement_pct", "improvement_se"] {
                header.push(format!("{label}_{suffix}"));
            }
        }
        writeln!(out, "{}", header.join(","))?;
        for point in &self.points {
            let mut row = vec![fmt_float(point.axis_value)];
            for e in &point.estimators {
                row.push(fmt_float(e.mse));
                row.push(fmt_float(e.mse_se));
                row.push(fmt_float(e.improvement_pct));
                row.push(fmt_float(e.improvement_se));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_long_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_long_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn to_wide_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_wide_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Runs `spec` and renders the sweep as wide CSV.
pub fn improvement_grid(spec: &ExperimentSpec) -> Result<String> {
    Ok(run_mse_experiment(spec)?.to_wide_csv())
}

impl SelectionTable {
    pub const HEADER: &'static str = "criterion,order,count,frequency,c_used";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for (i, label) in self.labels.iter().enumerate() {
            for (j, order) in self.orders.iter().enumerate() {
                let count = self.counts[i][j];
                writeln!(
                    out,
                    "{label},{order},{count},{},{}",
                    fmt_float(count as f64 / self.realizations as f64),
                    fmt_opt(self.c_used[i][j]),
                )?;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}
