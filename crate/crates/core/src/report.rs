//! File outputs: the transition-field CSV and the JSON reports.
//!
//! CSV rows carry the node time followed by the |S|² matrix entries in
//! row-major order, all printed with 17 significant digits so values
//! round-trip exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::kernel::{DefectReport, MinimalSolution, ResidualReport, SeriesReport, TransitionField};

/// Serializable digest of a defect table.
#[derive(Debug, Clone, Serialize)]
pub struct DefectSummary {
    pub max: f64,
    pub regular: bool,
    pub tolerance: f64,
    /// Clamped defect per state at the final node.
    pub final_defect: Vec<f64>,
}

impl DefectSummary {
    pub fn from_report(report: &DefectReport) -> Self {
        let last = report.per_node.nrows() - 1;
        Self {
            max: report.max,
            regular: report.regular,
            tolerance: report.tol,
            final_defect: report.per_node.row(last).to_vec(),
        }
    }
}

/// JSON artifact of a `build` run.
#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub series: SeriesReport,
    pub forward_residual: ResidualReport,
    pub backward_residual: ResidualReport,
    pub defect: DefectSummary,
}

impl BuildReport {
    pub fn new(
        sol: &MinimalSolution,
        forward: ResidualReport,
        backward: ResidualReport,
        defect: &DefectReport,
    ) -> Self {
        Self {
            series: sol.report.clone(),
            forward_residual: forward,
            backward_residual: backward,
            defect: DefectSummary::from_report(defect),
        }
    }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write a transition field as CSV: header, then one row per node with the
/// time and the matrix entries in row-major order.
pub fn write_field_csv(path: &Path, field: &TransitionField) -> Result<()> {
    let n = field.dim();
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::from("t");
    for i in 0..n {
        for j in 0..n {
            header.push_str(&format!(",p_{i}_{j}"));
        }
    }
    writeln!(w, "{header}")?;
    for (b, m) in field.matrices.iter().enumerate() {
        let mut line = fmt17(field.grid.nodes()[b]);
        for i in 0..n {
            for j in 0..n {
                line.push(',');
                line.push_str(&fmt17(m[[i, j]]));
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Write per-time curves as CSV (shared by the queue metrics output).
pub fn write_curves_csv(path: &Path, columns: &[(&str, &[f64])]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<&str> = columns.iter().map(|(name, _)| *name).collect();
    writeln!(w, "{}", header.join(","))?;
    let rows = columns.first().map_or(0, |(_, c)| c.len());
    for r in 0..rows {
        let line: Vec<String> = columns.iter().map(|(_, c)| fmt17(c[r])).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON artifact.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| crate::error::Error::Config(format!("cannot serialize report: {e}")))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{minimal_solution, KernelOptions};
    use crate::rates::{PiecewiseConstantRates, StateSpace};
    use ndarray::array;

    #[test]
    fn field_csv_round_trips_17_digits() {
        let rates = PiecewiseConstantRates::constant(
            StateSpace::indexed(2),
            array![[-1.0, 1.0], [2.0, -2.0]],
            1.0,
        )
        .unwrap()
        .into();
        let sol = minimal_solution(&rates, 0.0, 1.0, &KernelOptions::new(0.25)).unwrap();
        let dir = std::env::temp_dir().join("minq_report_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.csv");
        write_field_csv(&path, &sol.field).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,p_0_0,p_0_1,p_1_0,p_1_1");
        let last = text.lines().last().unwrap();
        let cols: Vec<&str> = last.split(',').collect();
        assert_eq!(cols.len(), 5);
        let p00: f64 = cols[1].parse().unwrap();
        assert_eq!(p00, sol.field.at_time(1.0).unwrap()[[0, 0]]);
    }
}
