//! Machine-readable run reports.
//!
//! Every verification produces rows of `check,estimate,tolerance,verdict`.
//! Estimates and tolerances are printed with 17 significant digits (enough to
//! round-trip an `f64` exactly) and files always use LF line endings
//! regardless of platform.

use std::io::Write;
use std::path::Path;

use crate::adjoint::{FirstAdjoint, SecondAdjoint};
use crate::error::Result;
use crate::grid::TimeGrid;

/// One verification row.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub check: String,
    pub estimate: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(check: impl Into<String>, estimate: f64, tolerance: f64, pass: bool) -> Self {
        CheckRow {
            check: check.into(),
            estimate,
            tolerance,
            pass,
        }
    }

    /// Row whose verdict is `estimate <= tolerance` in absolute value.
    pub fn within(check: impl Into<String>, estimate: f64, tolerance: f64) -> Self {
        CheckRow {
            check: check.into(),
            estimate,
            tolerance,
            pass: estimate.abs() <= tolerance,
        }
    }
}

/// A labelled collection of verification rows.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub rows: Vec<CheckRow>,
}

impl RunReport {
    pub fn push(&mut self, row: CheckRow) {
        self.rows.push(row);
    }

    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Serialise as CSV (header + one row per check, LF endings).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,estimate,tolerance,verdict\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{}\n",
                r.check,
                r.estimate,
                r.tolerance,
                if r.pass { "pass" } else { "fail" }
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// A short human-readable summary, one line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "[{}] {}: estimate {:.6e}, tolerance {:.6e}\n",
                if r.pass { "PASS" } else { "FAIL" },
                r.check,
                r.estimate,
                r.tolerance
            ));
        }
        out.push_str(&format!(
            "{} of {} checks passed\n",
            self.rows.iter().filter(|r| r.pass).count(),
            self.rows.len()
        ));
        out
    }
}

/// Export per-particle adjoint trajectories as CSV
/// (`time,particle,p,q,P,Q,P1,Q1`), forward steps only.
pub fn write_adjoint_csv(
    path: &Path,
    grid: &TimeGrid,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
    max_particles: usize,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"time,particle,p,q,P,Q,P1,Q1\n")?;
    let np = first.p.particles().min(max_particles);
    for j in 0..=grid.n() as i64 {
        let t = grid.time(j);
        let (ps, qs) = (first.p.col(j), first.q.col(j));
        let (pps, qqs) = (second.p.col(j), second.q.col(j));
        let (p1s, q1s) = (second.p1.col(j), second.q1.col(j));
        for i in 0..np {
            writeln!(
                f,
                "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                t, i, ps[i], qs[i], pps[i], qqs[i], p1s[i], q1s[i]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape_and_endings() {
        let mut rep = RunReport::default();
        rep.push(CheckRow::within("alpha", 0.5, 1.0));
        rep.push(CheckRow::new("beta", 2.0, 1.0, false));
        let csv = rep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "check,estimate,tolerance,verdict");
        let row = lines.next().unwrap();
        assert!(row.starts_with("alpha,5.0000000000000000e-1,"));
        assert!(row.ends_with(",pass"));
        assert!(lines.next().unwrap().ends_with(",fail"));
        assert!(!csv.contains('\r'));
        assert!(!rep.all_passed());
    }

    #[test]
    fn seventeen_significant_digits_round_trip() {
        let v = 0.1f64 + 0.2f64; // not exactly 0.3
        let mut rep = RunReport::default();
        rep.push(CheckRow::within("roundtrip", v, 1.0));
        let csv = rep.to_csv();
        let field = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        let back: f64 = field.parse().unwrap();
        assert_eq!(back, v);
    }
}
