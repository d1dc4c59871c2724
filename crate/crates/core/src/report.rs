//! Seeded experiment records and their CSV form.
//!
//! Every numerical check produces an [`ExperimentReport`]: the resolved
//! configuration, one row per trial (or grid point), and a list of
//! pass/fail [`Check`]s comparing a measured quantity against its bound.

use std::fmt;
use std::path::Path;

use crate::error::Result;

/// One pass/fail comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// Extra allowance already folded into the comparison (e.g. 3·SE).
    pub slack: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value ≤ bound + slack`.
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64, slack: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            slack,
            passed: value <= bound + slack,
            detail: String::new(),
        }
    }

    /// Passes when `value ≥ bound − slack`.
    pub fn at_least(name: impl Into<String>, value: f64, bound: f64, slack: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            slack,
            passed: value >= bound - slack,
            detail: String::new(),
        }
    }

    /// A check whose outcome was decided by the caller.
    pub fn flag(name: impl Into<String>, passed: bool, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            slack: 0.0,
            passed,
            detail: String::new(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn status(&self) -> &'static str {
        if self.passed {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} value={:.6e} bound={:.6e} slack={:.3e}",
            self.status(),
            self.name,
            self.value,
            self.bound,
            self.slack
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Configuration, per-trial rows and checks of one experiment run.
#[derive(Clone, Debug, Default)]
pub struct ExperimentReport {
    pub name: String,
    pub config: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.config.push((key.into(), value.to_string()));
        self
    }

    /// Appends a row; every cell is rendered with `Display`, which for
    /// floats is the shortest string that round-trips.
    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(
            cells.len(),
            self.columns.len(),
            "row width for {}",
            self.name
        );
        self.rows.push(cells);
    }

    pub fn check(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Appends another report's checks, keeping their order.
    pub fn absorb_checks(&mut self, other: &ExperimentReport) {
        self.checks.extend(other.checks.iter().cloned());
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the checks as CSV `(check, value, bound, slack, status)`.
    pub fn write_checks_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["check", "value", "bound", "slack", "status"])?;
        for c in &self.checks {
            w.write_record([
                c.name.clone(),
                c.value.to_string(),
                c.bound.to_string(),
                c.slack.to_string(),
                c.status().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Formats a list of displayable values as report cells.
#[macro_export]
macro_rules! cells {
    ($($v:expr),* $(,)?) => { vec![$($v.to_string()),*] };
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_directions() {
        assert!(Check::at_most("a", 1.0, 1.0, 0.0).passed);
        assert!(!Check::at_most("a", 1.1, 1.0, 0.05).passed);
        assert!(Check::at_least("b", 0.96, 1.0, 0.05).passed);
        let line = Check::at_most("thing", 0.5, 1.0, 0.0)
            .with_detail("n=3")
            .to_string();
        assert!(line.starts_with("PASS thing value=5.000000e-1"));
        assert!(line.ends_with("(n=3)"));
    }

    #[test]
    fn csv_has_header_then_rows() {
        let mut r = ExperimentReport::new("demo", &["trial", "value"]);
        r.row(cells![0, 0.25]);
        r.row(cells![1, 1e-20]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "trial,value\n0,0.25\n1,0.00000000000000000001\n");
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (1.666_666_666_666_666_7f64 / 4.0).sqrt()).abs() < 1e-12);
    }
}
