use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub runtime_s: f64,
}

impl OracleReport {
    pub fn new(case: impl Into<String>, max_abs_diff: f64, max_rel_diff: f64, tolerance: f64, runtime_s: f64) -> Self {
        OracleReport {
            case: case.into(),
            max_abs_diff,
            max_rel_diff,
            tolerance,
            passed: max_rel_diff <= tolerance,
            runtime_s,
        }
    }

    pub const CSV_HEADER: &'static str = "case,max_abs_diff,max_rel_diff,tolerance,pass,runtime_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{:.3}",
            self.case,
            self.max_abs_diff,
            self.max_rel_diff,
            self.tolerance,
            if self.passed { "pass" } else { "fail" },
            self.runtime_s
        )
    }
}

pub fn write_reports(path: &Path, reports: &[OracleReport]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(OracleReport::CSV_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_iff_within_tolerance() {
        assert!(OracleReport::new("a", 1.0, 1e-5, 1e-5, 0.0).passed);
        assert!(!OracleReport::new("a", 1.0, 2e-5, 1e-5, 0.0).passed);
        assert!(!OracleReport::new("a", 1.0, f64::NAN, 1e-5, 0.0).passed);
    }
}
