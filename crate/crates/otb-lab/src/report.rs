//! CSV emission with a stable schema: fixed column order, header row, LF
//! line endings, and floats at 17 significant digits so reruns are
//! byte-identical.

use std::path::Path;

use crate::HarnessError;

/// Decimal form with 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Minimal CSV builder. Values here never contain commas or quotes, so no
/// escaping is performed.
pub struct Csv {
    columns: usize,
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Self {
            columns: header.len(),
            buf,
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "csv row width mismatch");
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn into_string(self) -> String {
        self.buf
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// One verification check: an identity that either held to tolerance or did
/// not, with the measured residual.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub seed: u64,
    pub name: String,
    pub pass: bool,
    pub residual: f64,
}

impl CheckResult {
    pub fn new(seed: u64, name: impl Into<String>, pass: bool, residual: f64) -> Self {
        Self {
            seed,
            name: name.into(),
            pass,
            residual,
        }
    }

    /// Residual-vs-tolerance form.
    pub fn tol(seed: u64, name: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        Self::new(seed, name, residual.abs() <= tolerance, residual)
    }
}

pub fn checks_to_csv(checks: &[CheckResult]) -> String {
    let mut csv = Csv::new(&["seed", "check", "pass", "residual"]);
    for c in checks {
        csv.row(&[
            c.seed.to_string(),
            c.name.clone(),
            if c.pass { "pass" } else { "fail" }.to_string(),
            fmt_f64(c.residual),
        ]);
    }
    csv.into_string()
}
