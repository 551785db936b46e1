//! Run reporting: summary lines and assertion results to standard output,
//! CSV and JSON artifacts to the output directory, and a manifest tying
//! the artifacts back to the exact config that produced them.
//!
//! Artifact writing is deterministic: numbers are printed in a fixed
//! scientific format, rows follow the input order, and parallel stages
//! collect into order-preserving vectors before anything is written, so a
//! rerun with the same config and seed produces byte-identical CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Fixed-width float formatting for CSV cells.
pub fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.12e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// One named pass/fail check from the config's assertion block.
#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Collects summary lines, assertions, and artifact names for one run.
pub struct RunReport {
    pub command: &'static str,
    out_dir: PathBuf,
    lines: Vec<String>,
    assertions: Vec<Assertion>,
    artifacts: Vec<String>,
}

impl RunReport {
    pub fn new(command: &'static str, out_dir: &Path) -> std::io::Result<RunReport> {
        std::fs::create_dir_all(out_dir)?;
        Ok(RunReport {
            command,
            out_dir: out_dir.to_path_buf(),
            lines: Vec::new(),
            assertions: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn line(&mut self, text: String) {
        self.lines.push(text);
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    /// Convenience check `value <= bound`.
    pub fn check_at_most(&mut self, name: &str, value: f64, bound: f64) {
        self.check(
            name,
            value <= bound,
            format!("{value:.6e} <= {bound:.6e}"),
        );
    }

    /// Convenience check `value >= bound`.
    pub fn check_at_least(&mut self, name: &str, value: f64, bound: f64) {
        self.check(
            name,
            value >= bound,
            format!("{value:.6e} >= {bound:.6e}"),
        );
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn write_csv(
        &mut self,
        name: &str,
        header: &str,
        rows: &[Vec<String>],
    ) -> std::io::Result<()> {
        let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
        text.push_str(header);
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        std::fs::write(self.out_dir.join(name), text)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.out_dir.join(name), text)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn write_binary(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        std::fs::write(self.out_dir.join(name), bytes)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    /// Prints the human-readable summary and writes the manifest. Returns
    /// whether every assertion passed.
    pub fn finish(
        mut self,
        config_path: &Path,
        config_sha256: &str,
        jobs: Option<usize>,
        started: std::time::Instant,
    ) -> std::io::Result<bool> {
        let passed = self.passed();
        let manifest = Manifest {
            command: self.command,
            config: config_path.display().to_string(),
            config_sha256: config_sha256.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            jobs,
            wall_seconds: started.elapsed().as_secs_f64(),
            artifacts: self.artifacts.clone(),
            assertions: self.assertions.clone(),
            passed,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.out_dir.join("manifest.json"), text)?;

        let stdout = std::io::stdout();
        let mut w = stdout.lock();
        for line in &self.lines {
            writeln!(w, "{line}")?;
        }
        for a in &self.assertions {
            let status = if a.passed { "pass" } else { "FAIL" };
            writeln!(w, "assert {}: {status} ({})", a.name, a.detail)?;
        }
        writeln!(
            w,
            "{}: {} ({} artifacts in {})",
            self.command,
            if passed { "PASS" } else { "FAIL" },
            self.artifacts.len() + 1,
            self.out_dir.display()
        )?;
        self.artifacts.push("manifest.json".to_string());
        Ok(passed)
    }
}

/// Provenance record written next to the artifacts.
#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    config: String,
    config_sha256: String,
    version: &'static str,
    jobs: Option<usize>,
    wall_seconds: f64,
    artifacts: Vec<String>,
    assertions: Vec<Assertion>,
    passed: bool,
}
