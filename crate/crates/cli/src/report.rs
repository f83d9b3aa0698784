//! Pass/fail bookkeeping for subcommand runs.
//!
//! Each subcommand accumulates named threshold checks and the binary prints
//! them as machine-readable lines: one `PASS`/`FAIL` line per check with
//! `key=value` fields, then a final `RESULT` summary naming every failed
//! check. The process exits 0 iff every check passed.

/// One named numerical check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    /// Stable kebab-case identifier.
    pub id: String,
    pub passed: bool,
    /// `key=value` fields explaining the comparison.
    pub detail: String,
}

impl Check {
    /// Pass iff `measured ≤ limit` (and finite).
    pub fn below(id: impl Into<String>, measured: f64, limit: f64) -> Self {
        Check {
            id: id.into(),
            passed: measured.is_finite() && measured <= limit,
            detail: format!("measured={measured:.6e} limit={limit:.6e}"),
        }
    }

    /// Pass iff `|value − target| ≤ tolerance` (and finite).
    pub fn within(id: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Check {
            id: id.into(),
            passed: value.is_finite() && (value - target).abs() <= tolerance,
            detail: format!("value={value:.6e} target={target:.6e} tolerance={tolerance:.6e}"),
        }
    }
}

/// The accumulated checks of one subcommand run.
#[derive(Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Render the per-check lines and the `RESULT` summary.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            let verdict = if check.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{verdict} {} {}\n", check.id, check.detail));
        }
        let failed: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.id.as_str())
            .collect();
        if failed.is_empty() {
            out.push_str(&format!("RESULT PASS checks={}\n", self.checks.len()));
        } else {
            out.push_str(&format!(
                "RESULT FAIL checks={} failures={} failed={}\n",
                self.checks.len(),
                failed.len(),
                failed.join(",")
            ));
        }
        out
    }
}
