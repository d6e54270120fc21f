//! Run reports and their CSV/JSON serialization.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::table::fmt_float;

/// One verification or comparison. `se`, `n_paths` and `seed` are present
/// exactly for Monte Carlo checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check_name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub se: Option<f64>,
    pub tolerance: f64,
    pub n_paths: Option<usize>,
    pub seed: Option<u64>,
    pub pass: bool,
}

impl CheckRecord {
    /// Deterministic check `|lhs - rhs| <= tolerance`.
    pub fn exact(name: &str, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let gap = lhs - rhs;
        CheckRecord {
            check_name: name.to_string(),
            lhs,
            rhs,
            gap,
            se: None,
            tolerance,
            n_paths: None,
            seed: None,
            pass: gap.abs() <= tolerance,
        }
    }

    /// Monte Carlo check `|lhs - rhs| <= tolerance`.
    #[allow(clippy::too_many_arguments)]
    pub fn monte_carlo(name: &str, lhs: f64, rhs: f64, se: f64, tolerance: f64, n_paths: usize, seed: u64) -> Self {
        CheckRecord { se: Some(se), n_paths: Some(n_paths), seed: Some(seed), ..CheckRecord::exact(name, lhs, rhs, tolerance) }
    }

    /// One-sided check `lhs <= rhs + tolerance`.
    pub fn at_most(mut self) -> Self {
        self.pass = self.gap <= self.tolerance;
        self
    }

    /// Pathwise bound on a nonnegative quantity run over `n_paths` paths.
    pub fn with_paths(mut self, n_paths: usize, seed: u64) -> Self {
        self.n_paths = Some(n_paths);
        self.seed = Some(seed);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub name: String,
    pub value: f64,
}

/// Keys serialize in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub spec_hash: String,
    pub seed: u64,
    pub step: f64,
    pub n_paths: usize,
    pub start_time: f64,
    pub start_state: usize,
    pub outputs: Vec<String>,
    pub quantities: Vec<Quantity>,
    pub checks: Vec<CheckRecord>,
}

impl RunReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn push_quantity(&mut self, name: &str, value: f64) {
        self.quantities.push(Quantity { name: name.to_string(), value });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

pub const CHECK_COLUMNS: [&str; 9] = ["check_name", "lhs", "rhs", "gap", "se", "tolerance", "n_paths", "seed", "pass"];

/// JSON: the whole report as one object. CSV: one row per check.
pub fn emit<W: Write>(report: &RunReport, format: Format, mut out: W) -> io::Result<()> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, report)?;
            writeln!(out)
        }
        Format::Csv => {
            writeln!(out, "{}", CHECK_COLUMNS.join(","))?;
            for c in &report.checks {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    c.check_name,
                    fmt_float(c.lhs),
                    fmt_float(c.rhs),
                    fmt_float(c.gap),
                    c.se.map(fmt_float).unwrap_or_default(),
                    fmt_float(c.tolerance),
                    c.n_paths.map(|n| n.to_string()).unwrap_or_default(),
                    c.seed.map(|s| s.to_string()).unwrap_or_default(),
                    c.pass
                )?;
            }
            Ok(())
        }
    }
}
