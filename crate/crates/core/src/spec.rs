//! Problem files: one JSON object with sections `model`, `g`, `driver`,
//! `control`, `reduction` and `run`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{self, ControlModel, RawControl, RawReduction};
use crate::model::{self, Model, RawModel};
use crate::pde::{AffineDriver, Driver, RawAffine};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid {location}: {message}")]
    Validation { location: String, message: String },
}

fn invalid(location: &str, message: impl ToString) -> SpecError {
    SpecError::Validation { location: location.to_string(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RawDriver {
    Zero,
    Affine(RawAffine),
    /// Uses the `control` section.
    Hamiltonian,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n_paths: Option<usize>,
    #[serde(default)]
    pub step: Option<f64>,
    /// `[t, x]`
    #[serde(default)]
    pub start: Option<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSpec {
    pub model: RawModel,
    /// Terminal vector; the control section carries its own.
    #[serde(default)]
    pub g: Option<Vec<f64>>,
    #[serde(default)]
    pub driver: Option<RawDriver>,
    #[serde(default)]
    pub control: Option<RawControl>,
    #[serde(default)]
    pub reduction: Option<RawReduction>,
    #[serde(default)]
    pub run: RunParams,
}

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_PATHS: usize = 10_000;
pub const DEFAULT_STEP: f64 = 1e-3;

/// Validated problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub model: Model,
    pub g: Option<Vec<f64>>,
    pub driver: Driver,
    pub control: Option<Arc<ControlModel>>,
    pub reduction: Option<RawReduction>,
    pub run: RunParams,
    /// SHA-256 of the file bytes, lowercase hex.
    pub hash: String,
}

impl ProblemSpec {
    pub fn seed(&self) -> u64 {
        self.run.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn n_paths(&self) -> usize {
        self.run.n_paths.unwrap_or(DEFAULT_PATHS)
    }

    pub fn step(&self) -> f64 {
        self.run.step.unwrap_or(DEFAULT_STEP)
    }

    pub fn start(&self) -> (f64, usize) {
        self.run.start.unwrap_or((0.0, 0))
    }

    /// Terminal vector for the Kolmogorov solve: `g`, else the control's.
    pub fn terminal(&self) -> Option<&[f64]> {
        self.g
            .as_deref()
            .or_else(|| self.control.as_ref().map(|c| c.terminal_cost()))
    }
}

pub fn load_spec(path: &Path) -> Result<ProblemSpec, SpecError> {
    let bytes = std::fs::read(path).map_err(|source| SpecError::Io { path: path.display().to_string(), source })?;
    parse_spec(&bytes)
}

pub fn parse_spec(bytes: &[u8]) -> Result<ProblemSpec, SpecError> {
    let raw: RawSpec = serde_json::from_slice(bytes).map_err(|e| SpecError::Parse(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(bytes));
    validate_spec(raw, hash)
}

pub fn validate_spec(raw: RawSpec, hash: String) -> Result<ProblemSpec, SpecError> {
    let model = model::validate_model(&raw.model).map_err(|e| invalid("model", e))?;
    let n = model.n_states();
    if let Some(g) = &raw.g {
        if g.len() != n {
            return Err(invalid("g", format!("length {} but the model section has {n} states", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(invalid("g", "non-finite entry"));
        }
    }
    let control = match &raw.control {
        None => None,
        Some(c) => {
            let cn = c.g.len();
            let shapes_match = cn == n
                && c.r.iter().flatten().all(|mat| mat.len() == n && mat.iter().all(|row| row.len() == n))
                && c.l.iter().all(|rows| rows.len() == n);
            if !shapes_match {
                return Err(invalid(
                    "control",
                    format!("control section is sized for {cn} states but the model section has {n} states"),
                ));
            }
            if (c.time_cells.as_ref().and_then(|b| b.last()).copied()).is_some_and(|end| end != model.horizon()) {
                return Err(invalid("control", "time_cells must end at the model horizon"));
            }
            Some(Arc::new(control::validate_control(c, &model).map_err(|e| invalid("control", e))?))
        }
    };
    let driver = match raw.driver.clone().unwrap_or(RawDriver::Zero) {
        RawDriver::Zero => Driver::Zero,
        RawDriver::Affine(a) => {
            Driver::Affine(Arc::new(AffineDriver::new(&model, &a).map_err(|e| invalid("driver", e))?))
        }
        RawDriver::Hamiltonian => match &control {
            Some(cm) => Driver::Hamiltonian(cm.clone()),
            None => return Err(invalid("driver", "hamiltonian driver requires a control section")),
        },
    };
    let run = raw.run.clone();
    if let Some(h) = run.step {
        if !(h.is_finite() && h > 0.0) {
            return Err(invalid("run.step", format!("{h} must be positive")));
        }
    }
    if let Some((t, x)) = run.start {
        if !(t >= 0.0 && t <= model.horizon()) || x >= n {
            return Err(invalid("run.start", format!("({t}, {x}) outside [0, {}] x 0..{n}", model.horizon())));
        }
    }
    Ok(ProblemSpec { model, g: raw.g, driver, control, reduction: raw.reduction, run, hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"model": {"states": 2, "horizon": 1.0, "nu": [[[0, 2], [3, 0]]]}, "g": [1, 0]}"#;

    #[test]
    fn minimal_spec() {
        let s = parse_spec(TWO.as_bytes()).unwrap();
        assert_eq!(s.model.n_states(), 2);
        assert_eq!(s.terminal().unwrap(), &[1.0, 0.0]);
        assert_eq!(s.driver.tag(), "zero");
        assert_eq!(s.hash.len(), 64);
        assert_eq!((s.seed(), s.n_paths(), s.step(), s.start()), (0, 10_000, 1e-3, (0.0, 0)));
    }

    #[test]
    fn unknown_driver_tag_is_a_parse_error() {
        let text = TWO.replace("\"g\"", "\"driver\": {\"type\": \"quadratic\"}, \"g\"");
        let err = parse_spec(text.as_bytes()).unwrap_err();
        match err {
            SpecError::Parse(msg) => assert!(msg.contains("quadratic"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn control_size_mismatch_names_both_sections() {
        let text = TWO.replace(
            "\"g\"",
            r#""control": {"actions": 1, "r": [[[[1,1,1],[1,1,1],[1,1,1]]]], "l": [[[0],[0],[0]]], "g": [0,0,0]}, "g""#,
        );
        let msg = parse_spec(text.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("control") && msg.contains("model"), "{msg}");
    }

    #[test]
    fn hamiltonian_needs_control() {
        let text = TWO.replace("\"g\"", "\"driver\": {\"type\": \"hamiltonian\"}, \"g\"");
        assert!(matches!(parse_spec(text.as_bytes()), Err(SpecError::Validation { .. })));
    }
}
