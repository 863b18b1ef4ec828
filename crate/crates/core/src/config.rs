//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::solvers::{Method, SolverConfig};
use crate::train::{DataConfig, TrainConfig};

/// Post-training evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Per-sample Picard run whose mean NFE measures convergence speed.
    pub picard: SolverConfig,
    /// Hard-stop budgets `K` evaluated with `hard_stop`.
    pub budgets: Vec<usize>,
    /// Solver used at each budget; its own `max_nfe` is replaced by `K`.
    pub hard_stop: SolverConfig,
    pub surface_x_points: usize,
    pub surface_z_points: usize,
    pub trace_xs: Vec<f64>,
    pub trace_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            picard: SolverConfig::new(Method::Picard, 1e-3, 200),
            budgets: vec![2, 6, 30],
            hard_stop: SolverConfig::new(Method::Broyden, 1e-8, 30),
            surface_x_points: 61,
            surface_z_points: 81,
            trace_xs: vec![-1.0, 0.0, 1.0],
            trace_steps: 60,
        }
    }
}

impl EvalConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = self.picard.problems(&format!("{prefix}.picard"));
        out.extend(self.hard_stop.problems(&format!("{prefix}.hard_stop")));
        if self.budgets.iter().any(|&k| k == 0) {
            out.push(format!("{prefix}.budgets entries must be positive"));
        }
        if self.surface_x_points < 2 || self.surface_z_points < 2 {
            out.push(format!("{prefix}.surface_x_points and surface_z_points must be at least 2"));
        }
        if self.trace_xs.iter().any(|x| !x.is_finite()) {
            out.push(format!("{prefix}.trace_xs must be finite"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub label: String,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: "run".into(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every violated constraint, with dotted field paths.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let label_ok = !self.label.is_empty()
            && self
                .label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
        if !label_ok {
            out.push(format!(
                "label must be non-empty and use only [A-Za-z0-9._-], got {:?}",
                self.label
            ));
        }
        out.extend(self.data.problems("data"));
        out.extend(self.train.problems("train"));
        out.extend(self.eval.problems("eval"));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `<root>/<label>-<first 12 hex digits of the hash>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.label, &self.hash()[..12]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"label": "g4", "train": {"reg": {"gamma": 4.0}}}"#, Path::new("mem")).unwrap();
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.train.reg.gamma.at(0, 10), 4.0);
        assert_eq!(cfg.train.reg.prob, 0.4);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = RunConfig::from_json(r#"{"train": {"epoch": 3}}"#, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn every_problem_is_listed() {
        let mut cfg = RunConfig::default();
        cfg.label = "a b".into();
        cfg.train.lr = -1.0;
        cfg.train.forward.eps = 0.0;
        cfg.train.reg.prob = 1.5;
        cfg.data.n_valid = 0;
        let p = cfg.problems();
        assert_eq!(p.len(), 5, "{p:?}");
        assert!(p.iter().any(|m| m.starts_with("train.forward.eps")));
        assert!(p.iter().any(|m| m.starts_with("train.reg.prob")));
    }

    #[test]
    fn run_dir_depends_on_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed = 1;
        let root = Path::new("/tmp/x");
        assert_ne!(a.run_dir(root), b.run_dir(root));
        assert!(a.run_dir(root).to_string_lossy().starts_with("/tmp/x/run-"));
    }
}
