//! Run configuration: one TOML file with `[estimator]`, `[solver]`, `[sim]`
//! and `[output]` sections. Every section and key is optional, unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::IoError;
use crate::estimator::EstimatorConfig;
use crate::optimizer::SolverOptions;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory for results, relative to the working directory.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub estimator: EstimatorConfig,
    pub solver: SolverOptions,
    pub sim: SimConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let cfg: Self = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::Io { path: path.display().to_string(), source: e })?;
        Self::parse(&text).map_err(|e| match e {
            IoError::Config(m) => IoError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, IoError> {
        toml::to_string(self).map_err(|e| IoError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), IoError> {
        self.estimator.validate().map_err(|e| IoError::Config(e.to_string()))?;
        self.sim.validate().map_err(|e| IoError::Config(e.to_string()))?;
        if self.solver.max_iterations == 0 {
            return Err(IoError::Config("solver.max_iterations must be positive".into()));
        }
        if !(self.solver.initial_lambda >= 0.0) {
            return Err(IoError::Config("solver.initial_lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_fields() {
        let cfg = RunConfig::parse(
            "[estimator]\nmarginalization_strategy = 2\n[solver]\nmax_iterations = 7\n[sim]\nduration = 4.5\nspeed = \"fast\"\n[output]\ndir = \"res\"\n",
        )
        .unwrap();
        assert_eq!(cfg.estimator.marginalization_strategy, 2);
        assert_eq!(cfg.solver.max_iterations, 7);
        assert_eq!(cfg.sim.duration, 4.5);
        assert_eq!(cfg.output.dir, PathBuf::from("res"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[estimator]\nwindow = 3\n").is_err());
        assert!(RunConfig::parse("[solverr]\n").is_err());
        assert!(RunConfig::parse("seed = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[estimator]\nmarginalization_strategy = 3\n").is_err());
        assert!(RunConfig::parse("[sim]\nduration = -1.0\n").is_err());
        assert!(RunConfig::parse("[solver]\nmax_iterations = 0\n").is_err());
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.estimator.line_delay_init_us = 25.0;
        cfg.sim = cfg.sim.with_realistic_noise();
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
