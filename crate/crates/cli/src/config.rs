//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use autodml::simulate::MonteCarloConfig;
use autodml::{DgpKind, DgpSpec, EstimatorKind, ProblemConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Estimate,
    Simulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(xs) => xs.clone(),
        }
    }
}

/// Data-generating process of a simulation; `n` may list several sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpGrid {
    pub kind: DgpKind,
    pub n: OneOrMany<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub local_perturbation: bool,
    #[serde(default)]
    pub censor: Option<u32>,
    #[serde(default)]
    pub t0: Option<u32>,
}

impl DgpGrid {
    pub fn specs(&self) -> Vec<DgpSpec> {
        self.n
            .to_vec()
            .into_iter()
            .map(|n| {
                let mut s = DgpSpec::new(self.kind, n, self.seed);
                s.local_perturbation = self.local_perturbation;
                if let Some(c) = self.censor {
                    s.censor = c;
                }
                if let Some(t) = self.t0 {
                    s.t0 = t;
                }
                s
            })
            .collect()
    }
}

/// File schema. `estimate` reads `data` and one `estimator`; `simulate`
/// reads `dgp`, `replicates` and `estimator` (one name or a list).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub estimator: OneOrMany<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub problem: ProblemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<DgpGrid>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Relative data paths in the file are relative to the file.
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    /// Checks the fields `command` needs and that a stated `command` agrees.
    pub fn validate_for(&self, command: Command) -> Result<(), CliError> {
        if let Some(c) = self.command {
            if c != command {
                return Err(CliError::Config(format!("config is for `{c:?}`, invoked as `{command:?}`")));
            }
        }
        self.problem.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.estimators()?;
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be >= 1".into()));
        }
        match command {
            Command::Estimate => {
                if self.data.is_none() {
                    return Err(CliError::Config("estimate needs `data` or --data".into()));
                }
                if let OneOrMany::Many(v) = &self.estimator {
                    if v.len() != 1 {
                        return Err(CliError::Config("estimate takes exactly one estimator".into()));
                    }
                }
            }
            Command::Simulate => {
                self.monte_carlo()?.validate().map_err(|e| CliError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn estimators(&self) -> Result<Vec<EstimatorKind>, CliError> {
        let names = self.estimator.to_vec();
        if names.is_empty() {
            return Err(CliError::Config("no estimator given".into()));
        }
        names
            .iter()
            .map(|s| s.parse().map_err(|e: autodml::Error| CliError::Config(e.to_string())))
            .collect()
    }

    pub fn monte_carlo(&self) -> Result<MonteCarloConfig, CliError> {
        let dgp = self.dgp.as_ref().ok_or_else(|| CliError::Config("simulate needs a [dgp] table".into()))?;
        let replicates = self
            .replicates
            .ok_or_else(|| CliError::Config("simulate needs `replicates`".into()))?;
        Ok(MonteCarloConfig {
            grid: dgp.specs(),
            estimators: self.estimators()?,
            replicates,
            problem: self.problem.clone(),
        })
    }

    /// The resolved configuration as TOML, without the worker count (which
    /// never changes results) and the output path.
    pub fn replay_toml(&self) -> String {
        let replay = RunConfig {
            workers: None,
            out: None,
            ..self.clone()
        };
        toml::to_string(&replay).expect("config serializes")
    }
}
