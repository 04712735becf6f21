//! Built-in problems: loss, spaces, nuisances and functional for each, and
//! the pipeline from a dataset to an [`EstimateReport`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{nested_sieve, SieveConfig, SieveFamily};
use crate::data::{make_folds, CrossFitPlan, Dataset, Roles};
use crate::error::{Error, Result};
use crate::estimators::{
    autosieve_estimate, cross_fit_nuisances, one_step_estimate, plugin_estimate, tmle_estimate, AlphaSource,
    CrossFitSpec, EstimateReport, EtaSource, NuisanceSpec, SieveRule, SieveSpec, ThetaSource,
};
use crate::fit::FitConfig;
use crate::functional::{AteTarget, FunctionalSpec};
use crate::loss::{Link, LossKind, LossSpec, Response};
use crate::riesz::RidgeChoice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// CATE under the R-learner loss; target `E[θ(X)]`.
    AteRlearner,
    /// Regression of the outcome on covariates; target `E[θ(X)] = E[Y]`.
    MeanOutcome,
    /// Regression of the outcome on `(a, x)` with a linear functional,
    /// the ATE contrast by default.
    RieszLinear,
    /// Beta-geometric `(a, b)` on covariates and treatment; target the
    /// mean survival past `t0`.
    BgSurvival,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Plugin,
    Onestep,
    OnestepStabilized,
    Tmle,
    Autosieve,
    CvPlugin,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Plugin,
        EstimatorKind::Onestep,
        EstimatorKind::OnestepStabilized,
        EstimatorKind::Tmle,
        EstimatorKind::Autosieve,
        EstimatorKind::CvPlugin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::Onestep => "onestep",
            EstimatorKind::OnestepStabilized => "onestep_stabilized",
            EstimatorKind::Tmle => "tmle",
            EstimatorKind::Autosieve => "autosieve",
            EstimatorKind::CvPlugin => "cv_plugin",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator `{s}`")))
    }
}

fn default_covariates() -> Vec<String> {
    vec!["x1".into(), "x2".into(), "x3".into()]
}
fn default_treatment() -> String {
    "a".into()
}
fn default_outcome() -> String {
    "y".into()
}
fn default_time() -> String {
    "time".into()
}
fn default_event() -> String {
    "event".into()
}
fn default_family() -> String {
    "polynomial".into()
}
fn default_k() -> usize {
    2
}
fn default_nuisance_k() -> usize {
    3
}
fn default_k_max() -> usize {
    5
}
fn default_folds() -> usize {
    5
}
fn default_level() -> f64 {
    0.95
}
fn default_t0() -> u32 {
    12
}

/// Everything that defines an estimation run apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub problem: ProblemKind,
    #[serde(default = "default_covariates")]
    pub covariates: Vec<String>,
    #[serde(default = "default_treatment")]
    pub treatment: String,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_time")]
    pub time: String,
    #[serde(default = "default_event")]
    pub event: String,
    /// Sieve family name (`polynomial` or `piecewise_linear`).
    #[serde(default = "default_family")]
    pub family: String,
    /// Sieve step of `θ` and `α` for the cross-fitted estimators.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Sieve step of the nuisance regressions.
    #[serde(default = "default_nuisance_k")]
    pub nuisance_k: usize,
    /// Largest step considered by the sieve estimators.
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Cross-fitting folds `J`, also the CV folds of the sieve estimators.
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Horizon of the survival functional.
    #[serde(default = "default_t0")]
    pub t0: u32,
    /// Overrides the problem's default functional (`riesz_linear` only).
    #[serde(default)]
    pub functional: Option<FunctionalSpec>,
    #[serde(default)]
    pub riesz_ridge: RidgeChoice,
    /// Fit nuisances, `θ` and `α` on the first half of the rows and
    /// estimate on the second half.
    #[serde(default)]
    pub split: bool,
    #[serde(default)]
    pub fit: FitConfig,
}

impl ProblemConfig {
    pub fn new(problem: ProblemKind) -> Self {
        ProblemConfig {
            problem,
            covariates: default_covariates(),
            treatment: default_treatment(),
            outcome: default_outcome(),
            time: default_time(),
            event: default_event(),
            family: default_family(),
            k: default_k(),
            nuisance_k: default_nuisance_k(),
            k_max: default_k_max(),
            folds: default_folds(),
            seed: 0,
            level: default_level(),
            t0: default_t0(),
            functional: None,
            riesz_ridge: RidgeChoice::default(),
            split: false,
            fit: FitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!("level {} outside (0, 1)", self.level)));
        }
        if self.k == 0 || self.nuisance_k == 0 || self.k_max == 0 {
            return Err(Error::InvalidConfig("sieve steps start at 1".into()));
        }
        if self.covariates.is_empty() {
            return Err(Error::InvalidConfig("no covariates".into()));
        }
        if self.t0 == 0 {
            return Err(Error::InvalidConfig("t0 must be >= 1".into()));
        }
        if self.functional.is_some() && self.problem != ProblemKind::RieszLinear {
            return Err(Error::InvalidConfig("`functional` applies to riesz_linear only".into()));
        }
        if let RidgeChoice::Fixed(l) = self.riesz_ridge {
            if !(l >= 0.0) {
                return Err(Error::InvalidConfig(format!("riesz ridge {l} < 0")));
            }
        }
        self.family()?;
        self.fit.validate()
    }

    pub fn family(&self) -> Result<SieveFamily> {
        self.family.parse()
    }

    /// Column roles the problem reads.
    pub fn roles(&self) -> Roles {
        let mut roles = Roles {
            covariates: self.covariates.clone(),
            ..Default::default()
        };
        match self.problem {
            ProblemKind::AteRlearner | ProblemKind::RieszLinear => {
                roles.treatment = Some(self.treatment.clone());
                roles.outcome = Some(self.outcome.clone());
            }
            ProblemKind::MeanOutcome => roles.outcome = Some(self.outcome.clone()),
            ProblemKind::BgSurvival => {
                roles.treatment = Some(self.treatment.clone());
                roles.time = Some(self.time.clone());
                roles.event = Some(self.event.clone());
            }
        }
        roles
    }

    pub fn functional_spec(&self) -> FunctionalSpec {
        match self.problem {
            ProblemKind::AteRlearner | ProblemKind::MeanOutcome => FunctionalSpec::MeanOfTheta,
            ProblemKind::RieszLinear => self.functional.clone().unwrap_or(FunctionalSpec::AteContrast {
                target: AteTarget::OutcomeRegression,
            }),
            ProblemKind::BgSurvival => FunctionalSpec::BgSurvival { t0: self.t0 },
        }
    }

    pub fn theta_loss(&self) -> LossKind {
        match self.problem {
            ProblemKind::AteRlearner => LossKind::Rlearner,
            ProblemKind::MeanOutcome | ProblemKind::RieszLinear => LossKind::SquaredError {
                response: Response::Outcome,
            },
            ProblemKind::BgSurvival => LossKind::BetaGeometricNll,
        }
    }

    /// Sieve of `θ` (and of `α`, which lives in the same space).
    pub fn theta_sieve(&self) -> Result<SieveConfig> {
        let covs: Vec<&str> = self.covariates.iter().map(String::as_str).collect();
        let cfg = SieveConfig::new(self.family()?, &covs);
        Ok(match self.problem {
            ProblemKind::AteRlearner | ProblemKind::MeanOutcome => cfg,
            ProblemKind::RieszLinear => cfg.with_treatment_arms(),
            ProblemKind::BgSurvival => cfg.with_d1(2).with_linear(&[&self.treatment]),
        })
    }

    /// Nuisances of the `θ`-loss, fitted per fold.
    pub fn nuisances(&self) -> Result<Vec<NuisanceSpec>> {
        if self.problem != ProblemKind::AteRlearner {
            return Ok(Vec::new());
        }
        let covs: Vec<&str> = self.covariates.iter().map(String::as_str).collect();
        let space = Arc::new(nested_sieve(&SieveConfig::new(self.family()?, &covs), self.nuisance_k)?);
        Ok(vec![
            NuisanceSpec {
                name: "pi".into(),
                loss: LossSpec::new(LossKind::Logistic {
                    response: Response::Treatment,
                }),
                space: space.clone(),
                link: Link::Logit,
            },
            NuisanceSpec {
                name: "m".into(),
                loss: LossSpec::new(LossKind::SquaredError {
                    response: Response::Outcome,
                }),
                space,
                link: Link::Identity,
            },
        ])
    }

    /// Fold plan for `n` rows.
    pub fn plan(&self, n: usize) -> Result<CrossFitPlan> {
        if self.split {
            let half = n / 2;
            let train: Vec<usize> = (0..half).collect();
            let eval: Vec<usize> = (half..n).collect();
            CrossFitPlan::split(n, &train, &eval)
        } else {
            make_folds(n, self.folds, self.seed)
        }
    }
}

/// Binds the problem's roles and runs one estimator.
pub fn run_pipeline(data: &Dataset, cfg: &ProblemConfig, estimator: EstimatorKind) -> Result<EstimateReport> {
    cfg.validate()?;
    let mut data = data.clone();
    data.bind(cfg.roles())?;
    let plan = cfg.plan(data.n())?;
    run_on_plan(&data, &plan, cfg, estimator)
}

/// As [`run_pipeline`] for data already bound to `cfg.roles()`.
pub fn run_on_plan(data: &Dataset, plan: &CrossFitPlan, cfg: &ProblemConfig, estimator: EstimatorKind) -> Result<EstimateReport> {
    let functional = cfg.functional_spec();
    let sieve = cfg.theta_sieve()?;
    let eta = EtaSource::Fit(cfg.nuisances()?);
    let rule = match estimator {
        EstimatorKind::Autosieve => Some(SieveRule::Undersmooth),
        EstimatorKind::CvPlugin => Some(SieveRule::CvPlugin),
        _ => None,
    };
    if let Some(rule) = rule {
        let spec = SieveSpec {
            eta,
            theta_loss: cfg.theta_loss(),
            functional,
            sieve,
            k_max: cfg.k_max,
            cv_folds: cfg.folds.max(2),
            fit: cfg.fit,
        };
        return autosieve_estimate(data, plan, &spec, rule, cfg.level);
    }
    let space = Arc::new(nested_sieve(&sieve, cfg.k)?);
    let spec = CrossFitSpec {
        eta,
        theta_loss: cfg.theta_loss(),
        theta_space: space.clone(),
        theta: ThetaSource::Fit,
        functional,
        alpha_space: space,
        alpha: AlphaSource::Fit(cfg.riesz_ridge),
        fit: cfg.fit,
    };
    let fits = cross_fit_nuisances(data, plan, &spec)?;
    match estimator {
        EstimatorKind::Plugin => plugin_estimate(data, plan, &fits, cfg.level),
        EstimatorKind::Onestep => one_step_estimate(data, plan, &fits, false, cfg.level),
        EstimatorKind::OnestepStabilized => one_step_estimate(data, plan, &fits, true, cfg.level),
        EstimatorKind::Tmle => tmle_estimate(data, plan, &fits, cfg.level),
        EstimatorKind::Autosieve | EstimatorKind::CvPlugin => unreachable!("handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_names_round_trip() {
        for e in EstimatorKind::ALL {
            assert_eq!(e.name().parse::<EstimatorKind>().unwrap(), e);
        }
        assert!(matches!("aipw".parse::<EstimatorKind>(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = ProblemConfig::new(ProblemKind::MeanOutcome);
        c.validate().unwrap();
        c.level = 1.5;
        assert!(c.validate().is_err());
        let mut c = ProblemConfig::new(ProblemKind::MeanOutcome);
        c.family = "fourier".into();
        assert!(matches!(c.validate(), Err(Error::UnsupportedFamily(_))));
        let mut c = ProblemConfig::new(ProblemKind::AteRlearner);
        c.functional = Some(FunctionalSpec::MeanOfTheta);
        assert!(c.validate().is_err());
    }

    #[test]
    fn bg_sieve_has_treatment_once() {
        let c = ProblemConfig::new(ProblemKind::BgSurvival);
        let s = nested_sieve(&c.theta_sieve().unwrap(), 3).unwrap();
        assert_eq!(s.d1(), 2);
        // 1, a, then three degrees of three covariates.
        assert_eq!(s.dims(), vec![11, 11]);
    }

    #[test]
    fn split_plan_halves_rows() {
        let mut c = ProblemConfig::new(ProblemKind::MeanOutcome);
        c.split = true;
        let p = c.plan(10).unwrap();
        assert_eq!(p.all_eval_rows(), (5..10).collect::<Vec<_>>());
        assert_eq!(p.train_rows(0), (0..5).collect::<Vec<_>>());
    }
}
