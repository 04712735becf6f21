//! Pointwise losses `ℓ_η(z, θ) = l(z, θ(z))` with hand-coded gradient and
//! Hessian in the value `θ(z) ∈ R^d1`, and the beta-geometric recursions.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{Feature, Family, FittedFunction, FunctionSpace};
use crate::data::Obs;
use crate::error::{Error, Result};
use crate::functional::FunctionalSpec;
use crate::stats::{expit, logit, softplus};

/// Bound applied to outcome-probability nuisances of the orthogonal
/// logistic loss.
pub const MU_CLAMP: f64 = 1e-6;
/// Largest admissible `|a|`, `|b|` in the beta-geometric model.
pub const BG_RANGE: f64 = 30.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    #[default]
    Outcome,
    Treatment,
}

impl Response {
    fn read(self, obs: &Obs<'_>) -> Result<f64> {
        match self {
            Response::Outcome => obs.outcome(),
            Response::Treatment => obs.treatment(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    /// Value is `expit` of the fitted function.
    Logit,
}

/// A scalar nuisance function `η(z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Nuisance {
    pub function: FittedFunction,
    #[serde(default)]
    pub link: Link,
}

impl Nuisance {
    pub fn new(function: FittedFunction, link: Link) -> Self {
        Nuisance { function, link }
    }

    /// Reads the nuisance straight from a data column (oracle injection).
    pub fn column(name: &str) -> Self {
        Self::from_features(vec![Feature::power(name, 1)], vec![1.0])
    }

    /// `col1` when the (possibly counterfactual) treatment is 1, else `col0`.
    pub fn arm_columns(col1: &str, col0: &str) -> Self {
        Self::from_features(
            vec![
                Feature::arm(1, Feature::power(col1, 1)),
                Feature::arm(0, Feature::power(col0, 1)),
            ],
            vec![1.0, 1.0],
        )
    }

    fn from_features(features: Vec<Feature>, coefs: Vec<f64>) -> Self {
        let space = FunctionSpace::shared(Family::Custom, true, features, 1)
            .expect("non-empty feature list");
        Nuisance {
            function: FittedFunction::linear(Arc::new(space), vec![coefs]).expect("matching dims"),
            link: Link::Identity,
        }
    }

    pub fn value(&self, obs: &Obs<'_>) -> Result<f64> {
        let v = self.function.evaluate_scalar(obs)?;
        Ok(match self.link {
            Link::Identity => v,
            Link::Logit => expit(v),
        })
    }
}

pub type Nuisances = BTreeMap<String, Nuisance>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `½ (r - θ)²` with `r` the outcome or the treatment.
    SquaredError {
        #[serde(default)]
        response: Response,
    },
    /// `log(1 + e^θ) - r θ` with binary `r`.
    Logistic {
        #[serde(default)]
        response: Response,
    },
    /// `½ w (ζ - θ)²` with nuisances `weight` and `pseudo_outcome`.
    PseudoOutcome,
    /// `½ (y - m - (a - π) θ)²` with nuisances `pi` and `m`.
    Rlearner,
    /// Pseudo-outcome loss with `w = 1` and the doubly robust score
    /// `ζ = μ(1,x) - μ(0,x) + (a - π) / (π(1 - π)) (y - μ(a,x))`,
    /// with nuisances `pi` and `mu`.
    Drlearner,
    /// `(1/ν) {log(1 + exp((a - π) θ + h0)) - y (a - π) θ}` with
    /// `ν = μ(a,x)(1 - μ(a,x))` and `h0 = π logit μ(1,x) + (1 - π) logit μ(0,x)`,
    /// nuisances `pi` and `mu`.
    OrthoLogistic,
    /// `-δ log P(T = t) - (1 - δ) log P(T > t)` with `θ = (a, b)`.
    BetaGeometricNll,
    /// `αᵀ H α - 2 vᵀ α` where `H` is the Hessian of `base` at `theta` and
    /// `v` represents the derivative of `functional` at `theta`.
    RieszQuadratic {
        base: Box<LossSpec>,
        theta: FittedFunction,
        functional: FunctionalSpec,
    },
}

/// A loss kind with its nuisances bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub nuisances: Nuisances,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            nuisances: Nuisances::new(),
        }
    }

    pub fn squared_error() -> Self {
        Self::new(LossKind::SquaredError {
            response: Response::Outcome,
        })
    }

    pub fn with_nuisance(mut self, name: &str, nuisance: Nuisance) -> Self {
        self.nuisances.insert(name.to_string(), nuisance);
        self
    }

    pub fn with_nuisances(mut self, nuisances: Nuisances) -> Self {
        self.nuisances.extend(nuisances);
        self
    }

    pub fn riesz(base: LossSpec, theta: FittedFunction, functional: FunctionalSpec) -> Self {
        Self::new(LossKind::RieszQuadratic {
            base: Box::new(base),
            theta,
            functional,
        })
    }

    pub fn required_nuisances(&self) -> &'static [&'static str] {
        match self.kind {
            LossKind::PseudoOutcome => &["weight", "pseudo_outcome"],
            LossKind::Rlearner => &["pi", "m"],
            LossKind::Drlearner | LossKind::OrthoLogistic => &["pi", "mu"],
            _ => &[],
        }
    }

    pub fn d1(&self) -> usize {
        match &self.kind {
            LossKind::BetaGeometricNll => 2,
            LossKind::RieszQuadratic { base, .. } => base.d1(),
            _ => 1,
        }
    }

    /// True when the loss is quadratic in `θ(z)`.
    pub fn is_quadratic(&self) -> bool {
        matches!(
            self.kind,
            LossKind::SquaredError { .. }
                | LossKind::PseudoOutcome
                | LossKind::Rlearner
                | LossKind::Drlearner
                | LossKind::RieszQuadratic { .. }
        )
    }

    fn nuisance(&self, name: &str, obs: &Obs<'_>) -> Result<f64> {
        self.nuisances
            .get(name)
            .ok_or_else(|| Error::MissingNuisance(name.to_string()))?
            .value(obs)
    }

    /// Binds the nuisances and data of one observation.
    pub fn point(&self, obs: &Obs<'_>) -> Result<PointLoss> {
        Ok(match &self.kind {
            LossKind::SquaredError { response } => PointLoss::Residual {
                w: 1.0,
                s: 1.0,
                r: response.read(obs)?,
            },
            LossKind::Logistic { response } => PointLoss::Logit {
                scale: 1.0,
                s: 1.0,
                offset: 0.0,
                y: response.read(obs)?,
            },
            LossKind::PseudoOutcome => PointLoss::Residual {
                w: self.nuisance("weight", obs)?,
                s: 1.0,
                r: self.nuisance("pseudo_outcome", obs)?,
            },
            LossKind::Rlearner => {
                let pi = self.nuisance("pi", obs)?;
                let m = self.nuisance("m", obs)?;
                PointLoss::Residual {
                    w: 1.0,
                    s: obs.treatment()? - pi,
                    r: obs.outcome()? - m,
                }
            }
            LossKind::Drlearner => {
                let pi = self.nuisance("pi", obs)?;
                if !(pi > 0.0 && pi < 1.0) {
                    return Err(Error::DomainError(format!("propensity {pi} outside (0, 1)")));
                }
                let a = obs.treatment()?;
                let mu = self.nuisance("mu", obs)?;
                let mu1 = self.nuisance("mu", &obs.with_treatment(1.0))?;
                let mu0 = self.nuisance("mu", &obs.with_treatment(0.0))?;
                let zeta = mu1 - mu0 + (a - pi) / (pi * (1.0 - pi)) * (obs.outcome()? - mu);
                PointLoss::Residual {
                    w: 1.0,
                    s: 1.0,
                    r: zeta,
                }
            }
            LossKind::OrthoLogistic => {
                let pi = self.nuisance("pi", obs)?;
                let a = obs.treatment()?;
                let clamp = |mu: f64| -> Result<f64> {
                    if !(mu > 0.0 && mu < 1.0) {
                        return Err(Error::DomainError(format!(
                            "outcome probability {mu} outside (0, 1)"
                        )));
                    }
                    Ok(mu.clamp(MU_CLAMP, 1.0 - MU_CLAMP))
                };
                let mu = clamp(self.nuisance("mu", obs)?)?;
                let mu1 = clamp(self.nuisance("mu", &obs.with_treatment(1.0))?)?;
                let mu0 = clamp(self.nuisance("mu", &obs.with_treatment(0.0))?)?;
                PointLoss::Logit {
                    scale: 1.0 / (mu * (1.0 - mu)),
                    s: a - pi,
                    offset: pi * logit(mu1) + (1.0 - pi) * logit(mu0),
                    y: obs.outcome()?,
                }
            }
            LossKind::BetaGeometricNll => PointLoss::BetaGeometric {
                t: obs.time()?,
                event: obs.event()?,
            },
            LossKind::RieszQuadratic {
                base,
                theta,
                functional,
            } => {
                let th = theta.evaluate(obs)?;
                let h = base.point(obs)?.hessian(&th)?;
                let v = functional.pointwise_vector(*obs, &th)?;
                PointLoss::Riesz { h, v }
            }
        })
    }

    pub fn value(&self, theta: &FittedFunction, obs: &Obs<'_>) -> Result<f64> {
        self.point(obs)?.value(&theta.evaluate(obs)?)
    }

    pub fn gradient(&self, theta: &FittedFunction, obs: &Obs<'_>) -> Result<Vec<f64>> {
        self.point(obs)?.gradient(&theta.evaluate(obs)?)
    }

    /// Row-major `d1 × d1`.
    pub fn hessian(&self, theta: &FittedFunction, obs: &Obs<'_>) -> Result<Vec<f64>> {
        self.point(obs)?.hessian(&theta.evaluate(obs)?)
    }
}

/// A loss restricted to one observation, as a function of `θ(z)`.
#[derive(Debug, Clone, PartialEq)]
pub enum PointLoss {
    /// `½ w (r - s θ)²`.
    Residual { w: f64, s: f64, r: f64 },
    /// `scale · (log(1 + e^{s θ + offset}) - y s θ)`.
    Logit { scale: f64, s: f64, offset: f64, y: f64 },
    BetaGeometric { t: u32, event: bool },
    /// `αᵀ h α - 2 vᵀ α`, `h` row-major.
    Riesz { h: Vec<f64>, v: Vec<f64> },
}

/// Value, gradient and row-major Hessian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDerivs {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl PointLoss {
    pub fn d1(&self) -> usize {
        match self {
            PointLoss::BetaGeometric { .. } => 2,
            PointLoss::Riesz { v, .. } => v.len(),
            _ => 1,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, PointLoss::Residual { .. } | PointLoss::Riesz { .. })
    }

    fn check(&self, th: &[f64]) -> Result<()> {
        if th.len() != self.d1() {
            return Err(Error::DimensionMismatch {
                expected: self.d1(),
                found: th.len(),
            });
        }
        Ok(())
    }

    pub fn derivs(&self, th: &[f64]) -> Result<LocalDerivs> {
        self.check(th)?;
        Ok(match *self {
            PointLoss::Residual { w, s, r } => {
                let e = r - s * th[0];
                LocalDerivs {
                    value: 0.5 * w * e * e,
                    grad: vec![-w * s * e],
                    hess: vec![w * s * s],
                }
            }
            PointLoss::Logit { scale, s, offset, y } => {
                let u = s * th[0] + offset;
                let p = expit(u);
                LocalDerivs {
                    value: scale * (softplus(u) - y * s * th[0]),
                    grad: vec![scale * s * (p - y)],
                    hess: vec![scale * s * s * p * (1.0 - p)],
                }
            }
            PointLoss::BetaGeometric { t, event } => {
                let d = bg_log_derivatives(th[0], th[1], t)?;
                let (lp, g, h) = if event {
                    (d.log_pmf, d.grad_pmf, d.hess_pmf)
                } else {
                    (d.log_surv, d.grad_surv, d.hess_surv)
                };
                LocalDerivs {
                    value: -lp,
                    grad: vec![-g[0], -g[1]],
                    hess: vec![-h[0][0], -h[0][1], -h[1][0], -h[1][1]],
                }
            }
            PointLoss::Riesz { ref h, ref v } => {
                let d = v.len();
                let mut value = 0.0;
                let mut grad = vec![0.0; d];
                for i in 0..d {
                    let mut hi = 0.0;
                    for j in 0..d {
                        hi += h[i * d + j] * th[j];
                    }
                    value += th[i] * hi - 2.0 * v[i] * th[i];
                    grad[i] = 2.0 * hi - 2.0 * v[i];
                }
                LocalDerivs {
                    value,
                    grad,
                    hess: h.iter().map(|x| 2.0 * x).collect(),
                }
            }
        })
    }

    pub fn value(&self, th: &[f64]) -> Result<f64> {
        match *self {
            PointLoss::BetaGeometric { t, event } => {
                self.check(th)?;
                let d = bg_log_derivatives(th[0], th[1], t)?;
                Ok(-if event { d.log_pmf } else { d.log_surv })
            }
            _ => Ok(self.derivs(th)?.value),
        }
    }

    pub fn gradient(&self, th: &[f64]) -> Result<Vec<f64>> {
        Ok(self.derivs(th)?.grad)
    }

    pub fn hessian(&self, th: &[f64]) -> Result<Vec<f64>> {
        Ok(self.derivs(th)?.hess)
    }
}

/// Log-probabilities of the beta-geometric model at horizon `t` with their
/// gradients and Hessians in `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgDerivs {
    pub log_pmf: f64,
    pub log_surv: f64,
    pub grad_pmf: [f64; 2],
    pub grad_surv: [f64; 2],
    pub hess_pmf: [[f64; 2]; 2],
    pub hess_surv: [[f64; 2]; 2],
}

/// Hazard `λ(s) = e^a / (e^a + e^b + s - 1)`.
pub fn bg_hazard(a: f64, b: f64, s: u32) -> f64 {
    let (al, be) = (a.exp(), b.exp());
    al / (al + be + s as f64 - 1.0)
}

/// Forward recursions for `log P(T = t)` and `log P(T > t)`, `O(t)`.
pub fn bg_log_derivatives(a: f64, b: f64, t: u32) -> Result<BgDerivs> {
    if !(a.abs() <= BG_RANGE && b.abs() <= BG_RANGE) {
        return Err(Error::NumericRange { a, b });
    }
    if t == 0 {
        return Err(Error::DomainError("survival horizon must be >= 1".into()));
    }
    let (al, be) = (a.exp(), b.exp());
    let s1 = al + be;
    let base = -al * be / (s1 * s1);
    // Event probability at t = 1.
    let mut log_pmf = a - s1.ln();
    let mut gp = [be / s1, -be / s1];
    let mut hp = [[base, -base], [-base, base]];
    // Survival past 1.
    let mut log_surv = b - s1.ln();
    let mut gs = [-al / s1, al / s1];
    let mut hs = hp;
    for k in 2..=t {
        let tf = k as f64;
        let s = al + be + tf - 1.0;
        let s2 = s * s;
        let haa = -al * (be + tf - 1.0) / s2;
        let hab = al * be / s2;
        let hbb_tail = -be * (al + tf - 1.0) / s2;

        let bp = be + tf - 2.0;
        log_pmf += bp.ln() - s.ln();
        gp[0] += -al / s;
        gp[1] += be * (al + 1.0) / (bp * s);
        hp[0][0] += haa;
        hp[0][1] += hab;
        hp[1][0] += hab;
        hp[1][1] += be * (tf - 2.0) / (bp * bp) + hbb_tail;

        let bs = be + tf - 1.0;
        log_surv += bs.ln() - s.ln();
        gs[0] += -al / s;
        gs[1] += al * be / (bs * s);
        hs[0][0] += haa;
        hs[0][1] += hab;
        hs[1][0] += hab;
        hs[1][1] += be * (tf - 1.0) / (bs * bs) + hbb_tail;
    }
    Ok(BgDerivs {
        log_pmf,
        log_surv,
        grad_pmf: gp,
        grad_surv: gs,
        hess_pmf: hp,
        hess_surv: hs,
    })
}
