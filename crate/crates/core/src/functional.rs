//! Target functionals `m(z, θ)` and their linearizations `ṁ_θ(z, h)`.

use serde::{Deserialize, Serialize};

use crate::basis::FittedFunction;
use crate::data::Obs;
use crate::error::{Error, Result};
use crate::loss::bg_log_derivatives;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AteTarget {
    /// `θ` is the conditional effect itself: `m = θ(x)`.
    Cate,
    /// `θ` is an outcome regression: `m = θ(1, x) - θ(0, x)`.
    #[default]
    OutcomeRegression,
}

/// `weights · θ(z)` with the treatment optionally replaced by `treatment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    #[serde(default)]
    pub treatment: Option<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalSpec {
    MeanOfTheta,
    AteContrast {
        #[serde(default)]
        target: AteTarget,
    },
    /// Survival past `t0` under the beta-geometric model with `θ = (a, b)`.
    BgSurvival { t0: u32 },
    LinearCustom { terms: Vec<LinearTerm> },
}

/// One summand of the derivative representation
/// `ṁ_θ(z, h) = Σ vᵀ h(z[a := treatment])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivPoint {
    pub treatment: Option<f64>,
    pub v: Vec<f64>,
}

impl DerivPoint {
    fn at(v: Vec<f64>) -> Self {
        DerivPoint { treatment: None, v }
    }

    pub fn obs<'a>(&self, obs: Obs<'a>) -> Obs<'a> {
        match self.treatment {
            Some(a) => obs.with_treatment(a),
            None => obs,
        }
    }
}

impl FunctionalSpec {
    pub fn d1(&self) -> usize {
        match self {
            FunctionalSpec::BgSurvival { .. } => 2,
            FunctionalSpec::LinearCustom { terms } => terms.first().map_or(1, |t| t.weights.len()),
            _ => 1,
        }
    }

    /// True when `ṁ_θ` does not depend on `θ`.
    pub fn is_linear(&self) -> bool {
        !matches!(self, FunctionalSpec::BgSurvival { .. })
    }

    fn check(&self, d1: usize) -> Result<()> {
        if d1 != self.d1() {
            return Err(Error::DimensionMismatch {
                expected: self.d1(),
                found: d1,
            });
        }
        if let FunctionalSpec::LinearCustom { terms } = self {
            if let Some(t) = terms.iter().find(|t| t.weights.len() != d1) {
                return Err(Error::DimensionMismatch {
                    expected: d1,
                    found: t.weights.len(),
                });
            }
        }
        Ok(())
    }

    /// Representation points of `ṁ_θ(z, ·)`, with `θ` given by `eval`.
    pub fn representation_with(
        &self,
        obs: Obs<'_>,
        eval: &dyn Fn(Obs<'_>) -> Result<Vec<f64>>,
    ) -> Result<Vec<DerivPoint>> {
        Ok(match self {
            FunctionalSpec::MeanOfTheta
            | FunctionalSpec::AteContrast {
                target: AteTarget::Cate,
            } => vec![DerivPoint::at(vec![1.0])],
            FunctionalSpec::AteContrast {
                target: AteTarget::OutcomeRegression,
            } => vec![
                DerivPoint {
                    treatment: Some(1.0),
                    v: vec![1.0],
                },
                DerivPoint {
                    treatment: Some(0.0),
                    v: vec![-1.0],
                },
            ],
            FunctionalSpec::BgSurvival { t0 } => {
                let th = eval(obs)?;
                self.check(th.len())?;
                let d = bg_log_derivatives(th[0], th[1], *t0)?;
                let s = d.log_surv.exp();
                vec![DerivPoint::at(vec![s * d.grad_surv[0], s * d.grad_surv[1]])]
            }
            FunctionalSpec::LinearCustom { terms } => terms
                .iter()
                .map(|t| DerivPoint {
                    treatment: t.treatment,
                    v: t.weights.clone(),
                })
                .collect(),
        })
    }

    pub fn value_with(&self, obs: Obs<'_>, eval: &dyn Fn(Obs<'_>) -> Result<Vec<f64>>) -> Result<f64> {
        match self {
            FunctionalSpec::BgSurvival { t0 } => {
                let th = eval(obs)?;
                self.check(th.len())?;
                Ok(bg_log_derivatives(th[0], th[1], *t0)?.log_surv.exp())
            }
            // Linear kinds: m(z, θ) = ṁ(z, θ).
            _ => self.derivative_with(obs, eval, eval),
        }
    }

    /// `ṁ_θ(z, h)` with `θ` and `h` given by evaluators.
    pub fn derivative_with(
        &self,
        obs: Obs<'_>,
        theta: &dyn Fn(Obs<'_>) -> Result<Vec<f64>>,
        h: &dyn Fn(Obs<'_>) -> Result<Vec<f64>>,
    ) -> Result<f64> {
        let mut out = 0.0;
        for p in self.representation_with(obs, theta)? {
            let hv = h(p.obs(obs))?;
            self.check(hv.len())?;
            out += p.v.iter().zip(&hv).map(|(v, h)| v * h).sum::<f64>();
        }
        Ok(out)
    }

    pub fn value(&self, obs: Obs<'_>, theta: &FittedFunction) -> Result<f64> {
        self.value_with(obs, &|o| theta.evaluate(&o))
    }

    pub fn derivative(&self, obs: Obs<'_>, theta: &FittedFunction, h: &FittedFunction) -> Result<f64> {
        self.derivative_with(obs, &|o| theta.evaluate(&o), &|o| h.evaluate(&o))
    }

    pub fn representation(&self, obs: Obs<'_>, theta: &FittedFunction) -> Result<Vec<DerivPoint>> {
        self.representation_with(obs, &|o| theta.evaluate(&o))
    }

    /// `v(z)` with `ṁ_θ(z, h) = v(z)ᵀ h(z)`, when it exists.
    pub fn pointwise_vector(&self, obs: Obs<'_>, theta_at_z: &[f64]) -> Result<Vec<f64>> {
        let th = theta_at_z.to_vec();
        let mut pts = self.representation_with(obs, &|_| Ok(th.clone()))?;
        match pts.as_slice() {
            [p] if p.treatment.is_none() => Ok(pts.remove(0).v),
            _ => Err(Error::NonPointwiseFunctional),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{Feature, Family, FunctionSpace};
    use crate::data::{Dataset, Roles};
    use std::sync::Arc;

    fn row(a: f64, x: f64) -> Dataset {
        Dataset::new(
            vec![("x".into(), vec![x]), ("a".into(), vec![a])],
            Roles {
                treatment: Some("a".into()),
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn constant(values: &[f64]) -> FittedFunction {
        let space = Arc::new(FunctionSpace::constant(values.len()));
        FittedFunction::linear(space, values.iter().map(|v| vec![*v]).collect()).unwrap()
    }

    #[test]
    fn ate_of_cate_is_identity() {
        let ds = row(1.0, 0.0);
        let f = FunctionalSpec::AteContrast {
            target: AteTarget::Cate,
        };
        assert_eq!(f.value(ds.obs(0), &constant(&[0.7])).unwrap(), 0.7);
        assert_eq!(
            f.derivative(ds.obs(0), &constant(&[0.7]), &constant(&[1.0])).unwrap(),
            1.0
        );
    }

    #[test]
    fn mean_of_theta_constant() {
        let ds = row(0.0, 3.0);
        assert_eq!(
            FunctionalSpec::MeanOfTheta.value(ds.obs(0), &constant(&[5.0])).unwrap(),
            5.0
        );
    }

    #[test]
    fn outcome_regression_contrast() {
        let ds = row(0.0, 3.0);
        let space = Arc::new(
            FunctionSpace::shared(
                Family::Custom,
                true,
                vec![
                    Feature::arm(1, Feature::Constant),
                    Feature::arm(0, Feature::Constant),
                ],
                1,
            )
            .unwrap(),
        );
        let th = FittedFunction::linear(space, vec![vec![2.0, -2.0]]).unwrap();
        let f = FunctionalSpec::AteContrast {
            target: AteTarget::OutcomeRegression,
        };
        assert_eq!(f.value(ds.obs(0), &th).unwrap(), 4.0);
        assert_eq!(
            f.pointwise_vector(ds.obs(0), &[0.0]).unwrap_err(),
            Error::NonPointwiseFunctional
        );
    }

    #[test]
    fn bg_survival_values() {
        let ds = row(0.0, 0.0);
        let f = FunctionalSpec::BgSurvival { t0: 2 };
        assert!((f.value(ds.obs(0), &constant(&[0.0, 0.0])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let f1 = FunctionalSpec::BgSurvival { t0: 1 };
        let d = f1
            .derivative(ds.obs(0), &constant(&[0.0, 0.0]), &constant(&[1.0, 0.0]))
            .unwrap();
        assert!((d + 0.25).abs() < 1e-15);
        assert!(matches!(
            f.value(ds.obs(0), &constant(&[0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            f.value(ds.obs(0), &constant(&[31.0, 0.0])),
            Err(Error::NumericRange { .. })
        ));
    }

    #[test]
    fn bg_survival_derivative_matches_finite_differences() {
        let ds = row(0.0, 0.0);
        let f = FunctionalSpec::BgSurvival { t0: 12 };
        let (a, b) = (0.3, -0.2);
        for h in [[1.0, 0.0], [0.0, 1.0], [0.7, -1.3]] {
            let eps = 1e-5;
            let up = f.value(ds.obs(0), &constant(&[a + eps * h[0], b + eps * h[1]])).unwrap();
            let dn = f.value(ds.obs(0), &constant(&[a - eps * h[0], b - eps * h[1]])).unwrap();
            let fd = (up - dn) / (2.0 * eps);
            let an = f
                .derivative(ds.obs(0), &constant(&[a, b]), &constant(&h))
                .unwrap();
            assert!((fd - an).abs() < 1e-5 * an.abs(), "{fd} vs {an}");
        }
    }

    #[test]
    fn linear_custom_is_linear() {
        let ds = row(1.0, 0.5);
        let f = FunctionalSpec::LinearCustom {
            terms: vec![
                LinearTerm {
                    treatment: Some(0.0),
                    weights: vec![2.0],
                },
                LinearTerm {
                    treatment: None,
                    weights: vec![-0.5],
                },
            ],
        };
        let space = Arc::new(
            FunctionSpace::shared(
                Family::Custom,
                true,
                vec![Feature::Constant, Feature::power("a", 1), Feature::power("x", 1)],
                1,
            )
            .unwrap(),
        );
        let h1 = FittedFunction::linear(space.clone(), vec![vec![0.3, 1.1, -2.0]]).unwrap();
        let h2 = FittedFunction::linear(space, vec![vec![-0.7, 0.4, 0.9]]).unwrap();
        let c = 1.7;
        let combo = crate::basis::combine(&h1, c, &h2).unwrap();
        let o = ds.obs(0);
        let lhs = f.value(o, &combo).unwrap();
        let rhs = f.value(o, &h1).unwrap() + c * f.value(o, &h2).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        let d = f.derivative(o, &h2, &h1).unwrap();
        assert!((d - f.value(o, &h1).unwrap()).abs() < 1e-15);
    }
}
