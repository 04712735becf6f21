//! Finite-dimensional function spaces, nested sieves, and fitted functions
//! closed under affine combination.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Obs;
use crate::error::{Error, Result};

/// A scalar feature map of one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Feature {
    Constant,
    /// `x^degree` for the named column.
    Power { column: String, degree: u32 },
    /// `(x - knot)_+` for the named column.
    Hinge { column: String, knot: f64 },
    /// `1(a = arm) * inner`, reading the (possibly counterfactual) treatment.
    Arm { arm: u8, inner: Box<Feature> },
}

impl Feature {
    pub fn power(column: &str, degree: u32) -> Self {
        Feature::Power {
            column: column.to_string(),
            degree,
        }
    }

    pub fn hinge(column: &str, knot: f64) -> Self {
        Feature::Hinge {
            column: column.to_string(),
            knot,
        }
    }

    pub fn arm(arm: u8, inner: Feature) -> Self {
        Feature::Arm {
            arm,
            inner: Box::new(inner),
        }
    }

    pub fn eval(&self, obs: &Obs<'_>) -> Result<f64> {
        match self {
            Feature::Constant => Ok(1.0),
            Feature::Power { column, degree } => Ok(obs.get(column)?.powi(*degree as i32)),
            Feature::Hinge { column, knot } => Ok((obs.get(column)? - knot).max(0.0)),
            Feature::Arm { arm, inner } => {
                let a = obs
                    .treatment()
                    .map_err(|_| Error::MissingCovariate("<treatment>".into()))?;
                if a == *arm as f64 {
                    inner.eval(obs)
                } else {
                    Ok(0.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Constant,
    Polynomial,
    PiecewiseLinear,
    Custom,
}

/// A block-structured linear span: one feature list per output coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpace {
    family: Family,
    additive: bool,
    blocks: Vec<Vec<Feature>>,
}

impl FunctionSpace {
    pub fn new(family: Family, additive: bool, blocks: Vec<Vec<Feature>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        if blocks.iter().any(Vec::is_empty) {
            return Err(Error::InvalidConfig("every block needs at least one feature".into()));
        }
        Ok(FunctionSpace {
            family,
            additive,
            blocks,
        })
    }

    /// Same feature list shared by `d1` output blocks.
    pub fn shared(family: Family, additive: bool, features: Vec<Feature>, d1: usize) -> Result<Self> {
        Self::new(family, additive, vec![features; d1])
    }

    pub fn constant(d1: usize) -> Self {
        FunctionSpace {
            family: Family::Constant,
            additive: true,
            blocks: vec![vec![Feature::Constant]; d1],
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn is_additive(&self) -> bool {
        self.additive
    }

    pub fn d1(&self) -> usize {
        self.blocks.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    /// Total number of coefficients across blocks.
    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn blocks(&self) -> &[Vec<Feature>] {
        &self.blocks
    }

    /// Output block owning each flattened coefficient index.
    pub fn block_of_index(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(b, f)| std::iter::repeat_n(b, f.len()))
            .collect()
    }

    /// Per-block design vectors at `obs`.
    pub fn evaluate_basis(&self, obs: &Obs<'_>) -> Result<Vec<Vec<f64>>> {
        self.blocks
            .iter()
            .map(|fs| fs.iter().map(|f| f.eval(obs)).collect())
            .collect()
    }

    /// Design vectors of all blocks concatenated.
    pub fn design(&self, obs: &Obs<'_>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.total_dim());
        for fs in &self.blocks {
            for f in fs {
                out.push(f.eval(obs)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Linear {
        weight: f64,
        space: Arc<FunctionSpace>,
        coefficients: Vec<Vec<f64>>,
    },
    Nested {
        weight: f64,
        function: Arc<FittedFunction>,
    },
}

/// An element of a function space: a weighted sum of linear terms and
/// nested fitted functions, valued in `R^d1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedFunction {
    d1: usize,
    terms: Vec<Term>,
}

impl FittedFunction {
    pub fn zero(d1: usize) -> Self {
        FittedFunction { d1, terms: vec![] }
    }

    /// Coefficients given per block.
    pub fn linear(space: Arc<FunctionSpace>, coefficients: Vec<Vec<f64>>) -> Result<Self> {
        let dims = space.dims();
        if coefficients.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                found: coefficients.len(),
            });
        }
        for (c, &d) in coefficients.iter().zip(&dims) {
            if c.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: c.len(),
                });
            }
        }
        Ok(FittedFunction {
            d1: space.d1(),
            terms: vec![Term::Linear {
                weight: 1.0,
                space,
                coefficients,
            }],
        })
    }

    /// Coefficients given flattened in block order.
    pub fn from_flat(space: Arc<FunctionSpace>, flat: &[f64]) -> Result<Self> {
        if flat.len() != space.total_dim() {
            return Err(Error::DimensionMismatch {
                expected: space.total_dim(),
                found: flat.len(),
            });
        }
        let mut rest = flat;
        let mut blocks = Vec::with_capacity(space.d1());
        for d in space.dims() {
            let (head, tail) = rest.split_at(d);
            blocks.push(head.to_vec());
            rest = tail;
        }
        Self::linear(space, blocks)
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Flattened coefficients when this is a single unit-weight linear term.
    pub fn flat_coefficients(&self) -> Option<Vec<f64>> {
        match self.terms.as_slice() {
            [Term::Linear {
                weight,
                coefficients,
                ..
            }] if *weight == 1.0 => Some(coefficients.concat()),
            _ => None,
        }
    }

    pub fn evaluate(&self, obs: &Obs<'_>) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.d1];
        for term in &self.terms {
            match term {
                Term::Linear {
                    weight,
                    space,
                    coefficients,
                } => {
                    for (b, (features, coefs)) in space.blocks().iter().zip(coefficients).enumerate() {
                        let mut v = 0.0;
                        for (f, c) in features.iter().zip(coefs) {
                            v += c * f.eval(obs)?;
                        }
                        acc[b] += weight * v;
                    }
                }
                Term::Nested { weight, function } => {
                    let v = function.evaluate(obs)?;
                    for (a, x) in acc.iter_mut().zip(v) {
                        *a += weight * x;
                    }
                }
            }
        }
        Ok(acc)
    }

    /// Scalar evaluation for `d1 = 1`.
    pub fn evaluate_scalar(&self, obs: &Obs<'_>) -> Result<f64> {
        if self.d1 != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: self.d1,
            });
        }
        Ok(self.evaluate(obs)?[0])
    }

    /// `w * self`.
    pub fn scaled(&self, w: f64) -> Self {
        FittedFunction {
            d1: self.d1,
            terms: vec![Term::Nested {
                weight: w,
                function: Arc::new(self.clone()),
            }],
        }
    }
}

/// `f + w * g`, evaluated exactly as `f(z) + w * g(z)`.
pub fn combine(f: &FittedFunction, w: f64, g: &FittedFunction) -> Result<FittedFunction> {
    if f.d1 != g.d1 {
        return Err(Error::DimensionMismatch {
            expected: f.d1,
            found: g.d1,
        });
    }
    Ok(FittedFunction {
        d1: f.d1,
        terms: vec![
            Term::Nested {
                weight: 1.0,
                function: Arc::new(f.clone()),
            },
            Term::Nested {
                weight: w,
                function: Arc::new(g.clone()),
            },
        ],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SieveFamily {
    /// Step `k` holds degrees `0..=k` of every covariate, no interactions.
    Polynomial,
    /// Step `k` holds `{1, x}` plus hinges at dyadic knots of levels `1..k`.
    PiecewiseLinear { lower: f64, upper: f64 },
}

impl fmt::Display for SieveFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SieveFamily::Polynomial => write!(f, "polynomial"),
            SieveFamily::PiecewiseLinear { .. } => write!(f, "piecewise_linear"),
        }
    }
}

impl FromStr for SieveFamily {
    type Err = Error;

    /// Piecewise-linear families parsed by name get the support `[-1, 1]`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polynomial" | "poly" => Ok(SieveFamily::Polynomial),
            "piecewise_linear" | "pl" => Ok(SieveFamily::PiecewiseLinear {
                lower: -1.0,
                upper: 1.0,
            }),
            other => Err(Error::UnsupportedFamily(other.to_string())),
        }
    }
}

/// Recipe for a nested sequence of additive spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveConfig {
    pub family: SieveFamily,
    pub covariates: Vec<String>,
    /// Output blocks, each sharing the same basis.
    #[serde(default = "one")]
    pub d1: usize,
    /// Interact every feature with both treatment arms, for regressions on
    /// `(a, x)`.
    #[serde(default)]
    pub treatment_arms: bool,
    /// Columns entering every step linearly (binary columns, whose powers
    /// would repeat).
    #[serde(default)]
    pub linear: Vec<String>,
}

fn one() -> usize {
    1
}

impl SieveConfig {
    pub fn new(family: SieveFamily, covariates: &[&str]) -> Self {
        SieveConfig {
            family,
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            d1: 1,
            treatment_arms: false,
            linear: Vec::new(),
        }
    }

    pub fn with_linear(mut self, columns: &[&str]) -> Self {
        self.linear = columns.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_d1(mut self, d1: usize) -> Self {
        self.d1 = d1;
        self
    }

    pub fn with_treatment_arms(mut self) -> Self {
        self.treatment_arms = true;
        self
    }
}

/// Space of step `k` (starting at 1). The basis of step `k` is a prefix of
/// the basis of step `k + 1`.
pub fn nested_sieve(cfg: &SieveConfig, k: usize) -> Result<FunctionSpace> {
    if k == 0 {
        return Err(Error::InvalidConfig("sieve index starts at 1".into()));
    }
    if cfg.d1 == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    let mut base = vec![Feature::Constant];
    base.extend(cfg.linear.iter().map(|c| Feature::power(c, 1)));
    let family = match cfg.family {
        SieveFamily::Polynomial => {
            for degree in 1..=k as u32 {
                for c in &cfg.covariates {
                    base.push(Feature::power(c, degree));
                }
            }
            Family::Polynomial
        }
        SieveFamily::PiecewiseLinear { lower, upper } => {
            if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
                return Err(Error::UnsupportedFamily(format!(
                    "piecewise_linear on [{lower}, {upper}]"
                )));
            }
            for c in &cfg.covariates {
                base.push(Feature::power(c, 1));
            }
            for level in 1..k as u32 {
                let cells = 2f64.powi(level as i32);
                let knots: Vec<f64> = (1..=1u32 << (level - 1))
                    .map(|i| lower + (2.0 * i as f64 - 1.0) * (upper - lower) / cells)
                    .collect();
                for c in &cfg.covariates {
                    for &knot in &knots {
                        base.push(Feature::hinge(c, knot));
                    }
                }
            }
            Family::PiecewiseLinear
        }
    };
    let features = if cfg.treatment_arms {
        base.into_iter()
            .flat_map(|f| [Feature::arm(1, f.clone()), Feature::arm(0, f)])
            .collect()
    } else {
        base
    };
    FunctionSpace::shared(family, true, features, cfg.d1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Roles};

    fn one_row(cols: &[(&str, f64)], treatment: Option<&str>) -> Dataset {
        Dataset::new(
            cols.iter().map(|(n, v)| (n.to_string(), vec![*v])).collect(),
            Roles {
                treatment: treatment.map(str::to_string),
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn sp(features: Vec<Feature>) -> Arc<FunctionSpace> {
        Arc::new(FunctionSpace::shared(Family::Custom, true, features, 1).unwrap())
    }

    #[test]
    fn polynomial_degree_one_at_four() {
        let ds = one_row(&[("x", 4.0)], None);
        let space = sp(vec![Feature::Constant, Feature::power("x", 1)]);
        assert_eq!(space.evaluate_basis(&ds.obs(0)).unwrap(), vec![vec![1.0, 4.0]]);
    }

    #[test]
    fn constant_space() {
        let ds = one_row(&[("x", -7.5)], None);
        let space = FunctionSpace::constant(1);
        assert_eq!(space.evaluate_basis(&ds.obs(0)).unwrap(), vec![vec![1.0]]);
    }

    #[test]
    fn additive_two_covariates() {
        let ds = one_row(&[("x1", 2.0), ("x2", -1.0)], None);
        let space = sp(vec![Feature::Constant, Feature::power("x1", 1), Feature::power("x2", 1)]);
        assert_eq!(
            space.evaluate_basis(&ds.obs(0)).unwrap(),
            vec![vec![1.0, 2.0, -1.0]]
        );
    }

    #[test]
    fn missing_covariate() {
        let ds = one_row(&[("x1", 2.0)], None);
        let space = sp(vec![Feature::power("x9", 1)]);
        assert_eq!(
            space.design(&ds.obs(0)).unwrap_err(),
            Error::MissingCovariate("x9".into())
        );
    }

    #[test]
    fn evaluate_linear_combination() {
        let ds = one_row(&[("x", 4.0)], None);
        let space = sp(vec![Feature::Constant, Feature::power("x", 1)]);
        let f = FittedFunction::linear(space.clone(), vec![vec![2.0, 3.0]]).unwrap();
        assert_eq!(f.evaluate_scalar(&ds.obs(0)).unwrap(), 14.0);
        let z = FittedFunction::linear(space, vec![vec![0.0, 0.0]]).unwrap();
        assert_eq!(z.evaluate_scalar(&ds.obs(0)).unwrap(), 0.0);
    }

    #[test]
    fn combine_affine_rule() {
        let ds = one_row(&[("x", 1.0)], None);
        let c = sp(vec![Feature::Constant]);
        let f = FittedFunction::linear(c.clone(), vec![vec![0.5]]).unwrap();
        let g = FittedFunction::linear(c, vec![vec![2.0]]).unwrap();
        let h = combine(&f, 0.25, &g).unwrap();
        assert_eq!(h.evaluate_scalar(&ds.obs(0)).unwrap(), 1.0);
    }

    #[test]
    fn combine_vector_valued() {
        let ds = one_row(&[("x", 1.0)], None);
        let c = Arc::new(FunctionSpace::constant(2));
        let f = FittedFunction::linear(c.clone(), vec![vec![0.5], vec![0.1]]).unwrap();
        let g = FittedFunction::linear(c, vec![vec![1.0], vec![-1.0]]).unwrap();
        let h = combine(&f, 2.0, &g).unwrap();
        assert_eq!(h.evaluate(&ds.obs(0)).unwrap(), vec![2.5, 0.1 - 2.0]);
    }

    #[test]
    fn combine_identities() {
        let ds = one_row(&[("x", 0.3)], None);
        let space = sp(vec![Feature::Constant, Feature::power("x", 2)]);
        let f = FittedFunction::linear(space, vec![vec![1.7, -0.4]]).unwrap();
        let o = ds.obs(0);
        let fx = f.evaluate_scalar(&o).unwrap();
        let same = combine(&f, 1.0, &FittedFunction::zero(1)).unwrap();
        assert_eq!(same.evaluate_scalar(&o).unwrap(), fx);
        let gone = combine(&f, -1.0, &f).unwrap();
        assert_eq!(gone.evaluate_scalar(&o).unwrap(), 0.0);
        assert!(combine(&f, 1.0, &FittedFunction::zero(2)).is_err());
    }

    #[test]
    fn arm_features_use_counterfactual_treatment() {
        let ds = one_row(&[("x", 2.0), ("a", 1.0)], Some("a"));
        let f = Feature::arm(1, Feature::power("x", 1));
        assert_eq!(f.eval(&ds.obs(0)).unwrap(), 2.0);
        assert_eq!(f.eval(&ds.obs(0).with_treatment(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn polynomial_sieve_k2() {
        let s = nested_sieve(&SieveConfig::new(SieveFamily::Polynomial, &["x"]), 2).unwrap();
        assert_eq!(
            s.blocks()[0],
            vec![Feature::Constant, Feature::power("x", 1), Feature::power("x", 2)]
        );
    }

    #[test]
    fn linear_columns_enter_once_per_step() {
        let cfg = SieveConfig::new(SieveFamily::Polynomial, &["x"]).with_linear(&["a"]);
        let s = nested_sieve(&cfg, 2).unwrap();
        assert_eq!(
            s.blocks()[0],
            vec![
                Feature::Constant,
                Feature::power("a", 1),
                Feature::power("x", 1),
                Feature::power("x", 2)
            ]
        );
    }

    #[test]
    fn piecewise_linear_k2_midpoint_knot() {
        let cfg = SieveConfig::new(
            SieveFamily::PiecewiseLinear {
                lower: -1.0,
                upper: 1.0,
            },
            &["x"],
        );
        let s = nested_sieve(&cfg, 2).unwrap();
        assert_eq!(
            s.blocks()[0],
            vec![Feature::Constant, Feature::power("x", 1), Feature::hinge("x", 0.0)]
        );
        let s3 = nested_sieve(&cfg, 3).unwrap();
        assert_eq!(&s3.blocks()[0][3..], &[Feature::hinge("x", -0.5), Feature::hinge("x", 0.5)]);
    }

    #[test]
    fn nestedness_prefix() {
        let families = [
            SieveFamily::Polynomial,
            SieveFamily::PiecewiseLinear {
                lower: -1.0,
                upper: 1.0,
            },
        ];
        for family in families {
            let cfg = SieveConfig::new(family, &["x1", "x2", "x3"]).with_d1(2);
            let arms = cfg.clone().with_treatment_arms();
            for c in [cfg, arms] {
                for k in 1..6 {
                    let small = nested_sieve(&c, k).unwrap();
                    let big = nested_sieve(&c, k + 1).unwrap();
                    for (sb, bb) in small.blocks().iter().zip(big.blocks()) {
                        assert!(sb.len() < bb.len());
                        assert_eq!(sb.as_slice(), &bb[..sb.len()]);
                    }
                }
            }
        }
    }

    #[test]
    fn unsupported_family_name() {
        assert_eq!(
            "hal".parse::<SieveFamily>().unwrap_err(),
            Error::UnsupportedFamily("hal".into())
        );
        let bad = SieveConfig::new(
            SieveFamily::PiecewiseLinear {
                lower: 1.0,
                upper: 1.0,
            },
            &["x"],
        );
        assert!(matches!(nested_sieve(&bad, 2), Err(Error::UnsupportedFamily(_))));
    }

    #[test]
    fn serialization_round_trip() {
        let s = Arc::new(
            nested_sieve(&SieveConfig::new(SieveFamily::Polynomial, &["x"]).with_treatment_arms(), 2)
                .unwrap(),
        );
        let f = FittedFunction::from_flat(s.clone(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = combine(&f, 0.5, &f).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: FittedFunction = serde_json::from_str(&text).unwrap();
        let ds = one_row(&[("x", 0.7), ("a", 1.0)], Some("a"));
        assert_eq!(
            back.evaluate(&ds.obs(0)).unwrap(),
            g.evaluate(&ds.obs(0)).unwrap()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn combine_is_exact(
                cf in proptest::collection::vec(-5.0f64..5.0, 4),
                cg in proptest::collection::vec(-5.0f64..5.0, 4),
                w in -3.0f64..3.0,
                xs in proptest::collection::vec(-2.0f64..2.0, 100),
            ) {
                let space = Arc::new(nested_sieve(&SieveConfig::new(SieveFamily::Polynomial, &["x"]), 3).unwrap());
                let f = FittedFunction::from_flat(space.clone(), &cf).unwrap();
                let g = FittedFunction::from_flat(space, &cg).unwrap();
                let h = combine(&f, w, &g).unwrap();
                let ds = Dataset::new(vec![("x".into(), xs.clone())], Roles::default()).unwrap();
                for i in 0..xs.len() {
                    let o = ds.obs(i);
                    let lhs = h.evaluate_scalar(&o).unwrap();
                    let rhs = f.evaluate_scalar(&o).unwrap() + w * g.evaluate_scalar(&o).unwrap();
                    prop_assert_eq!(lhs.to_bits(), rhs.to_bits());
                }
            }
        }
    }
}
