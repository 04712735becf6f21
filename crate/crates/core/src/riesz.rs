//! The Hessian Riesz representer: assembly of the quadratic Riesz risk
//! `αᵀ A α - 2 bᵀ α` over a basis and its closed-form solution.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{FittedFunction, FunctionSpace};
use crate::data::{Dataset, Obs};
use crate::error::{Error, Result};
use crate::fit::{add_quadratic_form, solve_spd, symmetrize, Design};
use crate::functional::{DerivPoint, FunctionalSpec};
use crate::loss::LossSpec;
use crate::par;

/// Ridge grid searched by [`select_ridge`], ascending.
pub const RIDGE_GRID: [f64; 7] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// `A = (1/n) Σ Bᵢᵀ Hᵢ Bᵢ` and `b_j = (1/n) Σ ṁ(zᵢ, b_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RieszSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub n: usize,
}

impl RieszSystem {
    pub fn p(&self) -> usize {
        self.b.len()
    }

    /// Empirical Riesz risk `cᵀ A c - 2 bᵀ c`.
    pub fn risk(&self, c: &[f64]) -> f64 {
        let c = DVector::from_column_slice(c);
        (c.transpose() * &self.a * &c)[0] - 2.0 * self.b.dot(&c)
    }

    /// `A c - b`, the empirical Riesz representation residual per basis
    /// function.
    pub fn residual(&self, c: &[f64]) -> Vec<f64> {
        let c = DVector::from_column_slice(c);
        (&self.a * c - &self.b).as_slice().to_vec()
    }
}

/// Per-row ingredients of the Riesz risk: the loss Hessian at `θ(zᵢ)` and
/// the derivative representation of the functional at `θ`.
#[derive(Debug, Clone)]
pub struct RieszRow {
    pub hess: Vec<f64>,
    pub rep: Vec<DerivPoint>,
}

impl RieszRow {
    /// `loss` and `theta` as seen by this row.
    pub fn new(loss: &LossSpec, theta: &FittedFunction, func: &FunctionalSpec, obs: Obs<'_>) -> Result<Self> {
        let th = theta.evaluate(&obs)?;
        Ok(RieszRow {
            hess: loss.point(&obs)?.hessian(&th)?,
            rep: func.representation(obs, theta)?,
        })
    }
}

/// Unnormalized sums over a row set.
#[derive(Debug, Clone)]
struct Sums {
    a: Vec<f64>,
    b: Vec<f64>,
    count: usize,
}

impl Sums {
    fn zeros(p: usize) -> Self {
        Sums {
            a: vec![0.0; p * p],
            b: vec![0.0; p],
            count: 0,
        }
    }

    fn merge(&mut self, o: Sums) {
        for (x, y) in self.a.iter_mut().zip(o.a) {
            *x += y;
        }
        for (x, y) in self.b.iter_mut().zip(o.b) {
            *x += y;
        }
        self.count += o.count;
    }

    fn minus(&self, o: &Sums) -> Sums {
        Sums {
            a: self.a.iter().zip(&o.a).map(|(x, y)| x - y).collect(),
            b: self.b.iter().zip(&o.b).map(|(x, y)| x - y).collect(),
            count: self.count - o.count,
        }
    }

    fn system(&self, p: usize) -> RieszSystem {
        let m = self.count.max(1) as f64;
        let mut a = self.a.clone();
        symmetrize(&mut a, p);
        RieszSystem {
            a: DMatrix::from_row_slice(p, p, &a) / m,
            b: DVector::from_iterator(p, self.b.iter().map(|x| x / m)),
            n: self.count,
        }
    }
}

fn sums(
    rows_data: &[Option<RieszRow>],
    space: &FunctionSpace,
    design: &Design,
    data: &Dataset,
    rows: &[usize],
) -> Result<Sums> {
    let p = design.p();
    let d1 = space.d1();
    let block_of = design.block_of();
    par::chunked_fold(
        rows,
        || Sums::zeros(p),
        |acc, &i| {
            let r = rows_data[i]
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("row {i} has no Riesz inputs")))?;
            let x = design.row(i);
            add_quadratic_form(&mut acc.a, x, block_of, &r.hess, d1);
            for pt in &r.rep {
                if pt.v.len() != d1 {
                    return Err(Error::DimensionMismatch {
                        expected: d1,
                        found: pt.v.len(),
                    });
                }
                let owned;
                let xp: &[f64] = match pt.treatment {
                    None => x,
                    Some(_) => {
                        owned = space.design(&pt.obs(data.obs(i)))?;
                        &owned
                    }
                };
                for j in 0..p {
                    acc.b[j] += pt.v[block_of[j]] * xp[j];
                }
            }
            acc.count += 1;
            Ok(())
        },
        Sums::merge,
    )
}

/// Assembles the Riesz system from precomputed per-row inputs (indexed by
/// data row) over `rows`.
pub fn assemble_rows(
    rows_data: &[Option<RieszRow>],
    space: &FunctionSpace,
    design: &Design,
    data: &Dataset,
    rows: &[usize],
) -> Result<RieszSystem> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(sums(rows_data, space, design, data, rows)?.system(design.p()))
}

/// Assembles the Riesz system for a single `(loss, θ)` over `rows`.
pub fn assemble_riesz_system(
    loss: &LossSpec,
    theta: &FittedFunction,
    func: &FunctionalSpec,
    space: &FunctionSpace,
    data: &Dataset,
    rows: &[usize],
) -> Result<RieszSystem> {
    let design = Design::new(space, data)?;
    let inputs = riesz_inputs(data, rows, |_| Ok((loss, theta)), func)?;
    assemble_rows(&inputs, space, &design, data, rows)
}

/// Per-row inputs for `rows`, with the `(loss, θ)` pair chosen per row.
pub fn riesz_inputs<'a, F>(
    data: &Dataset,
    rows: &[usize],
    pick: F,
    func: &FunctionalSpec,
) -> Result<Vec<Option<RieszRow>>>
where
    F: Fn(usize) -> Result<(&'a LossSpec, &'a FittedFunction)> + Sync + Send,
{
    let mut out = vec![None; data.n()];
    let computed = par::map_slice(rows, |&i| {
        let (loss, theta) = pick(i)?;
        RieszRow::new(loss, theta, func, data.obs(i))
    });
    for (&i, r) in rows.iter().zip(computed) {
        out[i] = Some(r?);
    }
    Ok(out)
}

/// Fitted representer `α_n`.
#[derive(Debug, Clone)]
pub struct RieszFit {
    pub function: FittedFunction,
    pub coefficients: Vec<f64>,
    pub ridge: f64,
}

/// Solves `(A + λI) c = b`.
pub fn fit_riesz(system: &RieszSystem, ridge: f64, space: Arc<FunctionSpace>) -> Result<RieszFit> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("negative ridge {ridge}")));
    }
    if system.a.iter().any(|x| !x.is_finite()) || system.b.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("non-finite Riesz system".into()));
    }
    let p = system.p();
    let a = &system.a + DMatrix::identity(p, p) * ridge;
    let c = solve_spd(&a, &system.b)?;
    let coefficients = c.as_slice().to_vec();
    Ok(RieszFit {
        function: FittedFunction::from_flat(space, &coefficients)?,
        coefficients,
        ridge,
    })
}

/// Ridge choice for the representer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum RidgeChoice {
    Fixed(f64),
    /// Cross-validated over [`RIDGE_GRID`] with the given number of folds.
    Cv { cv_folds: usize },
}

impl Default for RidgeChoice {
    fn default() -> Self {
        RidgeChoice::Cv { cv_folds: 5 }
    }
}

/// Picks the ridge in [`RIDGE_GRID`] minimizing the held-out Riesz risk
/// over `folds` interleaved splits of `rows`; ties go to the larger ridge.
pub fn select_ridge(
    rows_data: &[Option<RieszRow>],
    space: &FunctionSpace,
    design: &Design,
    data: &Dataset,
    rows: &[usize],
    folds: usize,
) -> Result<f64> {
    let folds = folds.clamp(2, rows.len().max(2));
    if rows.len() < folds {
        return Ok(0.0);
    }
    let p = design.p();
    let parts: Vec<Vec<usize>> = (0..folds)
        .map(|k| rows.iter().copied().skip(k).step_by(folds).collect())
        .collect();
    let part_sums: Vec<Sums> = parts
        .iter()
        .map(|r| sums(rows_data, space, design, data, r))
        .collect::<Result<_>>()?;
    let mut total = Sums::zeros(p);
    for s in &part_sums {
        total.merge(s.clone());
    }
    let mut best = (f64::INFINITY, 0.0);
    for &lambda in &RIDGE_GRID {
        let mut risk = 0.0;
        let mut ok = true;
        for held in &part_sums {
            let train = total.minus(held).system(p);
            match fit_riesz(&train, lambda, Arc::new(space.clone())) {
                Ok(f) => {
                    // Held-out sums: Σ cᵀ Hᵢ c - 2 Σ ṁ(zᵢ, c).
                    let hv = held.system(p);
                    risk += hv.risk(&f.coefficients) * held.count as f64;
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && risk.is_finite() && risk <= best.0 {
            best = (risk, lambda);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{Feature, Family};
    use crate::data::Roles;
    use crate::fit::{fit_erm, FitConfig};
    use crate::functional::AteTarget;
    use crate::loss::{LossKind, Nuisance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ate_data(a: Vec<f64>, y: Vec<f64>) -> Dataset {
        Dataset::new(
            vec![("a".into(), a), ("y".into(), y)],
            Roles {
                treatment: Some("a".into()),
                outcome: Some("y".into()),
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn arms() -> Arc<FunctionSpace> {
        Arc::new(
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
        )
    }

    fn ate() -> FunctionalSpec {
        FunctionalSpec::AteContrast {
            target: AteTarget::OutcomeRegression,
        }
    }

    #[test]
    fn saturated_ate_system() {
        let d = ate_data(vec![1.0, 1.0, 0.0, 0.0], vec![0.0; 4]);
        let sp = arms();
        let theta = FittedFunction::zero(1);
        let sys = assemble_riesz_system(&LossSpec::squared_error(), &theta, &ate(), &sp, &d, &[0, 1, 2, 3]).unwrap();
        assert_eq!(sys.a, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]));
        assert_eq!(sys.b.as_slice(), &[1.0, -1.0]);
        let fit = fit_riesz(&sys, 0.0, sp.clone()).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((fit.coefficients[1] + 2.0).abs() < 1e-10);
        let big = fit_riesz(&sys, 1e12, sp).unwrap();
        assert!(big.coefficients.iter().all(|c| c.abs() < 1e-10));
    }

    #[test]
    fn constant_mean_system() {
        let d = ate_data(vec![1.0, 0.0, 1.0], vec![1.0, 2.0, 3.0]);
        let sp = Arc::new(FunctionSpace::constant(1));
        let sys = assemble_riesz_system(
            &LossSpec::squared_error(),
            &FittedFunction::zero(1),
            &FunctionalSpec::MeanOfTheta,
            &sp,
            &d,
            &[0, 1, 2],
        )
        .unwrap();
        assert_eq!(sys.a[(0, 0)], 1.0);
        assert_eq!(sys.b[0], 1.0);
        assert_eq!(fit_riesz(&sys, 0.0, sp).unwrap().coefficients, vec![1.0]);
    }

    #[test]
    fn rlearner_constant_basis() {
        let a = vec![1.0, 0.0, 1.0, 1.0];
        let pi = vec![0.3, 0.6, 0.5, 0.9];
        let d = Dataset::new(
            vec![
                ("a".into(), a.clone()),
                ("y".into(), vec![0.0; 4]),
                ("pi".into(), pi.clone()),
                ("m".into(), vec![0.0; 4]),
            ],
            Roles {
                treatment: Some("a".into()),
                outcome: Some("y".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let loss = LossSpec::new(LossKind::Rlearner)
            .with_nuisance("pi", Nuisance::column("pi"))
            .with_nuisance("m", Nuisance::column("m"));
        let sys = assemble_riesz_system(
            &loss,
            &FittedFunction::zero(1),
            &FunctionalSpec::MeanOfTheta,
            &FunctionSpace::constant(1),
            &d,
            &[0, 1, 2, 3],
        )
        .unwrap();
        let expect: f64 = a.iter().zip(&pi).map(|(a, p)| (a - p) * (a - p)).sum::<f64>() / 4.0;
        assert!((sys.a[(0, 0)] - expect).abs() < 1e-15);
    }

    fn random_problem(seed: u64) -> (Dataset, Arc<FunctionSpace>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = x.iter().map(|x| f64::from(rng.random_bool(0.3 + 0.4 * (x + 1.0) / 2.0))).collect();
        let y: Vec<f64> = x.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect();
        let d = Dataset::new(
            vec![("x".into(), x), ("a".into(), a), ("y".into(), y)],
            Roles {
                covariates: vec!["x".into()],
                treatment: Some("a".into()),
                outcome: Some("y".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let f: Vec<Feature> = [Feature::Constant, Feature::power("x", 1), Feature::power("x", 2)]
            .into_iter()
            .flat_map(|f| [Feature::arm(1, f.clone()), Feature::arm(0, f)])
            .collect();
        (d, Arc::new(FunctionSpace::shared(Family::Custom, true, f, 1).unwrap()))
    }

    #[test]
    fn normal_equation_residual() {
        for seed in 0..5 {
            let (d, sp) = random_problem(seed);
            let rows: Vec<usize> = (0..d.n()).collect();
            let sys = assemble_riesz_system(&LossSpec::squared_error(), &FittedFunction::zero(1), &ate(), &sp, &d, &rows).unwrap();
            let fit = fit_riesz(&sys, 0.0, sp.clone()).unwrap();
            // Recompute both sides directly from the fitted function.
            for j in 0..sp.total_dim() {
                let mut e = vec![0.0; sp.total_dim()];
                e[j] = 1.0;
                let bj = FittedFunction::from_flat(sp.clone(), &e).unwrap();
                let mut lhs = 0.0;
                let mut rhs = 0.0;
                for i in 0..d.n() {
                    let o = d.obs(i);
                    lhs += bj.evaluate_scalar(&o).unwrap() * fit.function.evaluate_scalar(&o).unwrap();
                    rhs += ate().derivative(o, &FittedFunction::zero(1), &bj).unwrap();
                }
                assert!(((lhs - rhs) / d.n() as f64).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn equals_generic_erm_on_riesz_loss() {
        let (d, _) = random_problem(9);
        let sp = Arc::new(
            FunctionSpace::shared(
                Family::Custom,
                true,
                vec![Feature::Constant, Feature::power("x", 1), Feature::power("x", 2)],
                1,
            )
            .unwrap(),
        );
        let rows: Vec<usize> = (0..d.n()).collect();
        let theta = FittedFunction::zero(1);
        let base = LossSpec::new(LossKind::Rlearner)
            .with_nuisance("pi", Nuisance::column("x"))
            .with_nuisance("m", Nuisance::column("y"));
        let func = FunctionalSpec::MeanOfTheta;
        let sys = assemble_riesz_system(&base, &theta, &func, &sp, &d, &rows).unwrap();
        let closed = fit_riesz(&sys, 0.0, sp.clone()).unwrap();
        let erm = fit_erm(
            &LossSpec::riesz(base, theta, func),
            sp,
            &d,
            &rows,
            &FitConfig {
                solver: crate::fit::Solver::Newton,
                ..Default::default()
            },
        )
        .unwrap();
        for (x, y) in closed.coefficients.iter().zip(&erm.coefficients) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn ate_riesz_loss_is_not_pointwise() {
        let d = ate_data(vec![1.0, 0.0], vec![1.0, 0.0]);
        let loss = LossSpec::riesz(LossSpec::squared_error(), FittedFunction::zero(1), ate());
        assert_eq!(loss.point(&d.obs(0)).unwrap_err(), Error::NonPointwiseFunctional);
    }

    /// Coordinate search with shrinking grids on the empirical Riesz risk.
    fn grid_minimize(risk: impl Fn(&[f64]) -> f64, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; p];
        let mut width = 16.0;
        while width > 1e-9 {
            for _ in 0..3 {
                for j in 0..p {
                    let center = c[j];
                    let mut best = (risk(&c), center);
                    for k in -50..=50 {
                        let mut t = c.clone();
                        t[j] = center + width * k as f64 / 50.0;
                        let r = risk(&t);
                        if r < best.0 {
                            best = (r, t[j]);
                        }
                    }
                    c[j] = best.1;
                }
            }
            width /= 10.0;
        }
        c
    }

    #[test]
    fn discrete_brute_force_oracle() {
        // Four support points (x, a) with a saturated basis.
        let xs = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let a_ = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let d = Dataset::new(
            vec![("x".into(), xs.to_vec()), ("a".into(), a_.to_vec()), ("y".into(), vec![0.0; 10])],
            Roles {
                treatment: Some("a".into()),
                outcome: Some("y".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let feats = vec![
            Feature::arm(1, Feature::Constant),
            Feature::arm(1, Feature::power("x", 1)),
            Feature::arm(0, Feature::Constant),
            Feature::arm(0, Feature::power("x", 1)),
        ];
        let sp = Arc::new(FunctionSpace::shared(Family::Custom, true, feats, 1).unwrap());
        let rows: Vec<usize> = (0..10).collect();
        let sys = assemble_riesz_system(&LossSpec::squared_error(), &FittedFunction::zero(1), &ate(), &sp, &d, &rows).unwrap();
        let fit = fit_riesz(&sys, 0.0, sp.clone()).unwrap();
        let brute = grid_minimize(|c| sys.risk(c), 4);
        for (x, y) in fit.coefficients.iter().zip(&brute) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        // Representer equals a/π̂(x) - (1-a)/(1-π̂(x)) with empirical π̂.
        for i in 0..10 {
            let o = d.obs(i);
            let same_x: Vec<usize> = (0..10).filter(|&j| xs[j] == xs[i]).collect();
            let pi = same_x.iter().map(|&j| a_[j]).sum::<f64>() / same_x.len() as f64;
            let expect = if a_[i] == 1.0 { 1.0 / pi } else { -1.0 / (1.0 - pi) };
            assert!((fit.function.evaluate_scalar(&o).unwrap() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn ridge_selection_is_on_grid() {
        let (d, sp) = random_problem(2);
        let rows: Vec<usize> = (0..d.n()).collect();
        let design = Design::new(&sp, &d).unwrap();
        let theta = FittedFunction::zero(1);
        let loss = LossSpec::squared_error();
        let inputs = riesz_inputs(&d, &rows, |_| Ok((&loss, &theta)), &ate()).unwrap();
        let lambda = select_ridge(&inputs, &sp, &design, &d, &rows, 5).unwrap();
        assert!(RIDGE_GRID.contains(&lambda));
        assert_eq!(lambda, select_ridge(&inputs, &sp, &design, &d, &rows, 5).unwrap());
    }
}
