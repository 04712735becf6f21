//! Cross-fitted nuisances, the one-step, targeted and sieve estimators,
//! influence-based standard errors and Wald intervals.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{combine, nested_sieve, FittedFunction, FunctionSpace, SieveConfig};
use crate::data::{make_folds_on, CrossFitPlan, Dataset, PlanMode};
use crate::error::{Error, Result};
use crate::fit::{bind_points, cross_validate_points, fit_erm, fit_points, Design, FitConfig};
use crate::functional::FunctionalSpec;
use crate::loss::{Link, LossKind, LossSpec, Nuisance, Nuisances, PointLoss};
use crate::par;
use crate::riesz::{assemble_rows, fit_riesz, riesz_inputs, select_ridge, RidgeChoice};
use crate::stats::normal_quantile;

/// Largest admissible `|ε - 1|` for the stabilization factor.
pub const MAX_STABILIZATION_SHIFT: f64 = 10.0;
/// Half-width of the fluctuation bracket.
pub const FLUCTUATION_BOUND: f64 = 10.0;

/// How to obtain one nuisance function.
#[derive(Debug, Clone)]
pub struct NuisanceSpec {
    pub name: String,
    pub loss: LossSpec,
    pub space: Arc<FunctionSpace>,
    pub link: Link,
}

#[derive(Debug, Clone)]
pub enum EtaSource {
    /// Fit every nuisance on each fold's training rows.
    Fit(Vec<NuisanceSpec>),
    /// Supplied functions, shared by all folds.
    Known(Nuisances),
}

#[derive(Debug, Clone)]
pub enum ThetaSource {
    Fit,
    Known(FittedFunction),
}

#[derive(Debug, Clone)]
pub enum AlphaSource {
    Fit(RidgeChoice),
    Known(FittedFunction),
}

/// Inputs of a cross-fitted estimate: nuisance, `θ` and representer sources.
#[derive(Debug, Clone)]
pub struct CrossFitSpec {
    pub eta: EtaSource,
    pub theta_loss: LossKind,
    pub theta_space: Arc<FunctionSpace>,
    pub theta: ThetaSource,
    pub functional: FunctionalSpec,
    pub alpha_space: Arc<FunctionSpace>,
    pub alpha: AlphaSource,
    pub fit: FitConfig,
}

/// Fits produced without the rows of one fold.
#[derive(Debug, Clone)]
pub struct FoldFit {
    /// The `θ`-loss with this fold's nuisances bound.
    pub loss: LossSpec,
    pub theta: FittedFunction,
    pub alpha: FittedFunction,
    pub riesz_ridge: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FoldFits {
    pub folds: Vec<FoldFit>,
    pub functional: FunctionalSpec,
}

impl FoldFits {
    /// Fit serving `row` under `plan`.
    pub fn for_row(&self, plan: &CrossFitPlan, row: usize) -> Result<&FoldFit> {
        let s = plan
            .fold_for(row)
            .ok_or_else(|| Error::InvalidConfig(format!("row {row} belongs to no fold")))?;
        self.folds
            .get(s)
            .ok_or_else(|| Error::InvalidConfig(format!("no fits for fold {s}")))
    }
}

fn fold_losses(data: &Dataset, plan: &CrossFitPlan, spec: &CrossFitSpec) -> Result<Vec<LossSpec>> {
    let base = LossSpec::new(spec.theta_loss.clone());
    match &spec.eta {
        EtaSource::Known(eta) => Ok(vec![base.with_nuisances(eta.clone()); plan.folds()]),
        EtaSource::Fit(specs) => par::map_range(plan.folds(), |s| -> Result<LossSpec> {
            let train = plan.train_rows(s);
            let mut eta = Nuisances::new();
            for ns in specs {
                let fit = fit_erm(&ns.loss, ns.space.clone(), data, &train, &spec.fit).map_err(|e| e.in_fold(s))?;
                eta.insert(ns.name.clone(), Nuisance::new(fit.function, ns.link));
            }
            Ok(base.clone().with_nuisances(eta))
        })
        .into_iter()
        .collect(),
    }
}

/// Per-row losses, each bound with the nuisances of the row's fold.
pub fn row_points(data: &Dataset, plan: &CrossFitPlan, losses: &[LossSpec]) -> Result<Vec<Option<PointLoss>>> {
    par::map_range(data.n(), |i| match plan.fold_for(i) {
        Some(s) => losses[s].point(&data.obs(i)).map(Some),
        None => Ok(None),
    })
    .into_iter()
    .collect()
}

fn dense_points(points: Vec<Option<PointLoss>>) -> Vec<PointLoss> {
    // Rows outside every fold are never indexed; any placeholder works.
    points
        .into_iter()
        .map(|p| p.unwrap_or(PointLoss::Residual { w: 0.0, s: 0.0, r: 0.0 }))
        .collect()
}

/// Cross-fitting: per fold, nuisances, then `θ` on the cross-fitted
/// orthogonal risk, then `α` on the cross-fitted Riesz risk, each trained on
/// the fold's training rows with every row using its own fold's fits.
pub fn cross_fit_nuisances(data: &Dataset, plan: &CrossFitPlan, spec: &CrossFitSpec) -> Result<FoldFits> {
    if plan.n() != data.n() {
        return Err(Error::DimensionMismatch {
            expected: data.n(),
            found: plan.n(),
        });
    }
    let folds = plan.folds();
    let losses = fold_losses(data, plan, spec)?;

    let thetas: Vec<FittedFunction> = match &spec.theta {
        ThetaSource::Known(f) => vec![f.clone(); folds],
        ThetaSource::Fit => {
            let points = dense_points(row_points(data, plan, &losses)?);
            let design = Design::new(&spec.theta_space, data)?;
            par::map_range(folds, |s| {
                fit_points(&points, &design, &plan.train_rows(s), spec.theta_space.clone(), &spec.fit)
                    .map(|f| f.function)
                    .map_err(|e| e.in_fold(s))
            })
            .into_iter()
            .collect::<Result<_>>()?
        }
    };

    let alphas: Vec<(FittedFunction, Option<f64>)> = match &spec.alpha {
        AlphaSource::Known(f) => vec![(f.clone(), None); folds],
        AlphaSource::Fit(ridge) => {
            let rows: Vec<usize> = (0..data.n()).filter(|&i| plan.fold_for(i).is_some()).collect();
            let inputs = riesz_inputs(
                data,
                &rows,
                |i| {
                    let s = plan.fold_for(i).expect("filtered to assigned rows");
                    Ok((&losses[s], &thetas[s]))
                },
                &spec.functional,
            )?;
            let design = Design::new(&spec.alpha_space, data)?;
            par::map_range(folds, |s| -> Result<(FittedFunction, Option<f64>)> {
                let train = plan.train_rows(s);
                let lambda = match ridge {
                    RidgeChoice::Fixed(l) => *l,
                    RidgeChoice::Cv { cv_folds } => {
                        select_ridge(&inputs, &spec.alpha_space, &design, data, &train, *cv_folds)
                            .map_err(|e| e.in_fold(s))?
                    }
                };
                let sys = assemble_rows(&inputs, &spec.alpha_space, &design, data, &train).map_err(|e| e.in_fold(s))?;
                let fit = fit_riesz(&sys, lambda, spec.alpha_space.clone()).map_err(|e| e.in_fold(s))?;
                Ok((fit.function, Some(lambda)))
            })
            .into_iter()
            .collect::<Result<_>>()?
        }
    };

    Ok(FoldFits {
        folds: losses
            .into_iter()
            .zip(thetas)
            .zip(alphas)
            .map(|((loss, theta), (alpha, riesz_ridge))| FoldFit {
                loss,
                theta,
                alpha,
                riesz_ridge,
            })
            .collect(),
        functional: spec.functional.clone(),
    })
}

/// Per-row quantities at `(θ, α)` of the row's fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTerms {
    /// `m(z, θ)`.
    pub m: f64,
    /// `ℓ̇(θ)(α)(z) = g(z)ᵀ α(z)`.
    pub score: f64,
    /// `ṁ_θ(z, α)`.
    pub mdot: f64,
    /// `ℓ̈(θ)(α, α)(z) = α(z)ᵀ H(z) α(z)`.
    pub curvature: f64,
}

fn row_terms(data: &Dataset, row: usize, loss: &LossSpec, theta: &FittedFunction, alpha: &FittedFunction, func: &FunctionalSpec) -> Result<RowTerms> {
    let obs = data.obs(row);
    let th = theta.evaluate(&obs)?;
    let al = alpha.evaluate(&obs)?;
    if al.len() != th.len() {
        return Err(Error::DimensionMismatch {
            expected: th.len(),
            found: al.len(),
        });
    }
    let d = loss.point(&obs)?.derivs(&th)?;
    let k = th.len();
    let score = d.grad.iter().zip(&al).map(|(g, a)| g * a).sum();
    let mut curvature = 0.0;
    for i in 0..k {
        for j in 0..k {
            curvature += al[i] * d.hess[i * k + j] * al[j];
        }
    }
    let eval_theta = |o: crate::data::Obs<'_>| theta.evaluate(&o);
    let eval_alpha = |o: crate::data::Obs<'_>| alpha.evaluate(&o);
    Ok(RowTerms {
        m: func.value_with(obs, &eval_theta)?,
        score,
        mdot: func.derivative_with(obs, &eval_theta, &eval_alpha)?,
        curvature,
    })
}

/// Terms of every evaluation row, in row order.
pub fn evaluate_rows(data: &Dataset, plan: &CrossFitPlan, fits: &FoldFits) -> Result<Vec<RowTerms>> {
    let rows = plan.all_eval_rows();
    par::map_slice(&rows, |&i| {
        let f = fits.for_row(plan, i)?;
        row_terms(data, i, &f.loss, &f.theta, &f.alpha, &fits.functional)
    })
    .into_iter()
    .collect()
}

/// Ordered mean.
fn mean(xs: &[f64]) -> f64 {
    sum(xs) / xs.len() as f64
}

fn sum(xs: &[f64]) -> f64 {
    par::ordered_sum::<_, (), _>(xs, |x| Ok(*x)).expect("infallible")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub plug_in: f64,
    /// `P_n ℓ̇(θ)(α)` (before any stabilization).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fluctuation_epsilon: Option<f64>,
    /// `P_n ℓ̇(θ*)(α)` after targeting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_targeting_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stabilization_factor: Option<f64>,
    /// Set when the stabilization factor was degenerate and the
    /// unstabilized update was used instead.
    #[serde(default)]
    pub stabilization_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_theta: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_alpha: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub riesz_ridge: Vec<f64>,
    pub folds: usize,
    pub fold_seed: u64,
    pub plan_mode: PlanMode,
    #[serde(default)]
    pub degenerate_variance: bool,
}

/// Point estimate, Wald interval and per-row influence values.
///
/// For one-step reports the influence values are centered at the plug-in:
/// `χ = m(z, θ) - ψ_plug - ℓ̇(θ)(α)(z)`. Targeted and sieve reports use
/// the same form at the final `θ` with `ψ_plug = ψ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub psi_hat: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub level: f64,
    pub n: usize,
    pub influence: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wald {
    pub se: f64,
    pub ci: [f64; 2],
    pub degenerate: bool,
}

/// `se = sqrt(Σχ²)/n`, `ci = ψ̂ ± z se`.
pub fn wald_interval(influence: &[f64], psi_hat: f64, level: f64) -> Result<Wald> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("level {level} outside (0, 1)")));
    }
    let n = influence.len();
    if n < 2 {
        return Err(Error::Degenerate("need at least two influence values".into()));
    }
    let sq: Vec<f64> = influence.iter().map(|x| x * x).collect();
    let se = sum(&sq).sqrt() / n as f64;
    let q = normal_quantile(0.5 * (1.0 + level));
    Ok(Wald {
        se,
        ci: [psi_hat - q * se, psi_hat + q * se],
        degenerate: influence.iter().all(|&x| x == influence[0]),
    })
}

fn base_diagnostics(plan: &CrossFitPlan, fits: Option<&FoldFits>) -> Diagnostics {
    Diagnostics {
        folds: plan.folds(),
        fold_seed: plan.seed(),
        plan_mode: plan.mode(),
        riesz_ridge: fits
            .map(|f| f.folds.iter().filter_map(|x| x.riesz_ridge).collect())
            .unwrap_or_default(),
        ..Default::default()
    }
}

fn report(estimator: &str, psi_hat: f64, influence: Vec<f64>, level: f64, mut diagnostics: Diagnostics) -> Result<EstimateReport> {
    let w = wald_interval(&influence, psi_hat, level)?;
    diagnostics.degenerate_variance = w.degenerate;
    Ok(EstimateReport {
        estimator: estimator.to_string(),
        psi_hat,
        se: w.se,
        ci: w.ci,
        level,
        n: influence.len(),
        influence,
        diagnostics,
    })
}

/// `ε_n = Σ ṁ_θ(α) / Σ ℓ̈(θ)(α, α)` over the evaluation rows.
pub fn stabilization_factor(data: &Dataset, plan: &CrossFitPlan, fits: &FoldFits) -> Result<f64> {
    stabilization_from_terms(&evaluate_rows(data, plan, fits)?)
}

fn stabilization_from_terms(terms: &[RowTerms]) -> Result<f64> {
    let num = sum(&terms.iter().map(|t| t.mdot).collect::<Vec<_>>());
    let den = sum(&terms.iter().map(|t| t.curvature).collect::<Vec<_>>());
    if !(den > 0.0) {
        return Err(Error::Degenerate(format!("Riesz curvature {den} is not positive")));
    }
    let eps = num / den;
    if !eps.is_finite() || (eps - 1.0).abs() > MAX_STABILIZATION_SHIFT {
        return Err(Error::Degenerate(format!("stabilization factor {eps}")));
    }
    Ok(eps)
}

/// One-step estimate `P_n m(θ) - P_n ℓ̇(θ)(α)`, optionally with `α`
/// rescaled by the stabilization factor.
pub fn one_step_estimate(data: &Dataset, plan: &CrossFitPlan, fits: &FoldFits, stabilize: bool, level: f64) -> Result<EstimateReport> {
    let terms = evaluate_rows(data, plan, fits)?;
    let m: Vec<f64> = terms.iter().map(|t| t.m).collect();
    let scores: Vec<f64> = terms.iter().map(|t| t.score).collect();
    let plug = mean(&m);
    let corr = mean(&scores);
    let mut diag = base_diagnostics(plan, Some(fits));
    diag.plug_in = plug;
    diag.correction = Some(corr);
    let mut scale = 1.0;
    if stabilize {
        match stabilization_from_terms(&terms) {
            Ok(eps) => {
                scale = eps;
                diag.stabilization_factor = Some(eps);
            }
            Err(Error::Degenerate(_)) => diag.stabilization_fallback = true,
            Err(e) => return Err(e),
        }
    }
    let psi = plug - scale * corr;
    let influence = terms.iter().map(|t| t.m - plug - scale * t.score).collect();
    let name = if stabilize { "onestep_stabilized" } else { "onestep" };
    report(name, psi, influence, level, diag)
}

/// Plug-in `P_n m(θ)` with the one-step influence values for its interval.
pub fn plugin_estimate(data: &Dataset, plan: &CrossFitPlan, fits: &FoldFits, level: f64) -> Result<EstimateReport> {
    let terms = evaluate_rows(data, plan, fits)?;
    let m: Vec<f64> = terms.iter().map(|t| t.m).collect();
    let plug = mean(&m);
    let mut diag = base_diagnostics(plan, Some(fits));
    diag.plug_in = plug;
    diag.correction = Some(mean(&terms.iter().map(|t| t.score).collect::<Vec<_>>()));
    let influence = terms.iter().map(|t| t.m - plug - t.score).collect();
    report("plugin", plug, influence, level, diag)
}

/// One row of the pooled fluctuation problem.
#[derive(Debug, Clone)]
pub struct FluctuationRow {
    pub point: PointLoss,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl FluctuationRow {
    fn at(&self, eps: f64) -> Vec<f64> {
        self.theta.iter().zip(&self.alpha).map(|(t, a)| t + eps * a).collect()
    }

    /// `(gᵀα, αᵀHα)` at `θ + εα`.
    fn score(&self, eps: f64) -> Result<(f64, f64)> {
        let d = self.point.derivs(&self.at(eps))?;
        let k = self.alpha.len();
        let g = d.grad.iter().zip(&self.alpha).map(|(g, a)| g * a).sum();
        let mut h = 0.0;
        for i in 0..k {
            for j in 0..k {
                h += self.alpha[i] * d.hess[i * k + j] * self.alpha[j];
            }
        }
        Ok((g, h))
    }
}

fn pooled_score(rows: &[FluctuationRow], eps: f64) -> Result<(f64, f64)> {
    let parts = par::chunked_fold(
        rows,
        || (0.0, 0.0),
        |acc, r| {
            let (g, h) = r.score(eps)?;
            acc.0 += g;
            acc.1 += h;
            Ok(())
        },
        |acc, p| {
            acc.0 += p.0;
            acc.1 += p.1;
        },
    )?;
    Ok(parts)
}

/// `ε_n` minimizing `Σ ℓ(θᵢ + ε αᵢ)`: closed form for quadratic losses,
/// otherwise safeguarded Newton on the score inside `[-10, 10]`.
pub fn solve_fluctuation(rows: &[FluctuationRow]) -> Result<f64> {
    let n = rows.len().max(1) as f64;
    let tol = 1e-10 * n;
    if rows.iter().all(|r| r.alpha.iter().all(|a| *a == 0.0)) {
        return Ok(0.0);
    }
    let (s0, h0) = pooled_score(rows, 0.0)?;
    if s0.abs() < tol {
        return Ok(0.0);
    }
    if rows.iter().all(|r| r.point.is_quadratic()) {
        if !(h0 > 0.0) {
            return Err(Error::Degenerate(format!("fluctuation curvature {h0}")));
        }
        return Ok(-s0 / h0);
    }
    // Bracket: the score is increasing where the risk is convex along α.
    let eval = |e: f64| pooled_score(rows, e);
    let mut lo = -FLUCTUATION_BOUND;
    let mut hi = FLUCTUATION_BOUND;
    let mut s_lo = None;
    let mut s_hi = None;
    for _ in 0..60 {
        if s_lo.is_none() {
            match eval(lo) {
                Ok((s, _)) => s_lo = Some(s),
                Err(_) => lo *= 0.5,
            }
        }
        if s_hi.is_none() {
            match eval(hi) {
                Ok((s, _)) => s_hi = Some(s),
                Err(_) => hi *= 0.5,
            }
        }
        if s_lo.is_some() && s_hi.is_some() {
            break;
        }
    }
    let bracketed = matches!((s_lo, s_hi), (Some(a), Some(b)) if a < 0.0 && b > 0.0);
    let mut eps = 0.0;
    let (mut s, mut h) = (s0, h0);
    for _ in 0..200 {
        if s.abs() < tol {
            return Ok(eps);
        }
        let newton = eps - s / h;
        let next = if bracketed {
            if s < 0.0 {
                lo = eps;
            } else {
                hi = eps;
            }
            if h > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            }
        } else if h > 0.0 && newton.abs() <= FLUCTUATION_BOUND {
            newton
        } else {
            return Err(Error::NoBracket);
        };
        eps = next;
        match eval(eps) {
            Ok((sn, hn)) => {
                s = sn;
                h = hn;
            }
            Err(e) if !bracketed => return Err(e),
            Err(_) => {
                // Shrink toward the last finite side.
                hi = if eps > 0.0 { eps } else { hi };
                lo = if eps < 0.0 { eps } else { lo };
                eps = 0.5 * (lo + hi);
                let (sn, hn) = eval(eps)?;
                s = sn;
                h = hn;
            }
        }
    }
    if s.abs() < tol {
        Ok(eps)
    } else {
        Err(Error::NoBracket)
    }
}

fn fluctuation_rows(data: &Dataset, plan: &CrossFitPlan, fits: &FoldFits) -> Result<Vec<FluctuationRow>> {
    let rows = plan.all_eval_rows();
    par::map_slice(&rows, |&i| {
        let f = fits.for_row(plan, i)?;
        let obs = data.obs(i);
        Ok(FluctuationRow {
            point: f.loss.point(&obs)?,
            theta: f.theta.evaluate(&obs)?,
            alpha: f.alpha.evaluate(&obs)?,
        })
    })
    .into_iter()
    .collect()
}

/// Targeted estimate: one pooled `ε_n` across folds, then the plug-in at
/// `θ*_j = θ_j + ε_n α_j`.
pub fn tmle_estimate(data: &Dataset, plan: &CrossFitPlan, fits: &FoldFits, level: f64) -> Result<EstimateReport> {
    let rows = fluctuation_rows(data, plan, fits)?;
    let eps = solve_fluctuation(&rows)?;
    let targeted = FoldFits {
        folds: fits
            .folds
            .iter()
            .map(|f| -> Result<FoldFit> {
                Ok(FoldFit {
                    theta: combine(&f.theta, eps, &f.alpha)?,
                    ..f.clone()
                })
            })
            .collect::<Result<_>>()?,
        functional: fits.functional.clone(),
    };
    let terms = evaluate_rows(data, plan, &targeted)?;
    let m: Vec<f64> = terms.iter().map(|t| t.m).collect();
    let scores: Vec<f64> = terms.iter().map(|t| t.score).collect();
    let psi = mean(&m);
    let mut diag = base_diagnostics(plan, Some(fits));
    diag.plug_in = psi;
    diag.fluctuation_epsilon = Some(eps);
    diag.post_targeting_score = Some(mean(&scores));
    let influence = terms.iter().map(|t| t.m - psi - t.score).collect();
    report("tmle", psi, influence, level, diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SieveRule {
    /// `k = max(k_θ, k_α)`.
    Undersmooth,
    /// `k = k_θ`.
    CvPlugin,
}

/// Inputs of the sieve estimators.
#[derive(Debug, Clone)]
pub struct SieveSpec {
    pub eta: EtaSource,
    pub theta_loss: LossKind,
    pub functional: FunctionalSpec,
    pub sieve: SieveConfig,
    pub k_max: usize,
    pub cv_folds: usize,
    pub fit: FitConfig,
}

/// Plug-in sieve M-estimator with cross-validated dimension.
///
/// Nuisances are cross-fitted by `plan`; the sieve fits use every
/// evaluation row of `plan`. The `α` used for the variance is refit on the
/// final `H_k` at the final `θ`.
pub fn autosieve_estimate(data: &Dataset, plan: &CrossFitPlan, spec: &SieveSpec, rule: SieveRule, level: f64) -> Result<EstimateReport> {
    if spec.k_max == 0 {
        return Err(Error::InvalidConfig("k_max must be >= 1".into()));
    }
    let cf = CrossFitSpec {
        eta: spec.eta.clone(),
        theta_loss: spec.theta_loss.clone(),
        theta_space: Arc::new(FunctionSpace::constant(spec.functional.d1())),
        theta: ThetaSource::Fit,
        functional: spec.functional.clone(),
        alpha_space: Arc::new(FunctionSpace::constant(spec.functional.d1())),
        alpha: AlphaSource::Known(FittedFunction::zero(spec.functional.d1())),
        fit: spec.fit,
    };
    let losses = fold_losses(data, plan, &cf)?;
    let points = dense_points(row_points(data, plan, &losses)?);
    let rows = plan.all_eval_rows();
    let cv_plan = make_folds_on(data.n(), &rows, spec.cv_folds, plan.seed().wrapping_add(1))?;

    let k_theta = cross_validate_points(&points, &spec.sieve, spec.k_max, data, &cv_plan, &spec.fit)?.k_selected;
    let pick = |i: usize| -> Result<&LossSpec> {
        let s = plan.fold_for(i).ok_or_else(|| Error::InvalidConfig(format!("row {i} has no fold")))?;
        Ok(&losses[s])
    };

    let space_theta = Arc::new(nested_sieve(&spec.sieve, k_theta)?);
    let design_theta = Design::new(&space_theta, data)?;
    let theta_cv = fit_points(&points, &design_theta, &rows, space_theta, &spec.fit)?.function;

    let k_alpha = match rule {
        SieveRule::CvPlugin => None,
        SieveRule::Undersmooth => {
            let inputs = riesz_inputs(data, &rows, |i| Ok((pick(i)?, &theta_cv)), &spec.functional)?;
            let risks = par::map_range(spec.k_max, |ki| -> Option<f64> {
                let space = Arc::new(nested_sieve(&spec.sieve, ki + 1).ok()?);
                let design = Design::new(&space, data).ok()?;
                let mut total = 0.0;
                for s in 0..cv_plan.folds() {
                    let sys = assemble_rows(&inputs, &space, &design, data, &cv_plan.train_rows(s)).ok()?;
                    let fit = fit_riesz(&sys, 0.0, space.clone()).ok()?;
                    let held_rows = cv_plan.eval_rows(s);
                    let held = assemble_rows(&inputs, &space, &design, data, &held_rows).ok()?;
                    total += held.risk(&fit.coefficients) * held_rows.len() as f64;
                }
                Some(total / rows.len() as f64)
            });
            Some(crate::fit::select_k(&risks)?)
        }
    };
    let k = k_alpha.map_or(k_theta, |ka| ka.max(k_theta));

    let space = Arc::new(nested_sieve(&spec.sieve, k)?);
    let design = Design::new(&space, data)?;
    let plain = FitConfig { ridge: 0.0, ..spec.fit };
    let theta = fit_points(&points, &design, &rows, space.clone(), &plain)?.function;
    let inputs = riesz_inputs(data, &rows, |i| Ok((pick(i)?, &theta)), &spec.functional)?;
    let sys = assemble_rows(&inputs, &space, &design, data, &rows)?;
    let alpha = fit_riesz(&sys, 0.0, space)?.function;

    let terms: Vec<RowTerms> = par::map_slice(&rows, |&i| row_terms(data, i, pick(i)?, &theta, &alpha, &spec.functional))
        .into_iter()
        .collect::<Result<_>>()?;
    let m: Vec<f64> = terms.iter().map(|t| t.m).collect();
    let psi = mean(&m);
    let mut diag = base_diagnostics(plan, None);
    diag.plug_in = psi;
    diag.correction = Some(mean(&terms.iter().map(|t| t.score).collect::<Vec<_>>()));
    diag.k_theta = Some(k_theta);
    diag.k_alpha = k_alpha;
    diag.k = Some(k);
    let influence = terms.iter().map(|t| t.m - psi - t.score).collect();
    let name = match rule {
        SieveRule::Undersmooth => "autosieve",
        SieveRule::CvPlugin => "cv_plugin",
    };
    report(name, psi, influence, level, diag)
}

/// Points of the `θ`-loss for every row with nuisances from `fits`.
pub fn bound_points(data: &Dataset, plan: &CrossFitPlan, fits: &FoldFits) -> Result<Vec<Option<PointLoss>>> {
    let losses: Vec<LossSpec> = fits.folds.iter().map(|f| f.loss.clone()).collect();
    row_points(data, plan, &losses)
}

/// Convenience for a single known `(loss, θ, α)` evaluated in-sample.
pub fn known_fits(loss: LossSpec, theta: FittedFunction, alpha: FittedFunction, functional: FunctionalSpec) -> FoldFits {
    FoldFits {
        folds: vec![FoldFit {
            loss,
            theta,
            alpha,
            riesz_ridge: None,
        }],
        functional,
    }
}

/// Binds `loss` on every row (no cross-fitting).
pub fn points_in_sample(loss: &LossSpec, data: &Dataset) -> Result<Vec<PointLoss>> {
    bind_points(loss, data)
}
