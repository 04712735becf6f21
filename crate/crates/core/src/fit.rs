//! Empirical risk minimization over a basis: closed form for quadratic
//! losses, damped Newton otherwise, and cross-validated sieve selection.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{nested_sieve, FittedFunction, FunctionSpace, SieveConfig};
use crate::data::{CrossFitPlan, Dataset};
use crate::error::{Error, Result};
use crate::loss::{LossSpec, PointLoss};
use crate::par;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// One linear solve for quadratic losses, Newton otherwise.
    #[default]
    Auto,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub ridge: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub max_backtracks: usize,
    pub solver: Solver,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            ridge: 0.0,
            max_iters: 100,
            grad_tol: 1e-10,
            max_backtracks: 50,
            solver: Solver::Auto,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0) || !(self.grad_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidConfig(format!("invalid fit settings {self:?}")));
        }
        Ok(())
    }
}

/// Gradient norm below which a stalled line search is accepted as
/// converged (round-off floor of the risk).
const STALL_TOL: f64 = 1e-7;

/// Result of a basis fit.
#[derive(Debug, Clone)]
pub struct Fit {
    pub function: FittedFunction,
    pub coefficients: Vec<f64>,
    /// Max-norm of the penalized empirical risk gradient at the solution.
    pub grad_norm: f64,
    pub iterations: usize,
    /// Mean loss over the training rows, without the penalty.
    pub risk: f64,
}

/// Basis values of every data row, flattened across blocks.
#[derive(Debug, Clone)]
pub struct Design {
    p: usize,
    d1: usize,
    block_of: Vec<usize>,
    x: Vec<f64>,
}

impl Design {
    pub fn new(space: &FunctionSpace, data: &Dataset) -> Result<Self> {
        let p = space.total_dim();
        let rows = par::map_range(data.n(), |i| space.design(&data.obs(i)));
        let mut x = Vec::with_capacity(data.n() * p);
        for r in rows {
            x.extend(r?);
        }
        Ok(Design {
            p,
            d1: space.d1(),
            block_of: space.block_of_index(),
            x,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// `θ(z_i)` for flattened coefficients `c`.
    pub fn theta(&self, i: usize, c: &[f64]) -> Vec<f64> {
        let mut th = vec![0.0; self.d1];
        for (j, x) in self.row(i).iter().enumerate() {
            th[self.block_of[j]] += c[j] * x;
        }
        th
    }

    /// Block index of every flattened coefficient.
    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }
}

/// Sum over rows of `ℓ`, `Bᵀ g` and `Bᵀ H B` (upper triangle filled
/// symmetric on return).
pub(crate) struct Assembly {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Assembly {
    fn zeros(p: usize) -> Self {
        Assembly {
            value: 0.0,
            grad: vec![0.0; p],
            hess: vec![0.0; p * p],
        }
    }

    fn merge(&mut self, other: Assembly) {
        self.value += other.value;
        for (a, b) in self.grad.iter_mut().zip(other.grad) {
            *a += b;
        }
        for (a, b) in self.hess.iter_mut().zip(other.hess) {
            *a += b;
        }
    }
}

/// Adds `x_j x_k H[b(j), b(k)]` into the upper triangle of `hess`.
pub(crate) fn add_quadratic_form(hess: &mut [f64], x: &[f64], block_of: &[usize], h: &[f64], d1: usize) {
    let p = x.len();
    let nz: Vec<usize> = (0..p).filter(|&j| x[j] != 0.0).collect();
    for (a, &j) in nz.iter().enumerate() {
        let bj = block_of[j];
        let xj = x[j];
        for &k in &nz[a..] {
            hess[j * p + k] += xj * x[k] * h[bj * d1 + block_of[k]];
        }
    }
}

pub(crate) fn symmetrize(hess: &mut [f64], p: usize) {
    for j in 0..p {
        for k in 0..j {
            hess[j * p + k] = hess[k * p + j];
        }
    }
}

fn assemble(points: &[PointLoss], design: &Design, rows: &[usize], c: &[f64]) -> Result<Assembly> {
    let p = design.p;
    let d1 = design.d1;
    let mut acc = par::chunked_fold(
        rows,
        || Assembly::zeros(p),
        |acc, &i| {
            let x = design.row(i);
            let d = points[i].derivs(&design.theta(i, c))?;
            acc.value += d.value;
            for (j, xj) in x.iter().enumerate() {
                if *xj != 0.0 {
                    acc.grad[j] += xj * d.grad[design.block_of[j]];
                }
            }
            add_quadratic_form(&mut acc.hess, x, &design.block_of, &d.hess, d1);
            Ok(())
        },
        Assembly::merge,
    )?;
    symmetrize(&mut acc.hess, p);
    Ok(acc)
}

fn total_value(points: &[PointLoss], design: &Design, rows: &[usize], c: &[f64]) -> Result<f64> {
    par::ordered_sum(rows, |&i| points[i].value(&design.theta(i, c)))
}

/// Solves `A x = b` by Cholesky, retrying once with `A + δI`,
/// `δ = 1e-8 trace(A)/p`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let p = a.nrows();
    let delta = jitter(a);
    let shifted = a + DMatrix::identity(p, p) * delta;
    shifted
        .cholesky()
        .map(|ch| ch.solve(b))
        .ok_or(Error::SingularSystem)
}

fn jitter(a: &DMatrix<f64>) -> f64 {
    let p = a.nrows().max(1) as f64;
    let tr = a.trace();
    if tr > 0.0 {
        1e-8 * tr / p
    } else {
        1e-8
    }
}

/// Newton direction: solves with the jittered system first, then with
/// growing shifts when the risk Hessian is indefinite.
fn newton_direction(a: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    match solve_spd(a, g) {
        Ok(x) => Ok(x),
        Err(_) => {
            let p = a.nrows();
            let scale = a.diagonal().abs().max().max(1e-8);
            let mut delta = 1e-6 * scale;
            for _ in 0..12 {
                let shifted = a + DMatrix::identity(p, p) * delta;
                if let Some(ch) = shifted.cholesky() {
                    return Ok(ch.solve(g));
                }
                delta *= 10.0;
            }
            Err(Error::SingularSystem)
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Penalized mean risk, gradient and Hessian at `c`.
fn penalized(points: &[PointLoss], design: &Design, rows: &[usize], c: &[f64], ridge: f64) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let m = rows.len() as f64;
    let p = design.p;
    let acc = assemble(points, design, rows, c)?;
    let norm2: f64 = c.iter().map(|x| x * x).sum();
    let value = acc.value / m + 0.5 * ridge * norm2;
    let grad = DVector::from_iterator(p, acc.grad.iter().zip(c).map(|(g, ci)| g / m + ridge * ci));
    let mut hess = DMatrix::from_row_slice(p, p, &acc.hess) / m;
    for j in 0..p {
        hess[(j, j)] += ridge;
    }
    Ok((value, grad, hess))
}

/// Minimizes `(1/|rows|) Σ ℓ_i(B_i c) + (λ/2)‖c‖²` where `points` and
/// `design` are indexed by data row.
pub fn fit_points(
    points: &[PointLoss],
    design: &Design,
    rows: &[usize],
    space: Arc<FunctionSpace>,
    cfg: &FitConfig,
) -> Result<Fit> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = design.p;
    let quadratic = cfg.solver == Solver::Auto && rows.iter().all(|&i| points[i].is_quadratic());
    let mut c = vec![0.0; p];
    let mut iterations = 0;
    let (value, grad) = if quadratic {
        let (_, g, h) = penalized(points, design, rows, &c, cfg.ridge)?;
        let step = solve_spd(&h, &g)?;
        c = (-step).as_slice().to_vec();
        iterations = 1;
        let (v, g, _) = penalized(points, design, rows, &c, cfg.ridge)?;
        (v, g)
    } else {
        loop {
            let (f, g, h) = penalized(points, design, rows, &c, cfg.ridge)?;
            let gn = max_abs(g.as_slice());
            if gn <= cfg.grad_tol {
                break (f, g);
            }
            if iterations >= cfg.max_iters {
                return Err(Error::NewtonDivergence {
                    iterations,
                    grad_norm: gn,
                });
            }
            let dir = -newton_direction(&h, &g)?;
            let slope = g.dot(&dir);
            let slack = 1e-12 * (1.0 + f.abs());
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_backtracks {
                let trial: Vec<f64> = c.iter().zip(dir.iter()).map(|(ci, di)| ci + t * di).collect();
                let norm2: f64 = trial.iter().map(|x| x * x).sum();
                let ft = total_value(points, design, rows, &trial)
                    .map(|v| v / rows.len() as f64 + 0.5 * cfg.ridge * norm2)
                    .unwrap_or(f64::INFINITY);
                if ft.is_finite() && ft <= f + 1e-4 * t * slope + slack {
                    accepted = Some(trial);
                    break;
                }
                t *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some(trial) => c = trial,
                None if gn < STALL_TOL => break (f, g),
                None => {
                    return Err(Error::NewtonDivergence {
                        iterations,
                        grad_norm: gn,
                    })
                }
            }
        }
    };
    let norm2: f64 = c.iter().map(|x| x * x).sum();
    Ok(Fit {
        function: FittedFunction::from_flat(space, &c)?,
        grad_norm: max_abs(grad.as_slice()),
        iterations,
        risk: value - 0.5 * cfg.ridge * norm2,
        coefficients: c,
    })
}

/// Binds `loss` at every data row.
pub fn bind_points(loss: &LossSpec, data: &Dataset) -> Result<Vec<PointLoss>> {
    par::map_range(data.n(), |i| loss.point(&data.obs(i)))
        .into_iter()
        .collect()
}

/// Fits `loss` over `space` on the given rows.
pub fn fit_erm(
    loss: &LossSpec,
    space: Arc<FunctionSpace>,
    data: &Dataset,
    rows: &[usize],
    cfg: &FitConfig,
) -> Result<Fit> {
    let points = bind_points(loss, data)?;
    let design = Design::new(&space, data)?;
    fit_points(&points, &design, rows, space, cfg)
}

/// Mean loss of coefficients `c` over `rows`.
pub fn empirical_risk(points: &[PointLoss], design: &Design, rows: &[usize], c: &[f64]) -> Result<f64> {
    Ok(total_value(points, design, rows, c)? / rows.len() as f64)
}

/// Per-k cross-validated risks and the selected dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub k_selected: usize,
    /// `None` marks a dimension whose fit failed on some fold.
    pub risks: Vec<Option<f64>>,
}

/// Smallest `k` (1-based) attaining the minimum eligible risk.
pub fn select_k(risks: &[Option<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in risks.iter().enumerate() {
        if let Some(r) = *r {
            if r.is_finite() && best.is_none_or(|(_, b)| r < b) {
                best = Some((i + 1, r));
            }
        }
    }
    best.map(|(k, _)| k).ok_or(Error::NoEligibleDimension)
}

/// Out-of-fold risk of the sieve fits for `k = 1..=k_max`, with
/// per-row losses `points` (indexed by data row).
pub fn cross_validate_points(
    points: &[PointLoss],
    sieve: &SieveConfig,
    k_max: usize,
    data: &Dataset,
    plan: &CrossFitPlan,
    cfg: &FitConfig,
) -> Result<CvResult> {
    if k_max == 0 {
        return Err(Error::InvalidConfig("k_max must be >= 1".into()));
    }
    let folds = plan.folds();
    let eval: Vec<Vec<usize>> = (0..folds).map(|s| plan.eval_rows(s)).collect();
    let train: Vec<Vec<usize>> = (0..folds).map(|s| plan.train_rows(s)).collect();
    let total: usize = eval.iter().map(Vec::len).sum();
    let risks = par::map_range(k_max, |ki| -> Result<Option<f64>> {
        let space = Arc::new(nested_sieve(sieve, ki + 1)?);
        let design = Design::new(&space, data)?;
        let mut sum = 0.0;
        for s in 0..folds {
            let fit = match fit_points(points, &design, &train[s], space.clone(), cfg) {
                Ok(f) => f,
                Err(_) => return Ok(None),
            };
            match total_value(points, &design, &eval[s], &fit.coefficients) {
                Ok(v) => sum += v,
                Err(_) => return Ok(None),
            }
        }
        Ok(Some(sum / total as f64))
    });
    let risks = risks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CvResult {
        k_selected: select_k(&risks)?,
        risks,
    })
}

pub fn cross_validate(
    loss: &LossSpec,
    sieve: &SieveConfig,
    k_max: usize,
    data: &Dataset,
    plan: &CrossFitPlan,
    cfg: &FitConfig,
) -> Result<CvResult> {
    let points = bind_points(loss, data)?;
    cross_validate_points(&points, sieve, k_max, data, plan, cfg)
}
