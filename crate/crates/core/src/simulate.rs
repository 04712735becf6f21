//! Synthetic data-generating processes, their true targets, and the Monte
//! Carlo runner.
//!
//! Randomness comes from ChaCha8 (a counter-based stream cipher generator)
//! seeded with `seed_from_u64`. Replicate `r` of a spec with seed `s` uses
//! seed `s + r`. Rows are drawn one after another from a single stream, so
//! the first `n` rows of a larger draw equal the draw of size `n`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Roles};
use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::loss::bg_hazard;
use crate::par;
use crate::problem::{run_pipeline, EstimatorKind, ProblemConfig};
use crate::stats::{expit, halton3};

/// Quasi-Monte Carlo nodes behind the beta-geometric truth.
pub const QMC_NODES: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    BetaGeometric,
    CateRlearner,
}

fn default_censor() -> u32 {
    6
}
fn default_t0() -> u32 {
    12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Adds the `n^{-1/2}` fluctuation to the outcome mean (cate only).
    #[serde(default)]
    pub local_perturbation: bool,
    /// Administrative censoring time (beta-geometric only).
    #[serde(default = "default_censor")]
    pub censor: u32,
    /// Survival horizon of the target (beta-geometric only).
    #[serde(default = "default_t0")]
    pub t0: u32,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, seed: u64) -> Self {
        DgpSpec {
            kind,
            n,
            seed,
            local_perturbation: false,
            censor: default_censor(),
            t0: default_t0(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.censor == 0 || self.t0 == 0 {
            return Err(Error::InvalidConfig("n, censor and t0 must be >= 1".into()));
        }
        if self.local_perturbation && self.kind != DgpKind::CateRlearner {
            return Err(Error::InvalidConfig("local_perturbation applies to cate_rlearner only".into()));
        }
        Ok(())
    }

    fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn covariates(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ]
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn columns(names: &[&str], cols: Vec<Vec<f64>>) -> Vec<(String, Vec<f64>)> {
    names.iter().map(|s| s.to_string()).zip(cols).collect()
}

fn xs_roles() -> Vec<String> {
    vec!["x1".into(), "x2".into(), "x3".into()]
}

/// `(π₀, μ₀(1, x), μ₀(0, x), τ₀)` of the cate process. With `perturb` set to
/// `1/√n` the arm means carry the local fluctuation term; `τ₀` never does.
fn cate_truth(x: [f64; 3], perturb: Option<f64>) -> (f64, f64, f64, f64) {
    let pi = expit((2.0 * x[0]).sin() + 2.0 * x[1] + x[2].abs());
    let base = (2.0 * x[0]).sin() + x[2].abs();
    let tau = 0.3 + 2.0 * x[2] * x[2] + (2.0 * x[0]).sin();
    let (mu1, mu0) = match perturb {
        None => (base + tau, base),
        Some(scale) => {
            let pa = expit(x[1]);
            let omega = pa * (1.0 - pa);
            (base + tau + scale * (1.0 - pa) / omega, base + scale * (0.0 - pa) / omega)
        }
    };
    (pi, mu1, mu0, tau)
}

/// Cate process with `rows` rows; the fluctuation scale uses `spec.n`.
///
/// Oracle columns: `pi0 = P(A = 1 | X)`, `m0 = E[Y | X]` and
/// `tau0 = E[Y | A = 1, X] - E[Y | A = 0, X]`.
pub fn gen_cate_rows(spec: &DgpSpec, rows: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let perturb = spec.local_perturbation.then(|| 1.0 / (spec.n as f64).sqrt());
    let mut cols = (0..8).map(|_| Vec::with_capacity(rows)).collect::<Vec<Vec<f64>>>();
    for _ in 0..rows {
        let x = covariates(&mut rng);
        let (pi, mu1, mu0, _) = cate_truth(x, perturb);
        let a = bernoulli(&mut rng, pi);
        let sigma = 0.5 + (x[0] + x[2]) / 8.0;
        let z: f64 = rng.sample(StandardNormal);
        let y = if a == 1.0 { mu1 } else { mu0 } + sigma * z;
        for (c, v) in cols.iter_mut().zip([x[0], x[1], x[2], a, y, pi, pi * mu1 + (1.0 - pi) * mu0, mu1 - mu0]) {
            c.push(v);
        }
    }
    Dataset::new(
        columns(&["x1", "x2", "x3", "a", "y", "pi0", "m0", "tau0"], cols),
        Roles {
            covariates: xs_roles(),
            treatment: Some("a".into()),
            outcome: Some("y".into()),
            ..Default::default()
        },
    )
}

pub fn gen_cate(spec: &DgpSpec) -> Result<Dataset> {
    require(spec, DgpKind::CateRlearner)?;
    gen_cate_rows(spec, spec.n)
}

/// Log shape parameters `(a₀, b₀)` and propensity of the beta-geometric
/// process.
fn bg_truth(x: [f64; 3], a: f64) -> (f64, f64) {
    let s = 3f64.sqrt() * (x[0] + x[1] + x[2]);
    (-0.1 + s + 0.25 * a, s + 0.1)
}

fn bg_propensity(x: [f64; 3]) -> f64 {
    expit(2.0 * 3f64.sqrt() * (x[0] + x[1] + x[2]))
}

/// Beta-geometric process with `rows` rows, times drawn by sequential
/// hazard draws. Oracle columns: `pi0`, `a0`, `b0`.
pub fn gen_beta_geometric_rows(spec: &DgpSpec, rows: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cols = (0..9).map(|_| Vec::with_capacity(rows)).collect::<Vec<Vec<f64>>>();
    for _ in 0..rows {
        let x = covariates(&mut rng);
        let pi = bg_propensity(x);
        let a = bernoulli(&mut rng, pi);
        let (a0, b0) = bg_truth(x, a);
        let mut time = spec.censor;
        let mut event = 0.0;
        for t in 1..=spec.censor {
            if rng.random::<f64>() < bg_hazard(a0, b0, t) {
                time = t;
                event = 1.0;
                break;
            }
        }
        for (c, v) in cols.iter_mut().zip([x[0], x[1], x[2], a, time as f64, event, pi, a0, b0]) {
            c.push(v);
        }
    }
    Dataset::new(
        columns(&["x1", "x2", "x3", "a", "time", "event", "pi0", "a0", "b0"], cols),
        Roles {
            covariates: xs_roles(),
            treatment: Some("a".into()),
            time: Some("time".into()),
            event: Some("event".into()),
            ..Default::default()
        },
    )
}

pub fn gen_beta_geometric(spec: &DgpSpec) -> Result<Dataset> {
    require(spec, DgpKind::BetaGeometric)?;
    gen_beta_geometric_rows(spec, spec.n)
}

fn require(spec: &DgpSpec, kind: DgpKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::InvalidConfig(format!("expected a {kind:?} spec, got {:?}", spec.kind)));
    }
    Ok(())
}

/// Draws `rows` rows of the process described by `spec`.
pub fn generate(spec: &DgpSpec, rows: usize) -> Result<Dataset> {
    match spec.kind {
        DgpKind::CateRlearner => gen_cate_rows(spec, rows),
        DgpKind::BetaGeometric => gen_beta_geometric_rows(spec, rows),
    }
}

/// `P(T > t0 | X = x, A = a)` under the beta-geometric process.
pub fn bg_conditional_survival(x: [f64; 3], a: f64, t0: u32) -> f64 {
    let (a0, b0) = bg_truth(x, a);
    (1..=t0).map(|s| 1.0 - bg_hazard(a0, b0, s)).product()
}

fn bg_mean_survival(t0: u32) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<u32, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.lock().expect("cache poisoned").get(&t0) {
        return *v;
    }
    let values = par::map_range(QMC_NODES as usize, |i| {
        let u = halton3(i as u64 + 1);
        let x = [2.0 * u[0] - 1.0, 2.0 * u[1] - 1.0, 2.0 * u[2] - 1.0];
        let pi = bg_propensity(x);
        pi * bg_conditional_survival(x, 1.0, t0) + (1.0 - pi) * bg_conditional_survival(x, 0.0, t0)
    });
    let v = par::ordered_sum::<_, (), _>(&values, |v| Ok(*v)).expect("infallible") / QMC_NODES as f64;
    cache.lock().expect("cache poisoned").insert(t0, v);
    v
}

/// Expectation of `1/ω(X₂)` over `X₂ ~ U(-1, 1)`, `ω = expit(1 - expit)`.
fn mean_inverse_omega() -> f64 {
    2.0 + 2.0 * 1f64.sinh()
}

/// The estimand of each process: the ATE of the cate process (which
/// moves by `E[1/ω]/√n` under the local perturbation) or the mean survival
/// past `t0` of the beta-geometric process.
pub fn true_psi(spec: &DgpSpec) -> Result<f64> {
    spec.validate()?;
    Ok(match spec.kind {
        DgpKind::CateRlearner => {
            let base = 0.3 + 2.0 / 3.0;
            if spec.local_perturbation {
                base + mean_inverse_omega() / (spec.n as f64).sqrt()
            } else {
                base
            }
        }
        DgpKind::BetaGeometric => bg_mean_survival(spec.t0),
    })
}

/// One estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub outcome: std::result::Result<ReplicateEstimate, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub psi_hat: f64,
    pub se: f64,
    pub ci: [f64; 2],
}

impl From<&EstimateReport> for ReplicateEstimate {
    fn from(r: &EstimateReport) -> Self {
        ReplicateEstimate {
            psi_hat: r.psi_hat,
            se: r.se,
            ci: r.ci,
        }
    }
}

/// Monte Carlo design: every spec of `grid` is replicated `replicates`
/// times and each estimator is run on each replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub grid: Vec<DgpSpec>,
    pub estimators: Vec<EstimatorKind>,
    pub replicates: usize,
    pub problem: ProblemConfig,
}

impl MonteCarloConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("replicates must be >= 1".into()));
        }
        if self.grid.is_empty() || self.estimators.is_empty() {
            return Err(Error::InvalidConfig("empty grid or estimator list".into()));
        }
        for g in &self.grid {
            g.validate()?;
        }
        self.problem.validate()
    }
}

/// Runs every replicate; results are ordered by (grid entry, replicate,
/// estimator) regardless of scheduling.
pub fn run_replicates(cfg: &MonteCarloConfig) -> Result<Vec<ReplicateResult>> {
    cfg.validate()?;
    let r = cfg.replicates;
    let jobs = cfg.grid.len() * r;
    let per_job = par::map_range(jobs, |job| -> Result<Vec<ReplicateResult>> {
        let (g, rep) = (job / r, job % r);
        let spec = cfg.grid[g];
        let seed = spec.seed.wrapping_add(rep as u64);
        let rows = if cfg.problem.split { 2 * spec.n } else { spec.n };
        let data = generate(&spec.with_seed(seed), rows)?;
        let problem = ProblemConfig {
            seed,
            ..cfg.problem.clone()
        };
        Ok(cfg
            .estimators
            .iter()
            .map(|&e| ReplicateResult {
                estimator: e,
                n: spec.n,
                replicate: rep,
                seed,
                outcome: run_pipeline(&data, &problem, e)
                    .map(|rep| ReplicateEstimate::from(&rep))
                    .map_err(|err| err.to_string()),
            })
            .collect())
    });
    let mut out = Vec::with_capacity(jobs * cfg.estimators.len());
    for job in per_job {
        out.extend(job?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: EstimatorKind,
    pub n: usize,
    /// Replicates attempted.
    pub replicates: usize,
    /// `|mean ψ̂ - ψ₀|` over successful replicates.
    pub bias: f64,
    /// Monte Carlo standard deviation of `ψ̂`.
    pub se: f64,
    pub coverage: f64,
    pub failures: usize,
    pub true_psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

/// Aggregates replicate results per (grid entry, estimator), in grid then
/// estimator order.
pub fn summarize(cfg: &MonteCarloConfig, results: &[ReplicateResult]) -> Result<MetricsTable> {
    let mut rows = Vec::new();
    for spec in &cfg.grid {
        let psi0 = true_psi(spec)?;
        for &e in &cfg.estimators {
            let mine: Vec<&ReplicateResult> = results.iter().filter(|r| r.estimator == e && r.n == spec.n).collect();
            let ok: Vec<ReplicateEstimate> = mine.iter().filter_map(|r| r.outcome.as_ref().ok().copied()).collect();
            let m = ok.len() as f64;
            let mean = ok.iter().map(|o| o.psi_hat).sum::<f64>() / m;
            let var = if ok.len() > 1 {
                ok.iter().map(|o| (o.psi_hat - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            let covered = ok.iter().filter(|o| o.ci[0] <= psi0 && psi0 <= o.ci[1]).count();
            rows.push(MetricsRow {
                estimator: e,
                n: spec.n,
                replicates: mine.len(),
                bias: (mean - psi0).abs(),
                se: var.sqrt(),
                coverage: covered as f64 / m,
                failures: mine.len() - ok.len(),
                true_psi: psi0,
            });
        }
    }
    Ok(MetricsTable { rows })
}

/// Replicates every grid entry and aggregates bias, Monte Carlo SE and
/// coverage against [`true_psi`].
pub fn monte_carlo(cfg: &MonteCarloConfig) -> Result<MetricsTable> {
    let results = run_replicates(cfg)?;
    summarize(cfg, &results)
}

impl MetricsTable {
    pub const HEADER: &'static str = "estimator,n,R,bias,se,coverage,failures,true_psi";

    /// CSV with `preamble` lines written first as `# ` comments.
    pub fn write_csv<W: Write>(&self, mut w: W, preamble: &str) -> Result<()> {
        let mut s = String::new();
        for line in preamble.lines() {
            if line.is_empty() {
                s.push_str("#\n");
            } else {
                let _ = writeln!(s, "# {line}");
            }
        }
        let _ = writeln!(s, "{}", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.estimator, r.n, r.replicates, r.bias, r.se, r.coverage, r.failures, r.true_psi
            );
        }
        w.write_all(s.as_bytes()).map_err(|e| Error::Io {
            path: "<metrics>".into(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ProblemKind;

    #[test]
    fn cate_oracles() {
        let (pi, mu1, mu0, tau) = cate_truth([0.0; 3], None);
        assert_eq!(pi, 0.5);
        assert_eq!((mu1, mu0, tau), (0.3, 0.0, 0.3));
        let spec = DgpSpec::new(DgpKind::CateRlearner, 1000, 1);
        assert!((true_psi(&spec).unwrap() - 0.966_666_666_666_666_6).abs() < 1e-12);
        let d = gen_cate(&spec).unwrap();
        assert_eq!(d.n(), 1000);
        let x1 = d.column("x1").unwrap();
        let x3 = d.column("x3").unwrap();
        let tau0 = d.column("tau0").unwrap();
        for i in 0..d.n() {
            let expect = 0.3 + 2.0 * x3[i] * x3[i] + (2.0 * x1[i]).sin();
            assert!((tau0[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn perturbation_shifts_the_ate_by_the_mean_inverse_weight() {
        // E[1/ω] by midpoint quadrature over U(-1, 1).
        let m = 200_000;
        let q: f64 = (0..m)
            .map(|i| {
                let x = -1.0 + (2.0 * i as f64 + 1.0) / m as f64;
                let p = expit(x);
                1.0 / (p * (1.0 - p))
            })
            .sum::<f64>()
            / m as f64;
        assert!((q - mean_inverse_omega()).abs() < 1e-8);
        let mut spec = DgpSpec::new(DgpKind::CateRlearner, 400, 1);
        spec.local_perturbation = true;
        assert!((true_psi(&spec).unwrap() - (0.3 + 2.0 / 3.0 + q / 20.0)).abs() < 1e-8);
        let (_, mu1, mu0, _) = cate_truth([0.2, -0.4, 0.7], Some(0.05));
        let (_, b1, b0, _) = cate_truth([0.2, -0.4, 0.7], None);
        let p = expit(-0.4);
        assert!(((mu1 - mu0) - (b1 - b0) - 0.05 / (p * (1.0 - p))).abs() < 1e-12);
    }

    #[test]
    fn cate_sample_mean_near_truth() {
        let spec = DgpSpec::new(DgpKind::CateRlearner, 20_000, 9);
        let d = gen_cate(&spec).unwrap();
        let tau = d.column("tau0").unwrap();
        let mean = tau.iter().sum::<f64>() / tau.len() as f64;
        // sd(τ₀(X)) < 1.5.
        assert!((mean - true_psi(&spec).unwrap()).abs() < 4.0 * 1.5 / (20_000f64).sqrt());
    }

    #[test]
    fn beta_geometric_rows() {
        let spec = DgpSpec::new(DgpKind::BetaGeometric, 500, 3);
        let d = gen_beta_geometric(&spec).unwrap();
        let t = d.column("time").unwrap();
        let e = d.column("event").unwrap();
        for i in 0..d.n() {
            assert!(t[i] >= 1.0 && t[i] <= 6.0);
            assert!(e[i] == 0.0 || e[i] == 1.0);
            if e[i] == 0.0 {
                assert_eq!(t[i], 6.0);
            }
        }
        assert_eq!(bg_propensity([0.0; 3]), 0.5);
    }

    #[test]
    fn beta_geometric_propensity_matches_quadrature() {
        let n = 100_000;
        let d = gen_beta_geometric(&DgpSpec::new(DgpKind::BetaGeometric, n, 17)).unwrap();
        let a = d.column("a").unwrap();
        let share = a.iter().sum::<f64>() / n as f64;
        // The propensity is symmetric about Σx = 0, so E[π₀(X)] = 1/2; check
        // by product midpoint quadrature on the cube.
        let m = 60;
        let h = 2.0 / m as f64;
        let mut q = 0.0;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let x = [-1.0 + h * (i as f64 + 0.5), -1.0 + h * (j as f64 + 0.5), -1.0 + h * (k as f64 + 0.5)];
                    q += bg_propensity(x);
                }
            }
        }
        q /= (m * m * m) as f64;
        assert!((q - 0.5).abs() < 1e-12);
        assert!((share - q).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn beta_geometric_truth() {
        // a₀ = -0.1, b₀ = 0.1 at the origin with A = 0.
        let direct: f64 = (1..=12).map(|s| 1.0 - bg_hazard(-0.1, 0.1, s)).product();
        assert_eq!(bg_conditional_survival([0.0; 3], 0.0, 12), direct);
        let exact = crate::loss::bg_log_derivatives(-0.1, 0.1, 12).unwrap().log_surv.exp();
        assert!((direct - exact).abs() < 1e-12);
        let spec = DgpSpec::new(DgpKind::BetaGeometric, 10, 0);
        let v = true_psi(&spec).unwrap();
        assert_eq!(v, true_psi(&spec).unwrap());
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn rows_are_prefix_stable() {
        let spec = DgpSpec::new(DgpKind::BetaGeometric, 50, 4);
        let small = generate(&spec, 50).unwrap();
        let big = generate(&spec, 120).unwrap();
        for c in ["x1", "time", "event"] {
            assert_eq!(small.column(c).unwrap(), &big.column(c).unwrap()[..50]);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = DgpSpec::new(DgpKind::BetaGeometric, 10, 0);
        s.local_perturbation = true;
        assert!(s.validate().is_err());
        assert!(DgpSpec::new(DgpKind::CateRlearner, 0, 0).validate().is_err());
    }

    fn mean_cfg(replicates: usize) -> MonteCarloConfig {
        let mut problem = ProblemConfig::new(ProblemKind::MeanOutcome);
        problem.k = 1;
        MonteCarloConfig {
            grid: vec![DgpSpec::new(DgpKind::CateRlearner, 200, 7)],
            estimators: vec![EstimatorKind::Onestep],
            replicates,
            problem,
        }
    }

    #[test]
    fn single_replicate_bias_is_the_error() {
        let cfg = mean_cfg(1);
        let res = run_replicates(&cfg).unwrap();
        let t = summarize(&cfg, &res).unwrap();
        let psi = res[0].outcome.as_ref().unwrap().psi_hat;
        assert_eq!(t.rows[0].bias, (psi - t.rows[0].true_psi).abs());
        assert_eq!(t.rows[0].se, 0.0);
        assert!(mean_cfg(0).validate().is_err());
    }

    #[test]
    fn exact_estimator_has_full_coverage() {
        let cfg = mean_cfg(3);
        let psi0 = true_psi(&cfg.grid[0]).unwrap();
        let fake: Vec<ReplicateResult> = (0..3)
            .map(|r| ReplicateResult {
                estimator: EstimatorKind::Onestep,
                n: 200,
                replicate: r,
                seed: r as u64,
                outcome: Ok(ReplicateEstimate {
                    psi_hat: psi0,
                    se: 1.0,
                    ci: [psi0 - 1.96, psi0 + 1.96],
                }),
            })
            .collect();
        let t = summarize(&cfg, &fake).unwrap();
        assert_eq!(t.rows[0].coverage, 1.0);
        assert!(t.rows[0].bias < 1e-15);
    }

    #[test]
    fn failures_are_counted() {
        let cfg = mean_cfg(2);
        let mut res = run_replicates(&cfg).unwrap();
        res[1].outcome = Err("boom".into());
        let t = summarize(&cfg, &res).unwrap();
        assert_eq!(t.rows[0].failures, 1);
        assert_eq!(t.rows[0].replicates, 2);
    }

    #[test]
    fn csv_layout() {
        let cfg = mean_cfg(2);
        let t = monte_carlo(&cfg).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, "replicates = 2").unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# replicates = 2");
        assert_eq!(lines[1], MetricsTable::HEADER);
        assert!(lines[2].starts_with("onestep,200,2,"));
    }
}
