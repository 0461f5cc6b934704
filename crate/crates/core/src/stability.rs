//! Numerical audits of the model's stability guarantees.
//!
//! Everything here runs in `f64`: the checks compare quantities against
//! thresholds near machine precision and are not on any training path.
//!
//! Inequality audits report a relative violation `(lhs - rhs) / rhs`, which
//! stays meaningful when both sides are large.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::Result;
use crate::kernel::{chol_with_jitter, kernel_matrix, KernelConfig, TimeGrid};
use crate::likelihood::{dense_covariance, log_ml_naive, ModelHyper, ObservationGrid};
use crate::network::{sample_prior, NetworkParams, PriorConfig, StructuralMatrices};
use crate::rng::{self, open_uniform, TAG_AUDIT};
use crate::scalar::{sigmoid, to_f64, Real};
use crate::variational::TemperaturePair;

/// Interval exponent used when testing the sandwich condition.
pub const SANDWICH_GAMMA: f64 = 0.5;

/// How arcs are drawn for the nonsingularity audit: a binary Concrete
/// adjacency with location `exp(log_alpha)` and temperature `lambda`
/// (`lambda = 0` is the exact Bernoulli limit) times a Gaussian weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArcSampling {
    pub log_alpha: f64,
    pub lambda: f64,
    pub weight_mean: f64,
    pub weight_var: f64,
}

impl ArcSampling {
    /// The default prior for `n` nodes.
    pub fn default_for(n: usize) -> Self {
        let prior = PriorConfig::<f64>::default_for(n);
        Self {
            log_alpha: prior.log_alpha(),
            lambda: TemperaturePair::<f64>::default_for(n).lambda_prior,
            weight_mean: 0.0,
            weight_var: prior.sigma_w_sq,
        }
    }

    fn sample(&self, n: usize, r: &mut impl Rng) -> DMatrix<f64> {
        let sd = self.weight_var.sqrt();
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let u = open_uniform(r);
                let logit = self.log_alpha + u.ln() - (1.0 - u).ln();
                let a = if self.lambda > 0.0 {
                    sigmoid(logit / self.lambda)
                } else if logit > 0.0 {
                    1.0
                } else {
                    0.0
                };
                b[(i, j)] = a * (self.weight_mean + sd * r.sample::<f64, _>(StandardNormal));
            }
        }
        b
    }
}

/// `I - B` is treated as singular when the LU factorisation fails its pivot
/// test or `|det(I - B)|` is below `1e-12` times the Hadamard bound.
pub fn is_singular(coupling: &DMatrix<f64>) -> bool {
    let n = coupling.nrows();
    let m = DMatrix::identity(n, n) - coupling;
    let scale: f64 = m.row_iter().map(|r| r.norm()).product();
    let det = m.clone().lu().determinant();
    StructuralMatrices::from_coupling(coupling.clone()).is_err() || !(det.abs() >= 1e-12 * scale)
}

/// Number of sampled couplings for which `I - B` is singular.
pub fn check_nonsingularity(n: usize, model: &ArcSampling, trials: usize, seed: u64) -> usize {
    (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, &[TAG_AUDIT, 1, n as u64, k as u64]);
            is_singular(&model.sample(n, &mut r)) as usize
        })
        .sum()
}

/// Row (input) and column (output) aggregates of a spike-and-Gaussian arc
/// model with means `mu`, standard deviations `sigma` and probabilities `p`.
/// `u`, `s` and `e` have length `2N`: inputs first, then outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelMStats {
    pub mu_plus_in: Vec<f64>,
    pub mu_plus_out: Vec<f64>,
    pub sigma_plus_in: Vec<f64>,
    pub sigma_plus_out: Vec<f64>,
    pub ptilde_mu_in: Vec<f64>,
    pub ptilde_mu_out: Vec<f64>,
    pub ptilde_sigma_in: Vec<f64>,
    pub ptilde_sigma_out: Vec<f64>,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub e: Vec<f64>,
}

/// `φ(p) = 2 √(p (1 - p))`.
pub fn matsushita_entropy(p: f64) -> f64 {
    2.0 * (p * (1.0 - p)).max(0.0).sqrt()
}

fn weighted_share(weights: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut total, mut hit) = (0.0, 0.0);
    for (w, p) in weights {
        total += w;
        hit += w * p;
    }
    (total, if total > 0.0 { hit / total } else { 0.0 })
}

pub fn model_m_stats(mu: &DMatrix<f64>, sigma: &DMatrix<f64>, p: &DMatrix<f64>) -> ModelMStats {
    let n = mu.nrows();
    let nf = n as f64;
    let mu2 = mu.map(|v| v * v);
    let s2 = sigma.map(|v| v * v);
    let row = |m: &DMatrix<f64>, i: usize| weighted_share((0..n).map(|j| (m[(i, j)], p[(i, j)])));
    let col = |m: &DMatrix<f64>, j: usize| weighted_share((0..n).map(|i| (m[(i, j)], p[(i, j)])));
    let (mu_plus_in, ptilde_mu_in): (Vec<_>, Vec<_>) = (0..n).map(|i| row(&mu2, i)).unzip();
    let (mu_plus_out, ptilde_mu_out): (Vec<_>, Vec<_>) = (0..n).map(|j| col(&mu2, j)).unzip();
    let (sigma_plus_in, ptilde_sigma_in): (Vec<_>, Vec<_>) = (0..n).map(|i| row(&s2, i)).unzip();
    let (sigma_plus_out, ptilde_sigma_out): (Vec<_>, Vec<_>) = (0..n).map(|j| col(&s2, j)).unzip();

    let mut u = Vec::with_capacity(2 * n);
    let mut s = Vec::with_capacity(2 * n);
    let mut e = Vec::with_capacity(2 * n);
    for (mp, sp, pm, ps) in [
        (&mu_plus_in, &sigma_plus_in, &ptilde_mu_in, &ptilde_sigma_in),
        (&mu_plus_out, &sigma_plus_out, &ptilde_mu_out, &ptilde_sigma_out),
    ] {
        for k in 0..n {
            let mbar = mp[k] / nf;
            let sbar = sp[k] / nf;
            u.push(2.0 * pm[k] * mbar + 2.0 * ps[k] * sbar);
            s.push(mbar + sbar);
            e.push(matsushita_entropy(pm[k]) * mbar + sbar);
        }
    }
    ModelMStats {
        mu_plus_in,
        mu_plus_out,
        sigma_plus_in,
        sigma_plus_out,
        ptilde_mu_in,
        ptilde_mu_out,
        ptilde_sigma_in,
        ptilde_sigma_out,
        u,
        s,
        e,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichBounds {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
}

fn to_f64_setup<T: Real>(grid: &TimeGrid<T>, hyper: &ModelHyper<T>) -> Result<(TimeGrid<f64>, ModelHyper<f64>)> {
    let g = TimeGrid::new(grid.times().iter().map(|&t| to_f64(t)).collect())?;
    let h = ModelHyper {
        kernel: KernelConfig::new(to_f64(hyper.kernel.lengthscale), to_f64(hyper.kernel.signal_variance))?,
        sigma_y_sq: to_f64(hyper.sigma_y_sq),
        sigma_f_sq: to_f64(hyper.sigma_f_sq),
    };
    Ok((g, h))
}

impl SandwichBounds {
    /// `λ_lo = min|λ(K_t)| / 2 + σ_y²`, `λ_hi = 2 max|λ(K_t)| + σ_f² + σ_y²`.
    pub fn new(grid: &TimeGrid<f64>, hyper: &ModelHyper<f64>) -> Self {
        let eig = SymmetricEigen::new(kernel_matrix(grid, &hyper.kernel)).eigenvalues;
        let lo = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        let hi = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Self {
            lambda_lo: lo / 2.0 + hyper.sigma_y_sq,
            lambda_hi: 2.0 * hi + hyper.sigma_f_sq + hyper.sigma_y_sq,
        }
    }
}

/// Whether `max U` falls in `[max S / N^γ, 1 / (100 N²)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichCondition {
    pub gamma: f64,
    pub max_u: f64,
    pub max_s: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    pub condition_met: bool,
    pub bounds: SandwichBounds,
}

pub fn sandwich_condition<T: Real>(
    mu: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    p: &DMatrix<f64>,
    grid: &TimeGrid<T>,
    hyper: &ModelHyper<T>,
) -> Result<SandwichCondition> {
    let (grid, hyper) = to_f64_setup(grid, hyper)?;
    let n = mu.nrows() as f64;
    let stats = model_m_stats(mu, sigma, p);
    let max_u = stats.u.iter().fold(0.0f64, |a, &b| a.max(b));
    let max_s = stats.s.iter().fold(0.0f64, |a, &b| a.max(b));
    let lower_limit = max_s / n.powf(SANDWICH_GAMMA);
    let upper_limit = 1.0 / (100.0 * n * n);
    Ok(SandwichCondition {
        gamma: SANDWICH_GAMMA,
        max_u,
        max_s,
        lower_limit,
        upper_limit,
        condition_met: max_u >= lower_limit && max_u <= upper_limit,
        bounds: SandwichBounds::new(&grid, &hyper),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub condition: SandwichCondition,
    pub trials: usize,
    /// Trials whose spectrum left `[λ_lo, λ_hi]`.
    pub violations: usize,
    pub violation_rate: f64,
    /// Trials where `-log p(y) - (n/2) log 2π` fell outside the envelope,
    /// with `y` drawn from the sampled model.
    pub envelope_violations: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

fn params_from_coupling(b: &DMatrix<f64>) -> Result<NetworkParams<f64>> {
    let n = b.nrows();
    let adjacency = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
    NetworkParams::new(adjacency, b.clone())
}

/// Samples `A_ij ~ Bernoulli(p_ij)`, `W_ij ~ N(mu_ij, sigma_ij²)` and checks
/// the spectrum of the resulting `Σ_y` against the sandwich bounds.
pub fn check_sandwich(
    grid: &TimeGrid<f64>,
    hyper: &ModelHyper<f64>,
    mu: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    p: &DMatrix<f64>,
    trials: usize,
    seed: u64,
) -> Result<SandwichReport> {
    let condition = sandwich_condition(mu, sigma, p, grid, hyper)?;
    let b = condition.bounds;
    let n = mu.nrows();
    let outcomes: Vec<Result<(bool, bool, f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, &[TAG_AUDIT, 2, k as u64]);
            let mut coupling = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && open_uniform(&mut r) < p[(i, j)] {
                        coupling[(i, j)] = mu[(i, j)] + sigma[(i, j)] * r.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            let s = match StructuralMatrices::from_coupling(coupling) {
                Ok(s) => s,
                Err(_) => return Ok((true, true, f64::NAN, f64::NAN)),
            };
            let cov = dense_covariance(grid, &s, hyper);
            let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
            let lo = eig.min();
            let hi = eig.max();
            let outside = lo < b.lambda_lo * (1.0 - 1e-12) || hi > b.lambda_hi * (1.0 + 1e-12);

            let (l, _) = chol_with_jitter(&cov)?;
            let z = DVector::from_fn(cov.nrows(), |_, _| r.sample::<f64, _>(StandardNormal));
            let y = &l * z;
            let values = DMatrix::from_column_slice(grid.len(), n, y.as_slice());
            let obs = ObservationGrid::new(values, grid.clone())?;
            let params = params_from_coupling(&s.coupling)?;
            let nll = -log_ml_naive(&obs, &params, hyper)?;
            let dim = cov.nrows() as f64;
            let (env_lo, env_hi) = likelihood_envelope(y.norm_squared(), cov.nrows(), &b);
            let centred = nll - 0.5 * dim * (2.0 * std::f64::consts::PI).ln();
            let tol = 1e-9 * (1.0 + centred.abs());
            let env_out = centred < env_lo - tol || centred > env_hi + tol;
            Ok((outside, env_out, lo, hi))
        })
        .collect();
    let mut violations = 0;
    let mut envelope_violations = 0;
    let mut min_eigenvalue = f64::INFINITY;
    let mut max_eigenvalue = f64::NEG_INFINITY;
    for o in outcomes {
        let (outside, env_out, lo, hi) = o?;
        violations += outside as usize;
        envelope_violations += env_out as usize;
        min_eigenvalue = min_eigenvalue.min(lo);
        max_eigenvalue = max_eigenvalue.max(hi);
    }
    Ok(SandwichReport {
        condition,
        trials,
        violations,
        violation_rate: violations as f64 / trials.max(1) as f64,
        envelope_violations,
        min_eigenvalue,
        max_eigenvalue,
    })
}

/// Envelope on `-log p(y | A, W) - (n/2) log 2π` implied by
/// `λ(Σ_y) ⊂ [λ_lo, λ_hi]`.
pub fn likelihood_envelope(y_norm_sq: f64, n: usize, bounds: &SandwichBounds) -> (f64, f64) {
    let h = 0.5 * n as f64;
    (
        h * bounds.lambda_lo.ln() + y_norm_sq / (2.0 * bounds.lambda_hi),
        h * bounds.lambda_hi.ln() + y_norm_sq / (2.0 * bounds.lambda_lo),
    )
}

/// `g(z) = (N/2) log z + z ‖y‖² + (n/2) log 2π` at `λ_lo` and `λ_hi`, in the
/// form stated alongside the sandwich result. Reported for comparison only.
pub fn printed_envelope(y_norm_sq: f64, n_nodes: usize, n: usize, bounds: &SandwichBounds) -> (f64, f64) {
    let g = |z: f64| 0.5 * n_nodes as f64 * z.ln() + z * y_norm_sq + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    (g(bounds.lambda_lo), g(bounds.lambda_hi))
}

/// `E[exp(λ (W - E W))]` for `W = A·N(μ, σ²)`, `A ~ Bernoulli(p)`.
pub fn mgf_closed_form(lambda: f64, mu: f64, sigma: f64, p: f64) -> f64 {
    (1.0 - p) * (-p * mu * lambda).exp() + p * (mu * (1.0 - p) * lambda + 0.5 * sigma * sigma * lambda * lambda).exp()
}

/// `β² = φ(p) μ² + σ²` with `φ` the Matsushita entropy.
pub fn subgaussian_beta_sq(mu: f64, sigma: f64, p: f64) -> f64 {
    matsushita_entropy(p) * mu * mu + sigma * sigma
}

/// Largest relative excess of the MGF over `exp(β² λ² / 2)` on `lambdas`.
pub fn subgaussian_bound_check(mu: f64, sigma: f64, p: f64, lambdas: &[f64]) -> f64 {
    let b2 = subgaussian_beta_sq(mu, sigma, p);
    lambdas.iter().fold(f64::NEG_INFINITY, |acc, &l| {
        let lhs = mgf_closed_form(l, mu, sigma, p).ln();
        let rhs = 0.5 * b2 * l * l;
        // Compared in log space; exp(lhs - rhs) - 1 is the relative excess.
        acc.max((lhs - rhs).exp_m1())
    })
}

/// Largest relative excess of `p(x - 1) + 1` over
/// `x^p exp(√(p(1-p)) log² x)` on the grid.
pub fn matsushita_inequality_check(ps: &[f64], xs: &[f64]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for &p in ps {
        let phi = (p * (1.0 - p)).max(0.0).sqrt();
        for &x in xs {
            let lx = x.ln();
            let lhs = p * (x - 1.0) + 1.0;
            let log_rhs = p * lx + phi * lx * lx;
            worst = worst.max((lhs.ln() - log_rhs).exp_m1());
        }
    }
    worst
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `(E|W|, bound)` for `W = A·N(μ, σ²)`, `A ~ Bernoulli(p)`, where
/// `bound = p (|μ| + σ² / (γ (σ + |μ|)))` and `γ = √(π/2)`.
pub fn folded_gaussian_bound_check(mu: f64, sigma: f64, p: f64) -> (f64, f64) {
    let gamma = (std::f64::consts::PI / 2.0).sqrt();
    let exact = if sigma > 0.0 {
        let r = mu / sigma;
        p * (sigma / gamma * (-0.5 * r * r).exp() + mu * (1.0 - 2.0 * std_normal_cdf(-r)))
    } else {
        p * mu.abs()
    };
    let denom = sigma + mu.abs();
    let bound = if denom > 0.0 { p * (mu.abs() + sigma * sigma / (gamma * denom)) } else { 0.0 };
    (exact, bound)
}

/// Settings for [`run_audits`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditConfig {
    pub seed: u64,
    pub nonsingularity_trials: usize,
    pub nonsingularity_sizes: Vec<usize>,
    pub finiteness_trials: usize,
    pub sandwich_nodes: usize,
    pub sandwich_times: usize,
    pub sandwich_trials: usize,
    /// `max U` as a multiple of `1 / (100 N²)`.
    pub sandwich_u_ratio: f64,
    pub sandwich_max_violation_rate: f64,
    pub inequality_tolerance: f64,
    pub folded_points: usize,
    pub hyper: ModelHyper<f64>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            nonsingularity_trials: 1000,
            nonsingularity_sizes: vec![5, 10, 20],
            finiteness_trials: 200,
            sandwich_nodes: 20,
            sandwich_times: 5,
            sandwich_trials: 200,
            sandwich_u_ratio: 0.5,
            sandwich_max_violation_rate: 0.05,
            inequality_tolerance: 1e-12,
            folded_points: 1000,
            hyper: ModelHyper {
                kernel: KernelConfig { lengthscale: 1.0, signal_variance: 1.0 },
                sigma_y_sq: 0.1,
                sigma_f_sq: 0.1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Largest observed violation statistic, where one applies.
    pub max_violation: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeComparison {
    pub y_norm_sq: f64,
    pub n: usize,
    pub observed: f64,
    pub derived: (f64, f64),
    pub printed: (f64, f64),
    pub derived_contains_observed: bool,
    pub printed_contains_observed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub checks: Vec<CheckResult>,
    pub sandwich: SandwichReport,
    pub envelope: EnvelopeComparison,
    pub passed: bool,
}

fn count_check(name: String, trials: usize, violations: usize, threshold: usize) -> CheckResult {
    CheckResult {
        name,
        trials,
        violations,
        max_violation: None,
        threshold: threshold as f64,
        passed: violations <= threshold,
    }
}

fn grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect()
}

/// Uniform spike-and-Gaussian parameters scaled so that `max U` equals
/// `ratio / (100 N²)`.
pub fn sandwich_parameters(n: usize, ratio: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng::stream(seed, &[TAG_AUDIT, 3]);
    let off = |v: f64| DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { v });
    let p = off(0.5);
    let signs = DMatrix::from_fn(n, n, |_, _| if r.random::<bool>() { 1.0 } else { -1.0 });
    let mu = off(1.0).component_mul(&signs);
    let sigma = off(0.5);
    let stats = model_m_stats(&mu, &sigma, &p);
    let max_u = stats.u.iter().fold(0.0f64, |a, &b| a.max(b));
    let target = ratio / (100.0 * (n * n) as f64);
    let c = (target / max_u).sqrt();
    (mu * c, sigma * c, p)
}

/// Runs every audit and reports pass/fail against the configured thresholds.
pub fn run_audits(cfg: &AuditConfig) -> Result<AuditReport> {
    let mut checks = Vec::new();
    for &n in &cfg.nonsingularity_sizes {
        let model = ArcSampling::default_for(n);
        let v = check_nonsingularity(n, &model, cfg.nonsingularity_trials, cfg.seed);
        checks.push(count_check(format!("nonsingularity_n{n}"), cfg.nonsingularity_trials, v, 0));
        let bernoulli = ArcSampling { lambda: 0.0, log_alpha: 0.0, ..model };
        let v = check_nonsingularity(n, &bernoulli, cfg.nonsingularity_trials, cfg.seed ^ 1);
        checks.push(count_check(format!("nonsingularity_bernoulli_n{n}"), cfg.nonsingularity_trials, v, 0));
    }

    let finite_failures: usize = (0..cfg.finiteness_trials)
        .into_par_iter()
        .map(|k| {
            let n = 2 + k % 9;
            let tl = 2 + k % 7;
            let prior = PriorConfig::default_for(n);
            let hyper = ModelHyper { sigma_y_sq: 1e-8, ..cfg.hyper };
            let params = match sample_prior(n, &prior, rng::derive_seed(cfg.seed, &[TAG_AUDIT, 4, k as u64])) {
                Ok(p) => p,
                Err(_) => return 1,
            };
            let mut r = rng::stream(cfg.seed, &[TAG_AUDIT, 5, k as u64]);
            let y = DMatrix::from_fn(tl, n, |_, _| r.sample::<f64, _>(StandardNormal));
            let obs = match TimeGrid::regular(tl).and_then(|g| ObservationGrid::new(y, g)) {
                Ok(o) => o,
                Err(_) => return 1,
            };
            match log_ml_naive(&obs, &params, &hyper) {
                Ok(v) if v.is_finite() => 0,
                _ => 1,
            }
        })
        .sum();
    checks.push(count_check("finite_likelihood".into(), cfg.finiteness_trials, finite_failures, 0));

    let tol = cfg.inequality_tolerance;
    let lambdas = grid(-10.0, 10.0, 1000);
    let sg = subgaussian_bound_check(2.0, 0.3, 0.5, &lambdas);
    checks.push(CheckResult {
        name: "subgaussian_mgf".into(),
        trials: lambdas.len(),
        violations: lambdas.iter().filter(|&&l| subgaussian_bound_check(2.0, 0.3, 0.5, &[l]) > tol).count(),
        max_violation: Some(sg),
        threshold: tol,
        passed: sg <= tol,
    });

    let ps: Vec<f64> = (1..=200).map(|k| k as f64 / 201.0).chain([0.0, 1.0]).collect();
    let xs: Vec<f64> = grid(-5.0, 5.0, 200).into_iter().map(f64::exp).collect();
    let mat = matsushita_inequality_check(&ps, &xs);
    checks.push(CheckResult {
        name: "matsushita_inequality".into(),
        trials: ps.len() * xs.len(),
        violations: usize::from(mat > tol),
        max_violation: Some(mat),
        threshold: tol,
        passed: mat <= tol,
    });

    let mut r = rng::stream(cfg.seed, &[TAG_AUDIT, 6]);
    let mut worst = f64::NEG_INFINITY;
    let mut folded_violations = 0;
    for _ in 0..cfg.folded_points {
        let mu = r.random_range(-5.0..5.0);
        let sigma = r.random_range(0.01..3.0);
        let p = r.random_range(0.0..=1.0);
        let (exact, bound) = folded_gaussian_bound_check(mu, sigma, p);
        let excess = exact - bound;
        worst = worst.max(excess);
        if excess > tol * (1.0 + bound.abs()) {
            folded_violations += 1;
        }
    }
    checks.push(CheckResult {
        name: "folded_gaussian_bound".into(),
        trials: cfg.folded_points,
        violations: folded_violations,
        max_violation: Some(worst),
        threshold: 0.0,
        passed: folded_violations == 0,
    });

    let n = cfg.sandwich_nodes;
    let time_grid = TimeGrid::regular(cfg.sandwich_times)?;
    let (mu, sigma, p) = sandwich_parameters(n, cfg.sandwich_u_ratio, cfg.seed);
    let sandwich = check_sandwich(&time_grid, &cfg.hyper, &mu, &sigma, &p, cfg.sandwich_trials, cfg.seed)?;
    // An unmet condition makes no claim, so it cannot fail.
    let sandwich_passed =
        !sandwich.condition.condition_met || sandwich.violation_rate <= cfg.sandwich_max_violation_rate;
    checks.push(CheckResult {
        name: "eigenvalue_sandwich".into(),
        trials: sandwich.trials,
        violations: sandwich.violations,
        max_violation: Some(sandwich.violation_rate),
        threshold: cfg.sandwich_max_violation_rate,
        passed: sandwich_passed,
    });
    let env_rate = sandwich.envelope_violations as f64 / sandwich.trials.max(1) as f64;
    checks.push(CheckResult {
        name: "likelihood_envelope".into(),
        trials: sandwich.trials,
        violations: sandwich.envelope_violations,
        max_violation: Some(env_rate),
        threshold: cfg.sandwich_max_violation_rate,
        passed: !sandwich.condition.condition_met || env_rate <= cfg.sandwich_max_violation_rate,
    });

    let envelope = envelope_example(&time_grid, &cfg.hyper, &mu, &sigma, &p, cfg.seed)?;
    let passed = checks.iter().all(|c| c.passed);
    Ok(AuditReport { checks, sandwich, envelope, passed })
}

/// One sampled instance with both envelope forms next to the observed value.
fn envelope_example(
    grid: &TimeGrid<f64>,
    hyper: &ModelHyper<f64>,
    mu: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    p: &DMatrix<f64>,
    seed: u64,
) -> Result<EnvelopeComparison> {
    let n = mu.nrows();
    let mut r = rng::stream(seed, &[TAG_AUDIT, 7]);
    let adjacency = DMatrix::from_fn(n, n, |i, j| if i != j && open_uniform(&mut r) < p[(i, j)] { 1.0 } else { 0.0 });
    let weights = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            mu[(i, j)] + sigma[(i, j)] * r.sample::<f64, _>(StandardNormal)
        }
    });
    let params = NetworkParams::new(adjacency, weights)?;
    let s = StructuralMatrices::from_params(&params)?;
    let cov = dense_covariance(grid, &s, hyper);
    let (l, _) = chol_with_jitter(&cov)?;
    let y = &l * DVector::from_fn(cov.nrows(), |_, _| r.sample::<f64, _>(StandardNormal));
    let obs = ObservationGrid::new(DMatrix::from_column_slice(grid.len(), n, y.as_slice()), grid.clone())?;
    let dim = cov.nrows();
    let observed = -log_ml_naive(&obs, &params, hyper)? - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
    let bounds = SandwichBounds::new(grid, hyper);
    let ysq = y.norm_squared();
    let derived = likelihood_envelope(ysq, dim, &bounds);
    let printed = printed_envelope(ysq, n, dim, &bounds);
    let full = observed + 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(EnvelopeComparison {
        y_norm_sq: ysq,
        n: dim,
        observed,
        derived,
        printed,
        derived_contains_observed: derived.0 <= observed && observed <= derived.1,
        printed_contains_observed: printed.0 <= full && full <= printed.1,
    })
}
