//! Factorised variational posterior over the network and its Monte Carlo ELBO.
//!
//! Each off-diagonal arc carries `q(W_ij) = N(m_ij, s_ij²)` and a binary
//! Concrete `q(A_ij)` with location `α_ij` and temperature `λ_post`. The
//! prior on `A_ij` is relaxed the same way, with location `p_a / (1 - p_a)`
//! and temperature `λ_prior`. KL terms for `A` are computed in logit space.
//!
//! Samples are reparameterised: `a = (log α + log u - log(1-u)) / λ`,
//! `A = sigmoid(a)`, `W = m + s·z`. The ELBO is therefore a deterministic
//! function of the parameters once the noise `(u, z)` is fixed, and
//! [`elbo_from_noise`] returns its exact gradient for that noise.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{kron_evaluate, ModelHyper, ObservationGrid, TimeSpectrum};
use crate::network::{PriorConfig, StructuralMatrices};
use crate::rng::{self, open_uniform, TAG_ELBO, TAG_INIT};
use crate::scalar::{lit, sigmoid, softplus, Real};

/// Posterior parameters. Diagonal entries are structural zeros and are
/// never read or updated.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState<T: Real> {
    pub m: DMatrix<T>,
    pub log_s: DMatrix<T>,
    pub log_alpha: DMatrix<T>,
}

impl<T: Real> VariationalState<T> {
    /// `m ~ N(0, 0.01²)`, `log s = ½ log(σ_w² / 10)`, `log α = 0`.
    pub fn init(n: usize, prior: &PriorConfig<T>, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[TAG_INIT]);
        let log_s0 = (prior.sigma_w_sq / lit(10.0)).ln() * lit(0.5);
        let mut m = DMatrix::zeros(n, n);
        let mut log_s = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m[(i, j)] = lit(0.01 * r.sample::<f64, _>(StandardNormal));
                    log_s[(i, j)] = log_s0;
                }
            }
        }
        Self { m, log_s, log_alpha: DMatrix::zeros(n, n) }
    }

    /// A posterior equal to the prior on every arc.
    pub fn at_prior(n: usize, prior: &PriorConfig<T>) -> Self {
        let off = |v: T| DMatrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { v });
        Self {
            m: DMatrix::zeros(n, n),
            log_s: off(prior.sigma_w_sq.ln() * lit(0.5)),
            log_alpha: off(prior.log_alpha()),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.m.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.m.nrows();
        if !self.m.is_square() || self.log_s.shape() != (n, n) || self.log_alpha.shape() != (n, n) {
            return Err(Error::DimensionMismatch("variational matrices must share one square shape".into()));
        }
        Ok(())
    }

    /// `p_ij = α_ij / (1 + α_ij)`, zero on the diagonal.
    pub fn edge_prob(&self) -> DMatrix<T> {
        let n = self.n_nodes();
        DMatrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { sigmoid(self.log_alpha[(i, j)]) })
    }

    pub fn edge_std(&self) -> DMatrix<T> {
        let n = self.n_nodes();
        DMatrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { self.log_s[(i, j)].exp() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePair<T> {
    pub lambda_prior: T,
    pub lambda_posterior: T,
}

impl<T: Real> TemperaturePair<T> {
    /// `(1.0, 0.15)` for up to 15 nodes, `(0.5, 2/3)` above.
    pub fn default_for(n: usize) -> Self {
        if n <= 15 {
            Self { lambda_prior: lit(1.0), lambda_posterior: lit(0.15) }
        } else {
            Self { lambda_prior: lit(0.5), lambda_posterior: lit(2.0 / 3.0) }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_prior > T::zero()) || !(self.lambda_posterior > T::zero()) {
            return Err(Error::InvalidConfig("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Reparameterisation noise for one Monte Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T: Real> {
    /// Uniforms for the adjacency, clamped to `[1e-12, 1 - 1e-12]`.
    pub u: DMatrix<T>,
    /// Standard normals for the weights.
    pub z: DMatrix<T>,
}

/// Noise for samples `samples` of the stream keyed by `seed`. Sample `k` is
/// the same regardless of the range it is requested in.
pub fn draw_noise<T: Real>(n: usize, seed: u64, samples: Range<u64>) -> Vec<NoiseDraw<T>> {
    samples
        .map(|k| {
            let mut r = rng::stream(seed, &[TAG_ELBO, k]);
            let mut u = DMatrix::from_element(n, n, lit(0.5));
            let mut z = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        u[(i, j)] = lit(open_uniform(&mut r));
                        z[(i, j)] = lit(r.sample::<f64, _>(StandardNormal));
                    }
                }
            }
            NoiseDraw { u, z }
        })
        .collect()
}

/// Returns the logit `a` and the relaxed sample `sigmoid(a)`.
#[inline]
pub fn sample_concrete_logit<T: Real>(log_alpha: T, lambda: T, u: T) -> (T, T) {
    let a = (log_alpha + u.ln() - (T::one() - u).ln()) / lambda;
    (a, sigmoid(a))
}

/// Log-density of the binary Concrete logit at `a`.
#[inline]
pub fn concrete_log_density<T: Real>(a: T, log_alpha: T, lambda: T) -> T {
    let x = -lambda * a + log_alpha;
    lambda.ln() + x - lit::<T>(2.0) * softplus(x)
}

/// `d/da` of [`concrete_log_density`].
#[inline]
fn concrete_log_density_da<T: Real>(a: T, log_alpha: T, lambda: T) -> T {
    let x = -lambda * a + log_alpha;
    lambda * (lit::<T>(2.0) * sigmoid(x) - T::one())
}

#[inline]
pub fn sample_weight<T: Real>(m: T, log_s: T, z: T) -> T {
    m + log_s.exp() * z
}

/// `KL(N(m, s²) || N(0, prior_var))`.
#[inline]
pub fn kl_gaussian<T: Real>(m: T, s: T, prior_var: T) -> T {
    let half = lit::<T>(0.5);
    half * (prior_var.ln() - lit::<T>(2.0) * s.ln()) + (s * s + m * m) / (lit::<T>(2.0) * prior_var) - half
}

/// Single-sample terms `log q(a) - log p(a)` with `a ~ q` driven by `us`.
pub fn kl_concrete_terms<T: Real>(
    log_alpha: T,
    lambda_post: T,
    prior_log_alpha: T,
    lambda_prior: T,
    us: &[T],
) -> Vec<T> {
    us.iter()
        .map(|&u| {
            let (a, _) = sample_concrete_logit(log_alpha, lambda_post, u);
            concrete_log_density(a, log_alpha, lambda_post) - concrete_log_density(a, prior_log_alpha, lambda_prior)
        })
        .collect()
}

/// Monte Carlo estimate of the relaxed `KL(q(A) || p(A))` for one arc.
pub fn kl_concrete_mc<T: Real>(
    log_alpha: T,
    lambda_post: T,
    prior_log_alpha: T,
    lambda_prior: T,
    us: &[T],
) -> T {
    let terms = kl_concrete_terms(log_alpha, lambda_post, prior_log_alpha, lambda_prior, us);
    terms.iter().fold(T::zero(), |a, &b| a + b) / lit(terms.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate<T> {
    pub elbo: T,
    /// Expected log-likelihood term.
    pub ell: T,
    /// Negative KL term; `elbo = ell + kl`.
    pub kl: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient<T: Real> {
    pub m: DMatrix<T>,
    pub log_s: DMatrix<T>,
    pub log_alpha: DMatrix<T>,
    pub log_lengthscale: T,
    pub log_sigma_y_sq: T,
    pub log_sigma_f_sq: T,
}

impl<T: Real> ElboGradient<T> {
    fn zeros(n: usize) -> Self {
        Self {
            m: DMatrix::zeros(n, n),
            log_s: DMatrix::zeros(n, n),
            log_alpha: DMatrix::zeros(n, n),
            log_lengthscale: T::zero(),
            log_sigma_y_sq: T::zero(),
            log_sigma_f_sq: T::zero(),
        }
    }

    fn add_scaled(&mut self, other: &Self, w: T) {
        self.m += &other.m * w;
        self.log_s += &other.log_s * w;
        self.log_alpha += &other.log_alpha * w;
        self.log_lengthscale += other.log_lengthscale * w;
        self.log_sigma_y_sq += other.log_sigma_y_sq * w;
        self.log_sigma_f_sq += other.log_sigma_f_sq * w;
    }
}

/// Everything the ELBO depends on besides the variational state and noise.
#[derive(Debug, Clone, Copy)]
pub struct ElboContext<'a, T: Real> {
    pub obs: &'a ObservationGrid<T>,
    pub hyper: &'a ModelHyper<T>,
    pub prior: &'a PriorConfig<T>,
    pub temps: &'a TemperaturePair<T>,
}

impl<T: Real> ElboContext<'_, T> {
    fn validate(&self, vs: &VariationalState<T>) -> Result<()> {
        self.hyper.validate()?;
        self.prior.validate()?;
        self.temps.validate()?;
        vs.validate()?;
        if vs.n_nodes() != self.obs.n_nodes() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} nodes, observations have {}",
                vs.n_nodes(),
                self.obs.n_nodes()
            )));
        }
        Ok(())
    }
}

struct SampleOutcome<T: Real> {
    ell: T,
    kl_adjacency: T,
    grad: Option<ElboGradient<T>>,
}

fn evaluate_sample<T: Real>(
    ctx: &ElboContext<'_, T>,
    time: &TimeSpectrum<T>,
    vs: &VariationalState<T>,
    noise: &NoiseDraw<T>,
    with_gradient: bool,
) -> Result<SampleOutcome<T>> {
    let n = vs.n_nodes();
    let lq = ctx.temps.lambda_posterior;
    let lp = ctx.temps.lambda_prior;
    let prior_la = ctx.prior.log_alpha();

    let mut logits = DMatrix::zeros(n, n);
    let mut adj = DMatrix::zeros(n, n);
    let mut w = DMatrix::zeros(n, n);
    let mut kl_adjacency = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let la = vs.log_alpha[(i, j)];
            let (a, relaxed) = sample_concrete_logit(la, lq, noise.u[(i, j)]);
            logits[(i, j)] = a;
            adj[(i, j)] = relaxed;
            w[(i, j)] = sample_weight(vs.m[(i, j)], vs.log_s[(i, j)], noise.z[(i, j)]);
            kl_adjacency += concrete_log_density(a, la, lq) - concrete_log_density(a, prior_la, lp);
        }
    }
    let s = StructuralMatrices::from_coupling(adj.component_mul(&w))?;
    let (terms, lgrad) = kron_evaluate(time, &s, ctx.hyper, with_gradient)?;

    let grad = lgrad.map(|lg| {
        let mut g = ElboGradient::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let gb = lg.coupling[(i, j)];
                let relaxed = adj[(i, j)];
                let la = vs.log_alpha[(i, j)];
                let a = logits[(i, j)];
                let gw = gb * relaxed;
                g.m[(i, j)] = gw;
                g.log_s[(i, j)] = gw * vs.log_s[(i, j)].exp() * noise.z[(i, j)];
                // d/d log α of the likelihood through A, minus the adjacency KL sample.
                let ga = gb * w[(i, j)] * relaxed * (T::one() - relaxed) / lq;
                let x = -lq * a + la;
                let dlogq = concrete_log_density_da(a, la, lq) / lq + (T::one() - lit::<T>(2.0) * sigmoid(x));
                let dlogp = concrete_log_density_da(a, prior_la, lp) / lq;
                g.log_alpha[(i, j)] = ga - (dlogq - dlogp);
            }
        }
        g.log_lengthscale = lg.log_lengthscale;
        g.log_sigma_y_sq = lg.log_sigma_y_sq;
        g.log_sigma_f_sq = lg.log_sigma_f_sq;
        g
    });
    Ok(SampleOutcome { ell: terms.log_ml, kl_adjacency, grad })
}

fn kl_weights<T: Real>(vs: &VariationalState<T>, prior: &PriorConfig<T>) -> T {
    let n = vs.n_nodes();
    let mut kl = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kl += kl_gaussian(vs.m[(i, j)], vs.log_s[(i, j)].exp(), prior.sigma_w_sq);
            }
        }
    }
    kl
}

/// ELBO (and optionally its gradient) for explicit noise draws.
///
/// Samples are evaluated in parallel on the current rayon pool and reduced
/// in sample order, so the result does not depend on the thread count.
pub fn elbo_from_noise<T: Real>(
    ctx: &ElboContext<'_, T>,
    vs: &VariationalState<T>,
    draws: &[NoiseDraw<T>],
    with_gradient: bool,
) -> Result<(ElboEstimate<T>, Option<ElboGradient<T>>)> {
    ctx.validate(vs)?;
    if draws.is_empty() {
        return Err(Error::InvalidConfig("at least one Monte Carlo sample is required".into()));
    }
    let time = TimeSpectrum::new(ctx.obs, &ctx.hyper.kernel, with_gradient)?;
    let outcomes: Vec<Result<SampleOutcome<T>>> = draws
        .par_iter()
        .map(|d| evaluate_sample(ctx, &time, vs, d, with_gradient))
        .collect();

    let n = vs.n_nodes();
    let inv = T::one() / lit(draws.len() as f64);
    let mut ell = T::zero();
    let mut kl_adj = T::zero();
    let mut grad = with_gradient.then(|| ElboGradient::zeros(n));
    for outcome in outcomes {
        let o = outcome?;
        ell += o.ell * inv;
        kl_adj += o.kl_adjacency * inv;
        if let (Some(acc), Some(g)) = (grad.as_mut(), o.grad.as_ref()) {
            acc.add_scaled(g, inv);
        }
    }
    let kl = -(kl_weights(vs, ctx.prior) + kl_adj);
    if let Some(g) = grad.as_mut() {
        let pv = ctx.prior.sigma_w_sq;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let s = vs.log_s[(i, j)].exp();
                g.m[(i, j)] -= vs.m[(i, j)] / pv;
                g.log_s[(i, j)] -= s * s / pv - T::one();
            }
        }
    }
    Ok((ElboEstimate { elbo: ell + kl, ell, kl }, grad))
}

pub fn elbo_estimate<T: Real>(
    ctx: &ElboContext<'_, T>,
    vs: &VariationalState<T>,
    n_samples: usize,
    seed: u64,
) -> Result<ElboEstimate<T>> {
    let draws = draw_noise(vs.n_nodes(), seed, 0..n_samples as u64);
    Ok(elbo_from_noise(ctx, vs, &draws, false)?.0)
}

pub fn elbo_gradient<T: Real>(
    ctx: &ElboContext<'_, T>,
    vs: &VariationalState<T>,
    n_samples: usize,
    seed: u64,
) -> Result<ElboGradient<T>> {
    let draws = draw_noise(vs.n_nodes(), seed, 0..n_samples as u64);
    Ok(elbo_from_noise(ctx, vs, &draws, true)?.1.expect("gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelConfig, TimeGrid};
    use approx::assert_relative_eq;

    fn uniforms(count: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[1]);
        (0..count).map(|_| open_uniform(&mut r)).collect()
    }

    fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    /// Composite Simpson rule over `[lo, hi]` with `intervals` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
        let h = (hi - lo) / intervals as f64;
        let mut acc = f(lo) + f(hi);
        for k in 1..intervals {
            acc += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn concrete_sample_symmetric_point() {
        assert_eq!(sample_concrete_logit(0.0, 0.7, 0.5), (0.0, 0.5));
    }

    #[test]
    fn concrete_low_temperature_matches_bernoulli() {
        let us = uniforms(100_000, 3);
        for (la, p) in [(0.0f64, 0.5), (3f64.ln(), 0.75)] {
            let frac = us.iter().filter(|&&u| sample_concrete_logit(la, 1e-3, u).1 > 0.5).count() as f64 / 1e5;
            assert!((frac - p).abs() <= 0.01, "log_alpha {la}: {frac}");
            let mean = us.iter().map(|&u| sample_concrete_logit(la, 0.01, u).1).sum::<f64>() / 1e5;
            assert!((mean - p).abs() <= 0.02, "mean {mean} vs {p}");
        }
    }

    #[test]
    fn concrete_density_values() {
        assert_relative_eq!(concrete_log_density(0.0, 0.0, 1.0), -2.0 * 2f64.ln(), epsilon = 1e-15);
        for a in [0.3, 1.0, 4.5] {
            assert_relative_eq!(concrete_log_density(a, 0.0, 0.6), concrete_log_density(-a, 0.0, 0.6), epsilon = 1e-14);
        }
    }

    #[test]
    fn concrete_density_normalises() {
        for alpha in [0.5f64, 1.0, 2.0] {
            for lambda in [0.15, 2.0 / 3.0, 1.0] {
                let half = 50.0 / lambda;
                let mass = simpson(|a| concrete_log_density(a, alpha.ln(), lambda).exp(), -half, half, 200_000);
                assert!((mass - 1.0).abs() <= 1e-4, "alpha {alpha} lambda {lambda}: {mass}");
            }
        }
    }

    #[test]
    fn concrete_density_derivative() {
        let h = 1e-6;
        for (a, la, l) in [(0.4, 0.3, 0.15), (-2.0, -1.0, 1.0), (7.0, 0.0, 0.5)] {
            let fd = (concrete_log_density(a + h, la, l) - concrete_log_density(a - h, la, l)) / (2.0 * h);
            assert_relative_eq!(concrete_log_density_da(a, la, l), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn weight_sampling() {
        assert_eq!(sample_weight(1.3, 0.2, 0.0), 1.3);
        assert_eq!(sample_weight(0.0, 0.0, 2.0), 2.0);
        let mut r = rng::stream(5, &[2]);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_weight(1.0, 0.5f64.ln(), r.sample::<f64, _>(StandardNormal)))
            .collect();
        let (mean, _) = mean_and_stderr(&xs);
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99_999.0).sqrt();
        assert!((mean - 1.0).abs() <= 0.01 && (sd - 0.5).abs() <= 0.01, "{mean} {sd}");
    }

    #[test]
    fn gaussian_kl_values() {
        assert_relative_eq!(kl_gaussian(0.0, 0.7, 0.49), 0.0, epsilon = 1e-15);
        assert_relative_eq!(kl_gaussian(1.0, 1.0, 1.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let mut r = rng::stream(8, &[3]);
        for _ in 0..3 {
            let m: f64 = r.random_range(-1.0..1.0);
            let s: f64 = r.random_range(0.2..1.5);
            let pv: f64 = r.random_range(0.3..2.0);
            let xs: Vec<f64> = (0..100_000)
                .map(|_| {
                    let w = m + s * r.sample::<f64, _>(StandardNormal);
                    let log_q = -0.5 * ((w - m) / s).powi(2) - s.ln();
                    let log_p = -0.5 * w * w / pv - 0.5 * pv.ln();
                    log_q - log_p
                })
                .collect();
            let (mean, se) = mean_and_stderr(&xs);
            assert!((mean - kl_gaussian(m, s, pv)).abs() <= 3.0 * se, "{mean} ± {se}");
        }
    }

    #[test]
    fn concrete_kl_estimates() {
        let us = uniforms(10_000, 9);
        let same = kl_concrete_terms(0.4, 0.5, 0.4, 0.5, &us);
        assert!(same.iter().all(|&v| v.abs() < 1e-12));
        let exact = kl_concrete_terms(0.0, 0.5, 0.0, 0.5, &us);
        assert!(exact.iter().all(|&v| v == 0.0));
        let pos = kl_concrete_terms(4f64.ln(), 2.0 / 3.0, 0.0, 2.0 / 3.0, &us);
        let (mean, se) = mean_and_stderr(&pos);
        assert!(mean > 3.0 * se, "{mean} ± {se}");
        assert_relative_eq!(kl_concrete_mc(4f64.ln(), 2.0 / 3.0, 0.0, 2.0 / 3.0, &us), mean, epsilon = 1e-12);
    }

    fn fixture(n: usize, tl: usize) -> (ObservationGrid<f64>, ModelHyper<f64>, PriorConfig<f64>, TemperaturePair<f64>) {
        let mut r = rng::stream(42, &[n as u64, tl as u64]);
        let y = DMatrix::from_fn(tl, n, |_, _| r.random_range(-1.5..1.5));
        let obs = ObservationGrid::new(y, TimeGrid::regular(tl).unwrap()).unwrap();
        let hyper = ModelHyper { kernel: KernelConfig::new(1.4, 1.0).unwrap(), sigma_y_sq: 0.3, sigma_f_sq: 0.2 };
        (obs, hyper, PriorConfig::default_for(n), TemperaturePair::default_for(n))
    }

    #[test]
    fn elbo_is_deterministic_given_seed() {
        let (obs, hyper, prior, temps) = fixture(3, 5);
        let ctx = ElboContext { obs: &obs, hyper: &hyper, prior: &prior, temps: &temps };
        let vs = VariationalState::init(3, &prior, 1);
        let a = elbo_estimate(&ctx, &vs, 1, 77).unwrap();
        let b = elbo_estimate(&ctx, &vs, 1, 77).unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(a.elbo, a.ell + a.kl);
    }

    #[test]
    fn elbo_at_prior_has_zero_kl() {
        let (obs, hyper, prior, _) = fixture(3, 5);
        let temps = TemperaturePair { lambda_prior: 0.5, lambda_posterior: 0.5 };
        let ctx = ElboContext { obs: &obs, hyper: &hyper, prior: &prior, temps: &temps };
        let vs = VariationalState::at_prior(3, &prior);
        let e = elbo_estimate(&ctx, &vs, 50, 3).unwrap();
        assert!(e.kl.abs() < 1e-12, "kl {}", e.kl);
        assert_relative_eq!(e.elbo, e.ell, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_gradient_is_exactly_zero() {
        let (obs, hyper, prior, temps) = fixture(3, 4);
        let ctx = ElboContext { obs: &obs, hyper: &hyper, prior: &prior, temps: &temps };
        let vs = VariationalState::init(3, &prior, 4);
        let g = elbo_gradient(&ctx, &vs, 2, 11).unwrap();
        for i in 0..3 {
            assert_eq!(g.m[(i, i)], 0.0);
            assert_eq!(g.log_s[(i, i)], 0.0);
            assert_eq!(g.log_alpha[(i, i)], 0.0);
        }
    }

    #[test]
    fn gradient_averages_over_half_batches() {
        let (obs, hyper, prior, temps) = fixture(3, 4);
        let ctx = ElboContext { obs: &obs, hyper: &hyper, prior: &prior, temps: &temps };
        let vs = VariationalState::init(3, &prior, 4);
        let all = draw_noise(3, 19, 0..4);
        let first = draw_noise(3, 19, 0..2);
        let second = draw_noise(3, 19, 2..4);
        assert_eq!(&all[2..], &second[..]);
        let g = elbo_from_noise(&ctx, &vs, &all, true).unwrap().1.unwrap();
        let g1 = elbo_from_noise(&ctx, &vs, &first, true).unwrap().1.unwrap();
        let g2 = elbo_from_noise(&ctx, &vs, &second, true).unwrap().1.unwrap();
        assert!((&g.m - (&g1.m + &g2.m) * 0.5).amax() <= 1e-12);
        assert!((&g.log_s - (&g1.log_s + &g2.log_s) * 0.5).amax() <= 1e-12);
        assert!((&g.log_alpha - (&g1.log_alpha + &g2.log_alpha) * 0.5).amax() <= 1e-12);
        assert!((g.log_lengthscale - 0.5 * (g1.log_lengthscale + g2.log_lengthscale)).abs() <= 1e-12);
    }

    #[test]
    fn zero_samples_rejected() {
        let (obs, hyper, prior, temps) = fixture(2, 3);
        let ctx = ElboContext { obs: &obs, hyper: &hyper, prior: &prior, temps: &temps };
        let vs = VariationalState::init(2, &prior, 0);
        assert!(elbo_estimate(&ctx, &vs, 0, 1).is_err());
    }

    #[test]
    fn temperature_defaults_follow_network_size() {
        assert_eq!(TemperaturePair::<f64>::default_for(15), TemperaturePair { lambda_prior: 1.0, lambda_posterior: 0.15 });
        assert_eq!(TemperaturePair::<f64>::default_for(16), TemperaturePair { lambda_prior: 0.5, lambda_posterior: 2.0 / 3.0 });
    }

    #[test]
    fn edge_probabilities() {
        let prior = PriorConfig::default_for(3);
        let mut vs = VariationalState::<f64>::init(3, &prior, 0);
        vs.log_alpha[(0, 1)] = 3f64.ln();
        let p = vs.edge_prob();
        assert_relative_eq!(p[(0, 1)], 0.75, epsilon = 1e-15);
        assert_eq!(p[(1, 0)], 0.5);
        assert_eq!(p[(2, 2)], 0.0);
    }

    fn rel_err(g: f64, fd: f64) -> f64 {
        (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (obs, hyper, prior, temps) = fixture(3, 4);
        let draws = draw_noise(3, 5, 0..2);
        let mut vs = VariationalState::init(3, &prior, 6);
        let mut r = rng::stream(6, &[4]);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    vs.m[(i, j)] = r.random_range(-0.8..0.8);
                    vs.log_alpha[(i, j)] = r.random_range(-1.0..1.0);
                }
            }
        }
        let value = |vs: &VariationalState<f64>, hyper: &ModelHyper<f64>| {
            let ctx = ElboContext { obs: &obs, hyper, prior: &prior, temps: &temps };
            elbo_from_noise(&ctx, vs, &draws, false).unwrap().0.elbo
        };
        let ctx = ElboContext { obs: &obs, hyper: &hyper, prior: &prior, temps: &temps };
        let g = elbo_from_noise(&ctx, &vs, &draws, true).unwrap().1.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                for (which, analytic) in [(0, g.m[(i, j)]), (1, g.log_s[(i, j)]), (2, g.log_alpha[(i, j)])] {
                    let bump = |d: f64| {
                        let mut v = vs.clone();
                        match which {
                            0 => v.m[(i, j)] += d,
                            1 => v.log_s[(i, j)] += d,
                            _ => v.log_alpha[(i, j)] += d,
                        }
                        value(&v, &hyper)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    worst = worst.max(rel_err(analytic, fd));
                }
            }
        }
        let bump_hyper = |k: usize, d: f64| {
            let mut hp = hyper;
            match k {
                0 => hp.kernel.lengthscale *= d.exp(),
                1 => hp.sigma_y_sq *= d.exp(),
                _ => hp.sigma_f_sq *= d.exp(),
            }
            value(&vs, &hp)
        };
        for (k, analytic) in [(0, g.log_lengthscale), (1, g.log_sigma_y_sq), (2, g.log_sigma_f_sq)] {
            let fd = (bump_hyper(k, h) - bump_hyper(k, -h)) / (2.0 * h);
            worst = worst.max(rel_err(analytic, fd));
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn elbo_lower_bounds_relaxed_evidence() {
        let (obs, hyper, prior, temps) = fixture(2, 3);
        let mut r = rng::stream(12, &[5]);
        let prior_la = prior.log_alpha();
        let sd = prior.sigma_w_sq.sqrt();
        let samples = 40_000;
        let logs: Vec<f64> = (0..samples)
            .map(|_| {
                let mut a = DMatrix::zeros(2, 2);
                let mut w = DMatrix::zeros(2, 2);
                for (i, j) in [(0, 1), (1, 0)] {
                    a[(i, j)] = sample_concrete_logit(prior_la, temps.lambda_prior, open_uniform(&mut r)).1;
                    w[(i, j)] = sd * r.sample::<f64, _>(StandardNormal);
                }
                let params = crate::network::NetworkParams::new(a, w).unwrap();
                crate::likelihood::log_ml_naive(&obs, &params, &hyper).unwrap()
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let evidence = top + (logs.iter().map(|l| (l - top).exp()).sum::<f64>() / samples as f64).ln();
        let ctx = ElboContext { obs: &obs, hyper: &hyper, prior: &prior, temps: &temps };
        for seed in 0..3 {
            let mut vs = VariationalState::init(2, &prior, seed);
            vs.m[(0, 1)] = 0.3 * seed as f64;
            vs.log_alpha[(1, 0)] = -0.5 * seed as f64;
            let e = elbo_estimate(&ctx, &vs, 4000, seed).unwrap();
            assert!(e.elbo <= evidence + 1e-2, "elbo {} evidence {evidence}", e.elbo);
        }
    }
}
