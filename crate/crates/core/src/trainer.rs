//! Adam ascent on the Monte Carlo ELBO.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{ModelHyper, ObservationGrid};
use crate::network::{spectral_radius, PriorConfig};
use crate::scalar::{lit, to_f64, Real};
use crate::stability::{sandwich_condition, SandwichCondition};
use crate::variational::{
    draw_noise, elbo_from_noise, ElboContext, ElboEstimate, TemperaturePair, VariationalState,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> Default for AdamConfig<T> {
    fn default() -> Self {
        Self { lr: lit(0.01), beta1: lit(0.9), beta2: lit(0.999), eps: lit(1e-8) }
    }
}

impl<T: Real> AdamConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: T| b >= T::zero() && b < T::one();
        if !(self.lr > T::zero()) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > T::zero()) {
            return Err(Error::InvalidConfig("adam needs lr > 0, betas in [0, 1), eps > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

/// One bias-corrected Adam step in the ascent direction. `t` counts from 1.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig<T>,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidConfig("adam step index starts at 1".into()));
    }
    let len = params.len();
    for got in [grads.len(), state.m.len(), state.v.len()] {
        if got != len {
            return Err(Error::ShapeMismatch { expected: len, got });
        }
    }
    let one = T::one();
    let c1 = one - cfg.beta1.powi(t.min(i32::MAX as u64) as i32);
    let c2 = one - cfg.beta2.powi(t.min(i32::MAX as u64) as i32);
    for k in 0..len {
        let g = grads[k];
        state.m[k] = cfg.beta1 * state.m[k] + (one - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (one - cfg.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] += cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<T> {
    pub n_iterations: usize,
    pub n_mc_samples: usize,
    pub temps: TemperaturePair<T>,
    pub hyper_update_every: usize,
    pub seed: u64,
    /// Worker threads for the Monte Carlo fan-out; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl<T: Real> TrainConfig<T> {
    pub fn default_for(n_nodes: usize, n_times: usize, seed: u64) -> Self {
        Self {
            n_iterations: 1000,
            n_mc_samples: default_mc_samples(n_nodes * n_times),
            temps: TemperaturePair::default_for(n_nodes),
            hyper_update_every: 1,
            seed,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.temps.validate()?;
        if self.n_mc_samples == 0 || self.hyper_update_every == 0 || self.threads == Some(0) {
            return Err(Error::InvalidConfig(
                "n_mc_samples, hyper_update_every and threads must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// 200 samples up to 1e4 observations, 20 up to 1e5, 2 above.
pub fn default_mc_samples(n_obs: usize) -> usize {
    match n_obs {
        0..=10_000 => 200,
        10_001..=100_000 => 20,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    /// Spectral radius of the posterior mean coupling `p ⊙ m`.
    pub spectral_radius_mean_coupling: f64,
    pub sandwich: SandwichCondition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<T: Real> {
    pub edge_prob: DMatrix<T>,
    pub edge_mean: DMatrix<T>,
    pub edge_std: DMatrix<T>,
    pub score: DMatrix<T>,
    /// ELBO estimate at the start of each iteration, before its update.
    pub elbo_trace: Vec<ElboEstimate<T>>,
    pub hyper: ModelHyper<T>,
    pub state: VariationalState<T>,
    pub diagnostics: FitDiagnostics,
}

fn flatten<T: Real>(vs: &VariationalState<T>) -> Vec<T> {
    vs.m.iter().chain(vs.log_s.iter()).chain(vs.log_alpha.iter()).copied().collect()
}

fn unflatten<T: Real>(flat: &[T], vs: &mut VariationalState<T>) {
    let k = vs.m.len();
    vs.m.as_mut_slice().copy_from_slice(&flat[..k]);
    vs.log_s.as_mut_slice().copy_from_slice(&flat[k..2 * k]);
    vs.log_alpha.as_mut_slice().copy_from_slice(&flat[2 * k..]);
}

/// Runs `cfg.n_iterations` Adam steps starting from `hyper`.
///
/// A zero `sigma_f_sq` stays at zero, since it has no log parameterisation.
/// `kernel.signal_variance` is held fixed.
pub fn fit<T: Real>(
    obs: &ObservationGrid<T>,
    hyper: &ModelHyper<T>,
    prior: &PriorConfig<T>,
    cfg: &TrainConfig<T>,
    adam: &AdamConfig<T>,
) -> Result<FitReport<T>> {
    cfg.validate()?;
    adam.validate()?;
    hyper.validate()?;
    prior.validate()?;
    if obs.n_nodes() < 2 || obs.n_times() < 2 {
        return Err(Error::InvalidConfig("fitting needs at least 2 nodes and 2 time points".into()));
    }
    match cfg.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(|| fit_inner(obs, hyper, prior, cfg, adam)),
        None => fit_inner(obs, hyper, prior, cfg, adam),
    }
}

fn fit_inner<T: Real>(
    obs: &ObservationGrid<T>,
    hyper0: &ModelHyper<T>,
    prior: &PriorConfig<T>,
    cfg: &TrainConfig<T>,
    adam: &AdamConfig<T>,
) -> Result<FitReport<T>> {
    let n = obs.n_nodes();
    let mut vs = VariationalState::init(n, prior, cfg.seed);
    let mut flat = flatten(&vs);
    let mut var_adam = AdamState::new(flat.len());

    let learn_sigma_f = hyper0.sigma_f_sq > T::zero();
    let mut hyper = *hyper0;
    let mut log_hyper = vec![
        hyper.kernel.lengthscale.ln(),
        hyper.sigma_y_sq.ln(),
        if learn_sigma_f { hyper.sigma_f_sq.ln() } else { T::zero() },
    ];
    let mut hyper_adam = AdamState::new(3);
    let mut hyper_steps = 0u64;

    let s = cfg.n_mc_samples as u64;
    let mut trace = Vec::with_capacity(cfg.n_iterations);
    for it in 0..cfg.n_iterations {
        let wrap = |e: Error| Error::Training { iteration: it, source: Box::new(e) };
        let draws = draw_noise(n, cfg.seed, it as u64 * s..(it as u64 + 1) * s);
        let ctx = ElboContext { obs, hyper: &hyper, prior, temps: &cfg.temps };
        let (est, grad) = elbo_from_noise(&ctx, &vs, &draws, true).map_err(wrap)?;
        let grad = grad.expect("gradient requested");
        if !est.elbo.is_finite() {
            return Err(wrap(Error::EigenFailure("non-finite ELBO".into())));
        }
        trace.push(est);

        let g = flatten(&VariationalState { m: grad.m, log_s: grad.log_s, log_alpha: grad.log_alpha });
        adam_step(&mut flat, &g, &mut var_adam, adam, it as u64 + 1).map_err(wrap)?;
        unflatten(&flat, &mut vs);

        if (it + 1) % cfg.hyper_update_every == 0 {
            hyper_steps += 1;
            let gh = [
                grad.log_lengthscale,
                grad.log_sigma_y_sq,
                if learn_sigma_f { grad.log_sigma_f_sq } else { T::zero() },
            ];
            adam_step(&mut log_hyper, &gh, &mut hyper_adam, adam, hyper_steps).map_err(wrap)?;
            hyper.kernel.lengthscale = log_hyper[0].exp();
            hyper.sigma_y_sq = log_hyper[1].exp();
            if learn_sigma_f {
                hyper.sigma_f_sq = log_hyper[2].exp();
            }
        }
    }

    let edge_prob = vs.edge_prob();
    let edge_std = vs.edge_std();
    let edge_mean = vs.m.clone();
    let score = DMatrix::from_fn(n, n, |i, j| (edge_mean[(i, j)] * edge_prob[(i, j)]).abs());
    let f = |m: &DMatrix<T>| m.map(to_f64);
    let mean_coupling = edge_prob.component_mul(&edge_mean);
    let diagnostics = FitDiagnostics {
        spectral_radius_mean_coupling: to_f64(spectral_radius(&mean_coupling)),
        sandwich: sandwich_condition(
            &f(&edge_mean),
            &f(&edge_std),
            &f(&edge_prob),
            obs.grid(),
            &hyper,
        )?,
    };
    Ok(FitReport { edge_prob, edge_mean, edge_std, score, elbo_trace: trace, hyper, state: vs, diagnostics })
}

/// Trailing moving average of the ELBO over `window` iterations.
pub fn smoothed_elbo<T: Real>(trace: &[ElboEstimate<T>], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (k, e) in trace.iter().enumerate() {
        acc += to_f64(e.elbo);
        if k >= w {
            acc -= to_f64(trace[k - w].elbo);
        }
        out.push(acc / (k + 1).min(w) as f64);
    }
    out
}
