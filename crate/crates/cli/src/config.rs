//! Run configuration: one `key = value` pair per line, values in JSON syntax.
//!
//! ```text
//! # planted benchmark
//! n_nodes = 10
//! density = 0.15
//! threads = null
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, unknown or repeated keys are rejected. Keys whose default depends
//! on the problem size accept `null`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use netgp::stability::AuditConfig;
use netgp::{
    AdamConfig64, KernelConfig64, ModelHyper64, PriorConfig64, TemperaturePair, TrainConfig64,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for every random stream.
    pub seed: u64,
    /// Worker threads; `null` uses all cores. Results do not depend on it,
    /// so it is left out of configuration echoes.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,

    // simulate
    pub n_nodes: usize,
    pub n_times: usize,
    pub density: f64,
    pub weight_scale: f64,

    // generating values for simulate, starting values for fit
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub sigma_y_sq: f64,
    pub sigma_f_sq: f64,
    /// Starting values for fit; `null` falls back to the keys above.
    pub fit_lengthscale: Option<f64>,
    pub fit_sigma_y_sq: Option<f64>,
    pub fit_sigma_f_sq: Option<f64>,

    // prior
    pub p_a: f64,
    /// `null` means `2 / N`.
    pub sigma_w_sq: Option<f64>,

    // training
    pub n_iterations: usize,
    /// `null` picks 200, 20 or 2 from `N·T`.
    pub n_mc_samples: Option<usize>,
    /// `null` picks from the network size.
    pub lambda_prior: Option<f64>,
    pub lambda_posterior: Option<f64>,
    pub hyper_update_every: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    // verify
    pub nonsingularity_trials: usize,
    pub finiteness_trials: usize,
    pub sandwich_nodes: usize,
    pub sandwich_times: usize,
    pub sandwich_trials: usize,
    /// `max U` as a multiple of `1 / (100 N²)` in the sandwich audit.
    pub sandwich_u_ratio: f64,
    pub folded_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig64::default();
        let audit = AuditConfig::default();
        Self {
            seed: 0,
            threads: None,
            n_nodes: 5,
            n_times: 50,
            density: 0.15,
            weight_scale: 0.4,
            lengthscale: 1.0,
            signal_variance: 1.0,
            sigma_y_sq: 0.1,
            sigma_f_sq: 0.05,
            fit_lengthscale: None,
            fit_sigma_y_sq: None,
            fit_sigma_f_sq: None,
            p_a: 0.5,
            sigma_w_sq: None,
            n_iterations: 1000,
            n_mc_samples: None,
            lambda_prior: None,
            lambda_posterior: None,
            hyper_update_every: 1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            nonsingularity_trials: audit.nonsingularity_trials,
            finiteness_trials: audit.finiteness_trials,
            sandwich_nodes: audit.sandwich_nodes,
            sandwich_times: audit.sandwich_times,
            sandwich_trials: audit.sandwich_trials,
            sandwich_u_ratio: audit.sandwich_u_ratio,
            folded_points: audit.folded_points,
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let mut map = Map::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", k + 1)))?;
        let key = key.trim();
        let value: Value = serde_json::from_str(value.trim())
            .map_err(|e| CliError::Config(format!("line {}: value for `{key}` is not JSON: {e}", k + 1)))?;
        if map.insert(key.to_string(), value).is_some() {
            return Err(CliError::Config(format!("line {}: `{key}` is set twice", k + 1)));
        }
    }
    let cfg: RunConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => parse_config(&crate::io::read_text(p)?),
    }
}

/// Renders the configuration in the same `key = value` format, with the
/// keys in declaration order.
pub fn render_config(cfg: &RunConfig) -> String {
    let Value::Object(map) = serde_json::to_value(cfg).expect("config serialises") else {
        unreachable!("config is a struct")
    };
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(CliError::Config(msg.into())) };
        check(self.threads != Some(0), "threads must be positive")?;
        check(self.n_nodes >= 1 && self.n_times >= 1, "n_nodes and n_times must be positive")?;
        check((0.0..=1.0).contains(&self.density), "density must lie in [0, 1]")?;
        check(self.weight_scale >= 0.0, "weight_scale must be nonnegative")?;
        self.hyper()?;
        self.fit_hyper()?;
        check(self.sigma_w_sq.is_none_or(|v| v > 0.0), "sigma_w_sq must be positive")?;
        check(self.n_mc_samples != Some(0), "n_mc_samples must be positive")?;
        check(self.hyper_update_every >= 1, "hyper_update_every must be positive")?;
        check(self.sandwich_nodes >= 2 && self.sandwich_times >= 1, "sandwich audit needs 2 nodes and 1 time")?;
        check(self.sandwich_trials >= 1 && self.nonsingularity_trials >= 1, "audit trial counts must be positive")?;
        check(self.sandwich_u_ratio > 0.0, "sandwich_u_ratio must be positive")?;
        self.adam().validate()?;
        if self.lambda_prior.is_some_and(|l| l <= 0.0) || self.lambda_posterior.is_some_and(|l| l <= 0.0) {
            return Err(CliError::Config("temperatures must be positive".into()));
        }
        PriorConfig64 { p_a: self.p_a, sigma_w_sq: self.sigma_w_sq.unwrap_or(1.0) }.validate()?;
        Ok(())
    }

    pub fn hyper(&self) -> netgp::Result<ModelHyper64> {
        let hyper = ModelHyper64 {
            kernel: KernelConfig64::new(self.lengthscale, self.signal_variance)?,
            sigma_y_sq: self.sigma_y_sq,
            sigma_f_sq: self.sigma_f_sq,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    /// Hyperparameters fit starts from.
    pub fn fit_hyper(&self) -> netgp::Result<ModelHyper64> {
        let hyper = ModelHyper64 {
            kernel: KernelConfig64::new(self.fit_lengthscale.unwrap_or(self.lengthscale), self.signal_variance)?,
            sigma_y_sq: self.fit_sigma_y_sq.unwrap_or(self.sigma_y_sq),
            sigma_f_sq: self.fit_sigma_f_sq.unwrap_or(self.sigma_f_sq),
        };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn prior(&self, n: usize) -> PriorConfig64 {
        PriorConfig64 { p_a: self.p_a, sigma_w_sq: self.sigma_w_sq.unwrap_or(2.0 / n as f64) }
    }

    pub fn adam(&self) -> AdamConfig64 {
        AdamConfig64 { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn train(&self, n: usize, t: usize) -> TrainConfig64 {
        let mut cfg = TrainConfig64::default_for(n, t, self.seed);
        let temps = TemperaturePair::default_for(n);
        cfg.n_iterations = self.n_iterations;
        cfg.n_mc_samples = self.n_mc_samples.unwrap_or(cfg.n_mc_samples);
        cfg.temps = TemperaturePair {
            lambda_prior: self.lambda_prior.unwrap_or(temps.lambda_prior),
            lambda_posterior: self.lambda_posterior.unwrap_or(temps.lambda_posterior),
        };
        cfg.hyper_update_every = self.hyper_update_every;
        cfg
    }

    pub fn audit(&self) -> Result<AuditConfig, CliError> {
        Ok(AuditConfig {
            seed: self.seed,
            nonsingularity_trials: self.nonsingularity_trials,
            finiteness_trials: self.finiteness_trials,
            sandwich_nodes: self.sandwich_nodes,
            sandwich_times: self.sandwich_times,
            sandwich_trials: self.sandwich_trials,
            sandwich_u_ratio: self.sandwich_u_ratio,
            folded_points: self.folded_points,
            hyper: self.hyper()?,
            ..AuditConfig::default()
        })
    }

    /// The configuration with every size-dependent default filled in for a
    /// problem with `n` nodes and `t` time points.
    pub fn resolved(&self, n: usize, t: usize) -> Self {
        let train = self.train(n, t);
        let fit = self.fit_hyper().expect("validated configuration");
        Self {
            fit_lengthscale: Some(fit.kernel.lengthscale),
            fit_sigma_y_sq: Some(fit.sigma_y_sq),
            fit_sigma_f_sq: Some(fit.sigma_f_sq),
            sigma_w_sq: Some(self.prior(n).sigma_w_sq),
            n_mc_samples: Some(train.n_mc_samples),
            lambda_prior: Some(train.temps.lambda_prior),
            lambda_posterior: Some(train.temps.lambda_posterior),
            ..self.clone()
        }
    }
}
