use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use netgp::stability::AuditReport;
use netgp::trainer::FitDiagnostics;
use netgp::{fit, plant_instance, roc_auc, run_audits, spectral_radius, ElboEstimate, ModelHyper64};

use crate::config::{load_config, RunConfig};
use crate::error::CliError;
use crate::io;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    match threads {
        None => Ok(f()),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| CliError::Config(format!("thread pool: {e}"))),
    }
}

#[derive(Serialize)]
struct SimulateMeta<'a> {
    version: &'a str,
    n_nodes: usize,
    n_times: usize,
    n_arcs: usize,
    spectral_radius: f64,
    plant_attempt: usize,
    config: &'a RunConfig,
}

/// Writes `observations.csv`, `truth_a.csv`, `truth_w.csv` and `meta.json`.
pub fn cmd_simulate(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let hyper = cfg.hyper()?;
    let inst = with_threads(cfg.threads, || {
        plant_instance(cfg.n_nodes, cfg.n_times, cfg.density, cfg.weight_scale, &hyper, cfg.seed)
    })??;
    io::ensure_dir(out)?;
    io::write_text(&out.join("observations.csv"), &io::format_observations(&inst.obs))?;
    io::write_matrix(&out.join("truth_a.csv"), inst.truth_a())?;
    io::write_matrix(&out.join("truth_w.csv"), inst.truth_w())?;
    let coupling = inst.truth_a().component_mul(inst.truth_w());
    let resolved = cfg.resolved(cfg.n_nodes, cfg.n_times);
    io::write_json(
        &out.join("meta.json"),
        &SimulateMeta {
            version: VERSION,
            n_nodes: cfg.n_nodes,
            n_times: cfg.n_times,
            n_arcs: inst.truth_a().iter().filter(|&&a| a != 0.0).count(),
            spectral_radius: spectral_radius(&coupling),
            plant_attempt: inst.attempt,
            config: &resolved,
        },
    )
}

#[derive(Serialize)]
struct HyperOut {
    lengthscale: f64,
    signal_variance: f64,
    sigma_y_sq: f64,
    sigma_f_sq: f64,
}

impl From<&ModelHyper64> for HyperOut {
    fn from(h: &ModelHyper64) -> Self {
        Self {
            lengthscale: h.kernel.lengthscale,
            signal_variance: h.kernel.signal_variance,
            sigma_y_sq: h.sigma_y_sq,
            sigma_f_sq: h.sigma_f_sq,
        }
    }
}

#[derive(Serialize)]
struct FitOut<'a> {
    version: &'a str,
    n_nodes: usize,
    n_times: usize,
    iterations: usize,
    final_elbo: Option<&'a ElboEstimate<f64>>,
    hyper: HyperOut,
    diagnostics: &'a FitDiagnostics,
    config: &'a RunConfig,
}

/// Writes the posterior summaries, `elbo_trace.csv` and `report.json`.
pub fn cmd_fit(observations: &Path, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let obs = io::read_observations(observations)?;
    let (n, t) = (obs.n_nodes(), obs.n_times());
    let hyper = cfg.fit_hyper()?;
    let prior = cfg.prior(n);
    let train = cfg.train(n, t);
    let report = with_threads(cfg.threads, || fit(&obs, &hyper, &prior, &train, &cfg.adam()))??;

    io::ensure_dir(out)?;
    io::write_matrix(&out.join("edge_prob.csv"), &report.edge_prob)?;
    io::write_matrix(&out.join("edge_mean.csv"), &report.edge_mean)?;
    io::write_matrix(&out.join("edge_std.csv"), &report.edge_std)?;
    io::write_matrix(&out.join("scores.csv"), &report.score)?;
    io::write_text(&out.join("elbo_trace.csv"), &io::format_elbo_trace(&report.elbo_trace))?;
    let resolved = cfg.resolved(n, t);
    io::write_json(
        &out.join("report.json"),
        &FitOut {
            version: VERSION,
            n_nodes: n,
            n_times: t,
            iterations: report.elbo_trace.len(),
            final_elbo: report.elbo_trace.last(),
            hyper: HyperOut::from(&report.hyper),
            diagnostics: &report.diagnostics,
            config: &resolved,
        },
    )
}

/// Writes the ROC curve to `out` and returns the AUC.
pub fn cmd_evaluate(scores: &Path, truth: &Path, out: &Path) -> Result<f64, CliError> {
    let s = io::read_matrix(scores)?;
    let a: DMatrix<f64> = io::read_matrix(truth)?;
    let curve = roc_auc(&s, &a)?;
    io::write_text(out, &io::format_roc(&curve))?;
    Ok(curve.auc)
}

#[derive(Serialize)]
struct VerifyOut<'a> {
    version: &'a str,
    #[serde(flatten)]
    report: &'a AuditReport,
    config: &'a RunConfig,
}

/// Writes the audit report to `out`; fails with exit code 5 if any check
/// failed.
pub fn cmd_verify(config: Option<&Path>, out: &Path) -> Result<AuditReport, CliError> {
    let cfg = load_config(config)?;
    let audit = cfg.audit()?;
    let report = with_threads(cfg.threads, || run_audits(&audit))??;
    io::write_json(out, &VerifyOut { version: VERSION, report: &report, config: &cfg })?;
    if report.passed {
        Ok(report)
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::VerifyFailed(failed.join(", ")))
    }
}
