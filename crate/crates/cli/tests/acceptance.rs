//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any of them failed.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;

use netgp::network::{sample_prior, simulate_observations, StructuralMatrices};
use netgp::rng::stream;
use netgp::stability::AuditConfig;
use netgp::variational::{concrete_log_density, sample_concrete_logit};
use netgp::{
    draw_noise, elbo_from_noise, fit, log_ml_kron, log_ml_naive, plant_instance, roc_auc, run_audits,
    score_matrix, smoothed_elbo, ElboContext, ElboEstimate, KernelConfig64, ModelHyper64, PriorConfig64,
    TemperaturePair, TimeGrid64, VariationalState64,
};
use netgp_cli::{cmd_evaluate, cmd_fit, cmd_simulate, parse_config, RunConfig};

type Outcome = Result<String, String>;

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn fixture_text(name: &str) -> String {
    fs::read_to_string(fixtures_dir().join(name)).expect("fixture readable")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

fn random_grid(r: &mut impl Rng, len: usize) -> TimeGrid64 {
    let mut t = 0.0;
    let times = (0..len)
        .map(|_| {
            t += r.random_range(0.2..1.5);
            t
        })
        .collect();
    TimeGrid64::new(times).unwrap()
}

fn kronecker_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = stream(2024, &[1]);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut seed = 0u64;
    while count < 100 {
        seed += 1;
        let n = r.random_range(2..=6);
        let t = r.random_range(2..=8);
        let prior = PriorConfig64 { p_a: r.random_range(0.1..0.9), sigma_w_sq: r.random_range(0.05..1.0) };
        let params = sample_prior(n, &prior, seed).map_err(|e| e.to_string())?;
        if StructuralMatrices::from_params(&params).is_err() {
            continue;
        }
        let hyper = ModelHyper64 {
            kernel: KernelConfig64::new(r.random_range(0.3..3.0), r.random_range(0.5..2.0)).unwrap(),
            sigma_y_sq: r.random_range(0.01..1.0),
            sigma_f_sq: r.random_range(0.0..0.5),
        };
        let grid = random_grid(&mut r, t);
        let obs = simulate_observations(&params, &hyper, &grid, seed).map_err(|e| e.to_string())?;
        let naive = log_ml_naive(&obs, &params, &hyper).map_err(|e| e.to_string())?;
        let kron = log_ml_kron(&obs, &params, &hyper).map_err(|e| e.to_string())?;
        worst = worst.max((kron - naive).abs() / (1.0 + naive.abs()));
        count += 1;
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-8 && elapsed < Duration::from_secs(30),
        format!("{count} instances, max |kron-naive|/(1+|naive|) = {worst:.2e} (limit 1e-8), {:.2} s (limit 30 s)", elapsed.as_secs_f64()),
    )
}

fn fast_path_speed() -> Outcome {
    let (n, t) = (40, 40);
    let prior = PriorConfig64::default_for(n);
    let mut seed = 0;
    let params = loop {
        let p = sample_prior(n, &prior, seed).map_err(|e| e.to_string())?;
        if StructuralMatrices::from_params(&p).is_ok() {
            break p;
        }
        seed += 1;
    };
    let hyper = ModelHyper64 { kernel: KernelConfig64::new(2.0, 1.0).unwrap(), sigma_y_sq: 0.1, sigma_f_sq: 0.05 };
    let obs = simulate_observations(&params, &hyper, &TimeGrid64::regular(t).unwrap(), 7).map_err(|e| e.to_string())?;
    let time = |f: &dyn Fn() -> f64| {
        let runs: Vec<f64> = (0..10)
            .map(|_| {
                let s = Instant::now();
                std::hint::black_box(f());
                s.elapsed().as_secs_f64()
            })
            .collect();
        median(runs)
    };
    let kron = time(&|| log_ml_kron(&obs, &params, &hyper).unwrap());
    let naive = time(&|| log_ml_naive(&obs, &params, &hyper).unwrap());
    let speedup = naive / kron;
    check(
        speedup >= 5.0,
        format!("N=T=40, median kron {:.3} ms, naive {:.1} ms, speedup {speedup:.0}x (need 5x)", kron * 1e3, naive * 1e3),
    )
}

fn gradient_contract() -> Outcome {
    let start = Instant::now();
    let (n, t) = (3, 4);
    let prior = PriorConfig64::default_for(n);
    let truth = sample_prior(n, &PriorConfig64 { p_a: 0.6, sigma_w_sq: 0.3 }, 3).map_err(|e| e.to_string())?;
    let hyper = ModelHyper64 { kernel: KernelConfig64::new(1.3, 1.0).unwrap(), sigma_y_sq: 0.2, sigma_f_sq: 0.1 };
    let obs = simulate_observations(&truth, &hyper, &random_grid(&mut stream(3, &[2]), t), 5).map_err(|e| e.to_string())?;
    let temps = TemperaturePair::default_for(n);
    let draws = draw_noise(n, 31, 0..2);

    let mut vs = VariationalState64::init(n, &prior, 8);
    let mut r = stream(8, &[3]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                vs.m[(i, j)] = r.random_range(-0.8..0.8);
                vs.log_s[(i, j)] = r.random_range(-2.0..-0.5);
                vs.log_alpha[(i, j)] = r.random_range(-1.0..1.0);
            }
        }
    }
    let value = |vs: &VariationalState64, hyper: &ModelHyper64| {
        let ctx = ElboContext { obs: &obs, hyper, prior: &prior, temps: &temps };
        elbo_from_noise(&ctx, vs, &draws, false).unwrap().0.elbo
    };
    let ctx = ElboContext { obs: &obs, hyper: &hyper, prior: &prior, temps: &temps };
    let g = elbo_from_noise(&ctx, &vs, &draws, true).map_err(|e| e.to_string())?.1.unwrap();

    let h = 1e-5;
    let rel = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..n {
        for j in 0..n {
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
                worst = worst.max(rel(analytic, (bump(h) - bump(-h)) / (2.0 * h)));
                checked += 1;
            }
        }
    }
    for (k, analytic) in [(0, g.log_lengthscale), (1, g.log_sigma_y_sq), (2, g.log_sigma_f_sq)] {
        let bump = |d: f64| {
            let mut hp = hyper;
            match k {
                0 => hp.kernel.lengthscale *= d.exp(),
                1 => hp.sigma_y_sq *= d.exp(),
                _ => hp.sigma_f_sq *= d.exp(),
            }
            value(&vs, &hp)
        };
        worst = worst.max(rel(analytic, (bump(h) - bump(-h)) / (2.0 * h)));
        checked += 1;
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-3 && elapsed < Duration::from_secs(60),
        format!("{checked} parameters, max relative error {worst:.2e} (limit 1e-3), {:.2} s", elapsed.as_secs_f64()),
    )
}

fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let h = (hi - lo) / intervals as f64;
    let inner: f64 = (1..intervals).map(|k| f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(lo) + f(hi) + inner) * h / 3.0
}

fn concrete_distribution() -> Outcome {
    let alphas = [0.25, 1.0, 4.0];
    let lambdas = [0.15, 0.5, 1.0];
    let mut worst_norm: f64 = 0.0;
    for &alpha in &alphas {
        for &lambda in &lambdas {
            let la = f64::ln(alpha);
            let half = 50.0 / lambda;
            let mass = simpson(|a| concrete_log_density(a, la, lambda).exp(), -half, half, 200_000);
            worst_norm = worst_norm.max((mass - 1.0).abs());
        }
    }
    let draws = 100_000;
    let mut worst_mean: f64 = 0.0;
    for (k, &alpha) in alphas.iter().enumerate() {
        let la = f64::ln(alpha);
        let mut r = stream(77, &[k as u64]);
        let mean = (0..draws)
            .map(|_| sample_concrete_logit(la, 1e-3, r.random::<f64>().clamp(1e-12, 1.0 - 1e-12)).1)
            .sum::<f64>()
            / draws as f64;
        worst_mean = worst_mean.max((mean - alpha / (1.0 + alpha)).abs());
    }
    check(
        worst_norm <= 1e-4 && worst_mean <= 0.02,
        format!(
            "3x3 grid max |mass-1| = {worst_norm:.2e} (limit 1e-4); lambda=1e-3 max |mean - a/(1+a)| = {worst_mean:.4} over {draws} draws (limit 0.02)"
        ),
    )
}

fn stability_audits() -> Outcome {
    let start = Instant::now();
    let cfg = AuditConfig::default();
    let report = run_audits(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let sandwich_rate = report.sandwich.violation_rate;
    check(
        report.passed
            && report.sandwich.condition.condition_met
            && elapsed < Duration::from_secs(300)
            && cfg.nonsingularity_trials == 1000
            && cfg.nonsingularity_sizes == [5, 10, 20],
        format!(
            "{} checks, failed {failed:?}, sandwich condition met = {}, violation rate {sandwich_rate:.3} (limit 0.05), {:.1} s (limit 300 s)",
            report.checks.len(),
            report.sandwich.condition.condition_met,
            elapsed.as_secs_f64()
        ),
    )
}

struct PlantedRun {
    auc: f64,
    trace: Vec<ElboEstimate<f64>>,
}

fn planted_runs(cfg: &RunConfig) -> Result<Vec<PlantedRun>, String> {
    (0..5u64)
        .map(|seed| {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let hyper = cfg.hyper().map_err(|e| e.to_string())?;
            let inst = plant_instance(cfg.n_nodes, cfg.n_times, cfg.density, cfg.weight_scale, &hyper, seed)
                .map_err(|e| e.to_string())?;
            let (n, t) = (cfg.n_nodes, cfg.n_times);
            let report = fit(&inst.obs, &cfg.fit_hyper().unwrap(), &cfg.prior(n), &cfg.train(n, t), &cfg.adam())
                .map_err(|e| e.to_string())?;
            let auc = roc_auc(&score_matrix(&report), inst.truth_a()).map_err(|e| e.to_string())?.auc;
            Ok(PlantedRun { auc, trace: report.elbo_trace })
        })
        .collect()
}

fn planted_recovery(cfg: &RunConfig, runs: &Result<Vec<PlantedRun>, String>, elapsed: Duration) -> Outcome {
    let runs = runs.as_ref().map_err(|e| e.clone())?;
    let aucs: Vec<f64> = runs.iter().map(|r| r.auc).collect();
    let med = median(aucs.clone());
    let shown: Vec<String> = aucs.iter().map(|a| format!("{a:.3}")).collect();
    check(
        med >= 0.80
            && cfg.n_nodes == 10
            && cfg.n_times == 200
            && cfg.density == 0.15
            && cfg.weight_scale == 0.4
            && cfg.n_iterations == 2000
            && cfg.n_mc_samples == Some(20),
        format!("seeds 0..5 AUC [{}], median {med:.3} (need 0.80), {:.0} s", shown.join(", "), elapsed.as_secs_f64()),
    )
}

fn pipeline(conf_text: &str, dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let conf = dir.join("run.conf");
    fs::write(&conf, conf_text).map_err(|e| e.to_string())?;
    let (sim, fitted) = (dir.join("sim"), dir.join("fit"));
    cmd_simulate(Some(&conf), &sim).map_err(|e| e.to_string())?;
    cmd_fit(&sim.join("observations.csv"), Some(&conf), &fitted).map_err(|e| e.to_string())?;
    let auc = cmd_evaluate(&fitted.join("scores.csv"), &sim.join("truth_a.csv"), &dir.join("roc.csv"))
        .map_err(|e| e.to_string())?;
    let mut files = vec![("auc".to_string(), format!("auc={auc:.6}").into_bytes())];
    for sub in [&sim, &fitted] {
        let mut names: Vec<_> = fs::read_dir(sub).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    files.push(("roc.csv".into(), fs::read(dir.join("roc.csv")).unwrap()));
    Ok(files)
}

fn determinism() -> Outcome {
    let base = fixture_text("small_n5.conf");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (k, extra) in ["threads = 1\n", "threads = 1\n", "threads = 4\n"].iter().enumerate() {
        let dir = tmp.path().join(format!("run{k}"));
        fs::create_dir_all(&dir).unwrap();
        outputs.push(pipeline(&format!("{base}{extra}"), &dir)?);
    }
    let differing: Vec<&str> = outputs[0]
        .iter()
        .zip(&outputs[2])
        .chain(outputs[0].iter().zip(&outputs[1]))
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let files = outputs[0].len();
    check(
        differing.is_empty() && outputs.iter().all(|o| o.len() == files),
        format!("{files} outputs compared across two threads=1 runs and one threads=4 run, differing: {differing:?}"),
    )
}

fn progress(trace: &[ElboEstimate<f64>]) -> Option<(f64, f64)> {
    let smooth = smoothed_elbo(trace, 50);
    (smooth.len() >= 50).then(|| (smooth[49], *smooth.last().unwrap()))
}

fn elbo_progress(planted: &Result<Vec<PlantedRun>, String>) -> Outcome {
    let mut names: Vec<String> = fs::read_dir(fixtures_dir())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".conf"))
        .collect();
    names.sort();
    let mut parts = Vec::new();
    let mut ok = !names.is_empty();
    for name in &names {
        let cfg = parse_config(&fixture_text(name)).map_err(|e| e.to_string())?;
        let trace = if name == "planted_n10.conf" && cfg.seed == 0 {
            planted.as_ref().map_err(|e| e.clone())?[0].trace.clone()
        } else {
            let hyper = cfg.hyper().map_err(|e| e.to_string())?;
            let inst = plant_instance(cfg.n_nodes, cfg.n_times, cfg.density, cfg.weight_scale, &hyper, cfg.seed)
                .map_err(|e| e.to_string())?;
            let (n, t) = (cfg.n_nodes, cfg.n_times);
            fit(&inst.obs, &cfg.fit_hyper().unwrap(), &cfg.prior(n), &cfg.train(n, t), &cfg.adam())
                .map_err(|e| e.to_string())?
                .elbo_trace
        };
        match progress(&trace) {
            Some((early, last)) => {
                ok &= last > early;
                parts.push(format!("{name}: {early:.1} -> {last:.1}"));
            }
            None => {
                ok = false;
                parts.push(format!("{name}: fewer than 50 iterations"));
            }
        }
    }
    check(ok, format!("smoothed ELBO at iteration 50 -> final: {}", parts.join("; ")))
}

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {label}: {tag} | {detail}");
    outcome.is_ok()
}

fn main() {
    let planted_cfg = parse_config(&fixture_text("planted_n10.conf")).expect("planted fixture parses");
    let mut results = vec![
        run("1 (kronecker oracle equivalence)", kronecker_oracle),
        run("2 (fast-path speed)", fast_path_speed),
        run("3 (gradient contract)", gradient_contract),
        run("4 (concrete distribution)", concrete_distribution),
        run("5 (stability audits)", stability_audits),
    ];
    let start = Instant::now();
    let planted = catch_unwind(AssertUnwindSafe(|| planted_runs(&planted_cfg)))
        .unwrap_or_else(|_| Err("planted runs panicked".into()));
    let planted_time = start.elapsed();
    results.push(run("6 (planted recovery)", || planted_recovery(&planted_cfg, &planted, planted_time)));
    results.push(run("7 (determinism)", determinism));
    results.push(run("8 (elbo progress)", || elbo_progress(&planted)));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
