//! Planted benchmark instances and ROC scoring.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::TimeGrid;
use crate::likelihood::{ModelHyper, ObservationGrid};
use crate::network::{simulate_observations, spectral_radius, NetworkParams};
use crate::rng::{self, open_uniform, TAG_PLANT};
use crate::scalar::{lit, to_f64, Real};
use crate::trainer::FitReport;

/// Planted networks must have a coupling spectral radius below this.
pub const MAX_PLANTED_RADIUS: f64 = 0.95;
pub const MAX_PLANT_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance<T: Real> {
    pub truth: NetworkParams<T>,
    pub obs: ObservationGrid<T>,
    pub hyper: ModelHyper<T>,
    pub seed: u64,
    /// Draw index that produced `truth`, counting from 0.
    pub attempt: usize,
}

impl<T: Real> PlantedInstance<T> {
    pub fn truth_a(&self) -> &DMatrix<T> {
        self.truth.adjacency()
    }

    pub fn truth_w(&self) -> &DMatrix<T> {
        self.truth.weights()
    }
}

/// Draws `A_ij ~ Bernoulli(density)` and `W_ij ~ N(0, weight_scale²)` on
/// active arcs, redrawing until the coupling is stable, then simulates
/// observations on the grid `0, 1, ..., t_count - 1`.
pub fn plant_instance<T: Real>(
    n: usize,
    t_count: usize,
    density: f64,
    weight_scale: f64,
    hyper: &ModelHyper<T>,
    seed: u64,
) -> Result<PlantedInstance<T>> {
    if !(0.0..=1.0).contains(&density) || !(weight_scale >= 0.0) || n == 0 {
        return Err(Error::InvalidConfig("need n >= 1, density in [0, 1] and weight_scale >= 0".into()));
    }
    let grid = TimeGrid::regular(t_count)?;
    let mut max_radius: f64 = 0.0;
    for attempt in 0..MAX_PLANT_ATTEMPTS {
        let mut r = rng::stream(seed, &[TAG_PLANT, attempt as u64]);
        let mut a = DMatrix::zeros(n, n);
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let active = open_uniform(&mut r) < density;
                let z: f64 = r.sample(StandardNormal);
                if active {
                    a[(i, j)] = T::one();
                    w[(i, j)] = lit(weight_scale * z);
                }
            }
        }
        let truth = NetworkParams::new(a, w)?;
        let radius = to_f64(spectral_radius(&truth.adjacency().component_mul(truth.weights())));
        max_radius = max_radius.max(radius);
        if radius < MAX_PLANTED_RADIUS {
            let sim_seed = rng::derive_seed(seed, &[TAG_PLANT, attempt as u64, 1]);
            let obs = simulate_observations(&truth, hyper, &grid, sim_seed)?;
            return Ok(PlantedInstance { truth, obs, hyper: *hyper, seed, attempt });
        }
    }
    Err(Error::UnstableInstance { attempts: MAX_PLANT_ATTEMPTS, max_radius })
}

/// `|m_ij| · p_ij`, zero on the diagonal.
pub fn score_matrix<T: Real>(report: &FitReport<T>) -> DMatrix<T> {
    let n = report.edge_mean.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            T::zero()
        } else {
            report.edge_mean[(i, j)].abs() * report.edge_prob[(i, j)]
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// Descending; the first entry is `+inf` and yields the point `(0, 0)`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

/// ROC over the off-diagonal pairs, predicting an arc when `score >= threshold`.
///
/// Tied scores enter the curve together, so the trapezoid area equals the
/// Mann–Whitney statistic with half credit for ties.
pub fn roc_auc<T: Real>(scores: &DMatrix<T>, truth_a: &DMatrix<T>) -> Result<RocCurve> {
    if scores.shape() != truth_a.shape() || !scores.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "scores are {:?}, truth is {:?}",
            scores.shape(),
            truth_a.shape()
        )));
    }
    let n = scores.nrows();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let s = to_f64(scores[(i, j)]);
                if s.is_nan() {
                    return Err(Error::InvalidConfig(format!("score ({i}, {j}) is NaN")));
                }
                pairs.push((s, truth_a[(i, j)] != T::zero()));
            }
        }
    }
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateTruth);
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < pairs.len() {
        let s = pairs[k].0;
        while k < pairs.len() && pairs[k].0 == s {
            if pairs[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let x = fp as f64 / neg as f64;
        let y = tp as f64 / pos as f64;
        auc += (x - fpr.last().unwrap()) * (y + tpr.last().unwrap()) * 0.5;
        thresholds.push(s);
        fpr.push(x);
        tpr.push(y);
    }
    Ok(RocCurve { thresholds, fpr, tpr, auc })
}
