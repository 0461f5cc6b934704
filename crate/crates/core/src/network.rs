//! Network parameters, prior sampling and the structural matrices of the
//! inverse model `f(t) = (I - B)^{-1} (z(t) + B eps_f)` with `B = A ∘ W`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{chol_with_jitter, kernel_matrix, TimeGrid};
use crate::likelihood::{ModelHyper, ObservationGrid};
use crate::rng::{self, TAG_PRIOR, TAG_SIMULATE};
use crate::scalar::{lit, to_f64, Real};

/// Pivot ratio below which `I - B` is treated as singular.
pub const SINGULAR_PIVOT_RATIO: f64 = 1e-13;

/// Relaxed adjacency `A` (entries in `[0, 1]`) and weights `W`.
///
/// Entry `(i, j)` describes the arc from node `j` into node `i`. Both
/// diagonals are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Real> {
    adjacency: DMatrix<T>,
    weights: DMatrix<T>,
}

impl<T: Real> NetworkParams<T> {
    pub fn new(adjacency: DMatrix<T>, weights: DMatrix<T>) -> Result<Self> {
        let n = adjacency.nrows();
        if !adjacency.is_square() || weights.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "adjacency {:?} and weights {:?} must be the same square shape",
                adjacency.shape(),
                weights.shape()
            )));
        }
        for i in 0..n {
            if adjacency[(i, i)] != T::zero() || weights[(i, i)] != T::zero() {
                return Err(Error::InvalidConfig(format!("diagonal entry ({i},{i}) must be zero")));
            }
        }
        if adjacency.iter().any(|&a| !(a >= T::zero() && a <= T::one())) {
            return Err(Error::InvalidConfig("adjacency entries must lie in [0, 1]".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("weights must be finite".into()));
        }
        Ok(Self { adjacency, weights })
    }

    pub fn empty(n: usize) -> Self {
        Self { adjacency: DMatrix::zeros(n, n), weights: DMatrix::zeros(n, n) }
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<T> {
        &self.adjacency
    }

    pub fn weights(&self) -> &DMatrix<T> {
        &self.weights
    }

    /// Applies a node relabelling: node `perm[k]` becomes node `k`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes();
        let a = DMatrix::from_fn(n, n, |i, j| self.adjacency[(perm[i], perm[j])]);
        let w = DMatrix::from_fn(n, n, |i, j| self.weights[(perm[i], perm[j])]);
        Self { adjacency: a, weights: w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig<T> {
    /// Bernoulli mean of each arc indicator.
    pub p_a: T,
    /// Variance of the zero-mean Gaussian weight prior.
    pub sigma_w_sq: T,
}

impl<T: Real> PriorConfig<T> {
    /// `p_a = 0.5`, `sigma_w_sq = 2 / n`.
    pub fn default_for(n: usize) -> Self {
        Self { p_a: lit(0.5), sigma_w_sq: lit(2.0 / n as f64) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_a >= T::zero() && self.p_a <= T::one()) {
            return Err(Error::InvalidConfig("p_a must lie in [0, 1]".into()));
        }
        if !(self.sigma_w_sq > T::zero()) {
            return Err(Error::InvalidConfig("sigma_w_sq must be positive".into()));
        }
        Ok(())
    }

    /// Location of the relaxed prior `Concrete(p_a / (1 - p_a), λ)` in log space.
    pub fn log_alpha(&self) -> T {
        self.p_a.ln() - (T::one() - self.p_a).ln()
    }
}

/// `B = A ∘ W`, `G = (I - B)^{-1}`, `K_f = G Gᵀ`, `E = G B Bᵀ Gᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralMatrices<T: Real> {
    pub coupling: DMatrix<T>,
    pub inverse: DMatrix<T>,
    pub node_cov: DMatrix<T>,
    pub noise_cov: DMatrix<T>,
    /// `G B`, kept because gradients need it.
    pub(crate) inv_coupling: DMatrix<T>,
}

pub fn hadamard_mask<T: Real>(params: &NetworkParams<T>) -> DMatrix<T> {
    params.adjacency.component_mul(&params.weights)
}

pub(crate) fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

impl<T: Real> StructuralMatrices<T> {
    pub fn from_params(params: &NetworkParams<T>) -> Result<Self> {
        Self::from_coupling(hadamard_mask(params))
    }

    /// Builds the structural matrices from `B` directly.
    pub fn from_coupling(coupling: DMatrix<T>) -> Result<Self> {
        if !coupling.is_square() {
            return Err(Error::DimensionMismatch("coupling matrix must be square".into()));
        }
        let n = coupling.nrows();
        let system = DMatrix::<T>::identity(n, n) - &coupling;
        let lu = system.lu();
        let u = lu.u();
        let (mut lo, mut hi) = (T::max_value().unwrap_or(lit(f64::MAX)), T::zero());
        for i in 0..n {
            let p = u[(i, i)].abs();
            lo = lo.min(p);
            hi = hi.max(p);
        }
        let ratio = if n == 0 { 1.0 } else { to_f64(lo) / to_f64(hi).max(f64::MIN_POSITIVE) };
        if !(ratio > SINGULAR_PIVOT_RATIO) {
            return Err(Error::SingularSystem { pivot_ratio: ratio });
        }
        let inverse = lu
            .solve(&DMatrix::identity(n, n))
            .ok_or(Error::SingularSystem { pivot_ratio: ratio })?;
        if inverse.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem { pivot_ratio: ratio });
        }
        let node_cov = symmetrize(&(&inverse * inverse.transpose()));
        let inv_coupling = &inverse * &coupling;
        let noise_cov = symmetrize(&(&inv_coupling * inv_coupling.transpose()));
        Ok(Self { coupling, inverse, node_cov, noise_cov, inv_coupling })
    }

    pub fn n_nodes(&self) -> usize {
        self.coupling.nrows()
    }
}

/// Draws `A_ij ~ Bernoulli(p_a)` and `W_ij ~ N(0, sigma_w_sq)` off the diagonal.
pub fn sample_prior<T: Real>(n: usize, cfg: &PriorConfig<T>, seed: u64) -> Result<NetworkParams<T>> {
    if n < 2 {
        return Err(Error::InvalidConfig("prior sampling needs at least two nodes".into()));
    }
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[TAG_PRIOR]);
    let p = to_f64(cfg.p_a);
    let sd = to_f64(cfg.sigma_w_sq).sqrt();
    let mut a = DMatrix::zeros(n, n);
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let u: f64 = rng.random();
            let z: f64 = rng.sample(StandardNormal);
            a[(i, j)] = if u < p { T::one() } else { T::zero() };
            w[(i, j)] = lit(sd * z);
        }
    }
    NetworkParams::new(a, w)
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius<T: Real>(b: &DMatrix<T>) -> T {
    if b.nrows() == 0 {
        return T::zero();
    }
    b.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re * z.re + z.im * z.im).sqrt())
        .fold(T::zero(), |acc, v| acc.max(v))
}

/// Draws observations from the generative model on `grid`.
///
/// Each node gets an independent GP draw `z_i`; a fresh `eps_f ~ N(0, σ_f² I)`
/// is drawn at every time point; `f(t) = G (z(t) + B eps_f(t))`; and
/// `y = f + eps_y`. Zero noise variances are allowed here.
pub fn simulate_observations<T: Real>(
    params: &NetworkParams<T>,
    hyper: &ModelHyper<T>,
    grid: &TimeGrid<T>,
    seed: u64,
) -> Result<ObservationGrid<T>> {
    hyper.kernel.validate()?;
    if hyper.sigma_y_sq < T::zero() || hyper.sigma_f_sq < T::zero() {
        return Err(Error::InvalidConfig("noise variances must be nonnegative".into()));
    }
    let s = StructuralMatrices::from_params(params)?;
    let n = params.n_nodes();
    let tlen = grid.len();
    let (chol, _) = chol_with_jitter(&kernel_matrix(grid, &hyper.kernel))?;

    let mut rng = rng::stream(seed, &[TAG_SIMULATE]);
    let mut normal = |count: usize| -> DVector<T> {
        DVector::from_iterator(count, (0..count).map(|_| lit(rng.sample::<f64, _>(StandardNormal))))
    };

    // z: T x N, one GP draw per column.
    let mut z = DMatrix::zeros(tlen, n);
    for i in 0..n {
        z.set_column(i, &(&chol * normal(tlen)));
    }
    let sf = hyper.sigma_f_sq.sqrt();
    let sy = hyper.sigma_y_sq.sqrt();
    let mut y = DMatrix::zeros(tlen, n);
    for t in 0..tlen {
        let eps_f = normal(n) * sf;
        let zt = z.row(t).transpose();
        let f = &s.inverse * (zt + &s.coupling * eps_f);
        let eps_y = normal(n) * sy;
        y.set_row(t, &(f + eps_y).transpose());
    }
    ObservationGrid::new(y, grid.clone())
}
