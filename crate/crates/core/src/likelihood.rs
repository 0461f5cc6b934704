//! Conditional log marginal likelihood `log p(y | A, W)`.
//!
//! Observations are stored as a `T x N` matrix (rows are times, columns are
//! nodes) and `y = vec(Y)` stacks node columns, so the dense covariance has
//! the node-major layout
//!
//! ```text
//! Σ_y[(i·T + s), (j·T + u)] = K_f[i,j]·K_t[s,u] + (σ_f² E + σ_y² I)[i,j]·δ_su
//! ```
//!
//! Two evaluators are provided: [`log_ml_naive`] factorises `Σ_y` directly
//! (O(n³), n = N·T) and serves as the reference; [`log_ml_kron`] whitens the
//! noise block, diagonalises the whitened node covariance and `K_t`, and
//! never forms an `n x n` matrix (O(N³ + T³ + N·T·(N + T))).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, kernel_matrix_dlog_lengthscale, se_kernel, KernelConfig, TimeGrid};
use crate::network::{symmetrize, NetworkParams, StructuralMatrices};
use crate::scalar::{lit, Real};

/// Largest `N·T` the dense evaluator accepts.
pub const NAIVE_LIMIT: usize = 4000;

/// Eigenvalues of the noise block below this are rejected.
const EIGEN_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper<T> {
    pub kernel: KernelConfig<T>,
    /// Observation noise variance, strictly positive for likelihood evaluation.
    pub sigma_y_sq: T,
    /// Variance of the noise carried along arcs.
    pub sigma_f_sq: T,
}

impl<T: Real> ModelHyper<T> {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.sigma_y_sq > T::zero()) {
            return Err(Error::InvalidConfig("sigma_y_sq must be positive".into()));
        }
        if !(self.sigma_f_sq >= T::zero()) {
            return Err(Error::InvalidConfig("sigma_f_sq must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Synchronised observations: `values[(s, i)]` is node `i` at time `grid[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGrid<T: Real> {
    values: DMatrix<T>,
    grid: TimeGrid<T>,
}

impl<T: Real> ObservationGrid<T> {
    pub fn new(values: DMatrix<T>, grid: TimeGrid<T>) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} observation rows for a grid of {} times",
                values.nrows(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("observations must be finite".into()));
        }
        Ok(Self { values, grid })
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_times(&self) -> usize {
        self.values.nrows()
    }

    /// Column `k` of the result is column `perm[k]` of `self`.
    pub fn permuted_nodes(&self, perm: &[usize]) -> Self {
        let v = DMatrix::from_fn(self.n_times(), self.n_nodes(), |s, k| self.values[(s, perm[k])]);
        Self { values: v, grid: self.grid.clone() }
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self { values: &self.values * factor, grid: self.grid.clone() }
    }
}

fn check_nodes<T: Real>(obs: &ObservationGrid<T>, n: usize) -> Result<()> {
    if obs.n_nodes() != n {
        return Err(Error::DimensionMismatch(format!(
            "observations have {} nodes, network has {}",
            obs.n_nodes(),
            n
        )));
    }
    Ok(())
}

fn log_two_pi<T: Real>() -> T {
    lit::<T>(2.0) * T::pi()
}

/// `σ_f² E + σ_y² I`, symmetrised.
pub fn noise_block<T: Real>(s: &StructuralMatrices<T>, hyper: &ModelHyper<T>) -> DMatrix<T> {
    let n = s.n_nodes();
    let mut m = &s.noise_cov * hyper.sigma_f_sq;
    for i in 0..n {
        m[(i, i)] += hyper.sigma_y_sq;
    }
    symmetrize(&m)
}

/// The full `n x n` covariance of `vec(Y)`.
pub fn dense_covariance<T: Real>(
    grid: &TimeGrid<T>,
    s: &StructuralMatrices<T>,
    hyper: &ModelHyper<T>,
) -> DMatrix<T> {
    let kt = kernel_matrix(grid, &hyper.kernel);
    let sn = noise_block(s, hyper);
    let (n, tl) = (s.n_nodes(), grid.len());
    let mut cov = DMatrix::zeros(n * tl, n * tl);
    for i in 0..n {
        for j in 0..n {
            let kf = s.node_cov[(i, j)];
            for a in 0..tl {
                for b in 0..tl {
                    cov[(i * tl + a, j * tl + b)] = kf * kt[(a, b)];
                }
                cov[(i * tl + a, j * tl + a)] += sn[(i, j)];
            }
        }
    }
    cov
}

/// Reference evaluator: Cholesky of the dense covariance.
pub fn log_ml_naive<T: Real>(
    obs: &ObservationGrid<T>,
    params: &NetworkParams<T>,
    hyper: &ModelHyper<T>,
) -> Result<T> {
    hyper.validate()?;
    check_nodes(obs, params.n_nodes())?;
    let n = obs.n_nodes() * obs.n_times();
    if n > NAIVE_LIMIT {
        return Err(Error::ProblemTooLarge { n, limit: NAIVE_LIMIT });
    }
    let s = StructuralMatrices::from_params(params)?;
    let cov = dense_covariance(obs.grid(), &s, hyper);
    let chol = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite { max_jitter: 0.0 })?;
    let y = DVector::from_column_slice(obs.values().as_slice());
    let log_det = chol.l_dirty().diagonal().iter().fold(T::zero(), |acc, d| acc + d.ln()) * lit(2.0);
    let alpha = chol.solve(&y);
    let quad = y.dot(&alpha);
    Ok(-(log_det + quad + lit::<T>(n as f64) * log_two_pi::<T>().ln()) * lit(0.5))
}

/// `cov(y_i(t), y_j(t2))`.
///
/// The arc-noise and observation-noise terms are white in time, so they only
/// contribute when `t == t2`; this matches the entries of [`dense_covariance`].
pub fn marginal_covariance_entry<T: Real>(
    i: usize,
    j: usize,
    t: T,
    t2: T,
    params: &NetworkParams<T>,
    hyper: &ModelHyper<T>,
) -> Result<T> {
    let n = params.n_nodes();
    if i >= n || j >= n {
        return Err(Error::DimensionMismatch(format!("node index out of range for {n} nodes")));
    }
    let s = StructuralMatrices::from_params(params)?;
    let mut c = s.node_cov[(i, j)] * se_kernel(t, t2, &hyper.kernel);
    if t == t2 {
        c += s.noise_cov[(i, j)] * hyper.sigma_f_sq;
        if i == j {
            c += hyper.sigma_y_sq;
        }
    }
    Ok(c)
}

fn sym_eigen<T: Real>(m: DMatrix<T>, what: &str) -> Result<SymmetricEigen<T, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure(format!("{what} has non-finite entries")));
    }
    SymmetricEigen::try_new(m, T::default_epsilon(), 0)
        .ok_or_else(|| Error::EigenFailure(format!("{what} did not converge")))
}

/// Eigendecomposition of `K_t` together with the rotated data `Q_tᵀ Y`.
///
/// Depends only on the grid, the kernel and the observations, so it is shared
/// by every Monte Carlo sample of one ELBO evaluation.
#[derive(Debug, Clone)]
pub struct TimeSpectrum<T: Real> {
    values: DVector<T>,
    vectors: DMatrix<T>,
    rotated_obs: DMatrix<T>,
    /// `Q_tᵀ (∂K_t / ∂ log ℓ) Q_t`, present when gradients were requested.
    rotated_dlog_ls: Option<DMatrix<T>>,
}

impl<T: Real> TimeSpectrum<T> {
    pub fn new(obs: &ObservationGrid<T>, kernel: &KernelConfig<T>, with_gradient: bool) -> Result<Self> {
        kernel.validate()?;
        let kt = kernel_matrix(obs.grid(), kernel);
        let eig = sym_eigen(kt, "K_t")?;
        let rotated_obs = eig.eigenvectors.tr_mul(obs.values());
        let rotated_dlog_ls = with_gradient.then(|| {
            let d = kernel_matrix_dlog_lengthscale(obs.grid(), kernel);
            eig.eigenvectors.tr_mul(&(d * &eig.eigenvectors))
        });
        Ok(Self { values: eig.eigenvalues, vectors: eig.eigenvectors, rotated_obs, rotated_dlog_ls })
    }

    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.values
    }

    pub fn eigenvectors(&self) -> &DMatrix<T> {
        &self.vectors
    }
}

/// Gradient of the log marginal likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGradient<T: Real> {
    /// `∂ log p / ∂ B`, zero on the diagonal.
    pub coupling: DMatrix<T>,
    pub log_lengthscale: T,
    pub log_sigma_y_sq: T,
    pub log_sigma_f_sq: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KronTerms<T> {
    pub log_ml: T,
    pub log_det: T,
    pub quad: T,
}

/// Core of the fast path, shared by [`log_ml_kron`] and the variational code.
pub fn kron_evaluate<T: Real>(
    time: &TimeSpectrum<T>,
    s: &StructuralMatrices<T>,
    hyper: &ModelHyper<T>,
    with_gradient: bool,
) -> Result<(KronTerms<T>, Option<LikelihoodGradient<T>>)> {
    let n = s.n_nodes();
    let tl = time.values.len();
    if time.rotated_obs.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "observations have {} nodes, network has {n}",
            time.rotated_obs.ncols()
        )));
    }

    // Whiten the noise block: Σ_n = Q_n Λ_n Q_nᵀ, P = Q_n Λ_n^{-1/2}.
    let noise = sym_eigen(noise_block(s, hyper), "noise block")?;
    let floor = lit::<T>(EIGEN_FLOOR);
    if noise.eigenvalues.iter().any(|&l| !(l > floor)) {
        return Err(Error::EigenFailure("noise block is not positive definite".into()));
    }
    let mut whiten = noise.eigenvectors.clone();
    for (k, mut col) in whiten.column_iter_mut().enumerate() {
        col /= noise.eigenvalues[k].sqrt();
    }
    let kf_tilde = symmetrize(&whiten.tr_mul(&(&s.node_cov * &whiten)));
    let kf_eig = sym_eigen(kf_tilde, "whitened node covariance")?;
    let basis = &whiten * &kf_eig.eigenvectors;
    let lf = &kf_eig.eigenvalues;
    let lt = &time.values;

    // Data in the joint eigenbasis and the diagonal of the whitened covariance.
    let rotated = &time.rotated_obs * &basis;
    let denom = DMatrix::from_fn(tl, n, |a, k| lt[a] * lf[k] + T::one());
    if denom.iter().any(|&d| !(d > T::zero())) {
        return Err(Error::EigenFailure("whitened covariance is not positive definite".into()));
    }
    let scaled = rotated.component_div(&denom);

    let log_det = lit::<T>(tl as f64) * noise.eigenvalues.iter().fold(T::zero(), |a, l| a + l.ln())
        + denom.iter().fold(T::zero(), |a, d| a + d.ln());
    let quad = rotated.dot(&scaled);
    let total = lit::<T>((n * tl) as f64);
    let log_ml = -(log_det + quad + total * log_two_pi::<T>().ln()) * lit(0.5);
    let terms = KronTerms { log_ml, log_det, quad };
    if !log_ml.is_finite() {
        return Err(Error::EigenFailure("log marginal likelihood is not finite".into()));
    }
    if !with_gradient {
        return Ok((terms, None));
    }

    let half = lit::<T>(0.5);
    // Per-eigencolumn traces of Σ_y^{-1} blocks.
    let mut trace_kt = DVector::zeros(n);
    let mut trace_id = DVector::zeros(n);
    for k in 0..n {
        for a in 0..tl {
            trace_kt[k] += lt[a] / denom[(a, k)];
            trace_id[k] += T::one() / denom[(a, k)];
        }
    }
    // ∂L/∂K_f = ½ V (Z̃ᵀ Λ_t Z̃ − diag c) Vᵀ and ∂L/∂Σ_n = ½ V (Z̃ᵀ Z̃ − diag d) Vᵀ.
    let mut weighted = scaled.clone();
    for (a, mut row) in weighted.row_iter_mut().enumerate() {
        row *= lt[a];
    }
    let mut inner_f = scaled.tr_mul(&weighted);
    let mut inner_n = scaled.tr_mul(&scaled);
    for k in 0..n {
        inner_f[(k, k)] -= trace_kt[k];
        inner_n[(k, k)] -= trace_id[k];
    }
    let grad_kf = symmetrize(&(&basis * inner_f * basis.transpose())) * half;
    let grad_noise = symmetrize(&(&basis * inner_n * basis.transpose())) * half;

    // Chain to B through K_f = G Gᵀ and E = (G B)(G B)ᵀ.
    let grad_e = &grad_noise * hyper.sigma_f_sq;
    let grad_gb = &grad_e * &s.inv_coupling * lit::<T>(2.0);
    let grad_g = &grad_kf * &s.inverse * lit::<T>(2.0) + &grad_gb * s.coupling.transpose();
    let mut grad_b = s.inverse.tr_mul(&grad_gb) + s.inverse.tr_mul(&grad_g) * s.inverse.transpose();
    for i in 0..n {
        grad_b[(i, i)] = T::zero();
    }

    let log_sigma_y_sq = hyper.sigma_y_sq * grad_noise.trace();
    let log_sigma_f_sq = hyper.sigma_f_sq * grad_noise.dot(&s.noise_cov);
    let log_lengthscale = match &time.rotated_dlog_ls {
        Some(m) => {
            let mut data_term = T::zero();
            let proj = m * &scaled;
            for k in 0..n {
                data_term += lf[k] * scaled.column(k).dot(&proj.column(k));
            }
            let mut trace_term = T::zero();
            for a in 0..tl {
                let e = (0..n).fold(T::zero(), |acc, k| acc + lf[k] / denom[(a, k)]);
                trace_term += e * m[(a, a)];
            }
            (data_term - trace_term) * half
        }
        None => {
            return Err(Error::InvalidConfig(
                "time spectrum was built without gradient support".into(),
            ))
        }
    };

    Ok((terms, Some(LikelihoodGradient { coupling: grad_b, log_lengthscale, log_sigma_y_sq, log_sigma_f_sq })))
}

/// Fast-path log marginal likelihood; agrees with [`log_ml_naive`].
pub fn log_ml_kron<T: Real>(
    obs: &ObservationGrid<T>,
    params: &NetworkParams<T>,
    hyper: &ModelHyper<T>,
) -> Result<T> {
    hyper.validate()?;
    check_nodes(obs, params.n_nodes())?;
    let s = StructuralMatrices::from_params(params)?;
    let time = TimeSpectrum::new(obs, &hyper.kernel, false)?;
    Ok(kron_evaluate(&time, &s, hyper, false)?.0.log_ml)
}

/// Fast-path value with its gradient with respect to `B` and the log hyperparameters.
pub fn log_ml_kron_with_gradient<T: Real>(
    obs: &ObservationGrid<T>,
    params: &NetworkParams<T>,
    hyper: &ModelHyper<T>,
) -> Result<(T, LikelihoodGradient<T>)> {
    hyper.validate()?;
    check_nodes(obs, params.n_nodes())?;
    let s = StructuralMatrices::from_params(params)?;
    let time = TimeSpectrum::new(obs, &hyper.kernel, true)?;
    let (terms, grad) = kron_evaluate(&time, &s, hyper, true)?;
    Ok((terms.log_ml, grad.expect("gradient requested")))
}

/// Fast-path log determinant of `Σ_y`, exposed for diagnostics.
pub fn log_det_kron<T: Real>(
    obs: &ObservationGrid<T>,
    params: &NetworkParams<T>,
    hyper: &ModelHyper<T>,
) -> Result<T> {
    hyper.validate()?;
    check_nodes(obs, params.n_nodes())?;
    let s = StructuralMatrices::from_params(params)?;
    let time = TimeSpectrum::new(obs, &hyper.kernel, false)?;
    Ok(kron_evaluate(&time, &s, hyper, false)?.0.log_det)
}
