//! Squared-exponential covariance over a shared time grid.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig<T> {
    pub lengthscale: T,
    pub signal_variance: T,
}

impl<T: Real> KernelConfig<T> {
    pub fn new(lengthscale: T, signal_variance: T) -> Result<Self> {
        let cfg = Self { lengthscale, signal_variance };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > T::zero()) || !(self.signal_variance > T::zero()) {
            return Err(Error::InvalidConfig(format!(
                "kernel lengthscale and signal variance must be positive (got {}, {})",
                to_f64(self.lengthscale),
                to_f64(self.signal_variance)
            )));
        }
        Ok(())
    }
}

/// Strictly increasing observation times shared by all nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    times: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(times: Vec<T>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidConfig("time grid is empty".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("time grid must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    /// `0, 1, ..., len - 1`.
    pub fn regular(len: usize) -> Result<Self> {
        Self::new((0..len).map(|i| lit(i as f64)).collect())
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[inline]
pub fn se_kernel<T: Real>(t: T, t2: T, cfg: &KernelConfig<T>) -> T {
    let d = t - t2;
    cfg.signal_variance * (-(d * d) / (lit::<T>(2.0) * cfg.lengthscale * cfg.lengthscale)).exp()
}

/// `K_t[s, u] = k(t_s, t_u)`. Only the upper triangle is evaluated and then
/// mirrored, so the result is bit-symmetric.
pub fn kernel_matrix<T: Real>(grid: &TimeGrid<T>, cfg: &KernelConfig<T>) -> DMatrix<T> {
    let t = grid.times();
    let n = t.len();
    let mut k = DMatrix::zeros(n, n);
    for s in 0..n {
        k[(s, s)] = cfg.signal_variance;
        for u in (s + 1)..n {
            let v = se_kernel(t[s], t[u], cfg);
            k[(s, u)] = v;
            k[(u, s)] = v;
        }
    }
    k
}

/// Derivative of [`kernel_matrix`] with respect to `log(lengthscale)`.
pub fn kernel_matrix_dlog_lengthscale<T: Real>(
    grid: &TimeGrid<T>,
    cfg: &KernelConfig<T>,
) -> DMatrix<T> {
    let t = grid.times();
    let n = t.len();
    let l2 = cfg.lengthscale * cfg.lengthscale;
    let mut k = DMatrix::zeros(n, n);
    for s in 0..n {
        for u in (s + 1)..n {
            let d = t[s] - t[u];
            let v = se_kernel(t[s], t[u], cfg) * d * d / l2;
            k[(s, u)] = v;
            k[(u, s)] = v;
        }
    }
    k
}

/// Cholesky factor of `K + jitter * I`.
///
/// Tries `jitter = 0` first, then `1e-10 * mean(diag K)` growing by ×10 up to
/// `1e-4 * mean(diag K)`. Returns the lower factor and the jitter that worked.
pub fn chol_with_jitter<T: Real>(k: &DMatrix<T>) -> Result<(DMatrix<T>, T)> {
    if !k.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    let n = k.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), T::zero()));
    }
    let mean_diag = k.diagonal().sum() / lit(n as f64);
    let mut levels = vec![T::zero()];
    let mut rel = 1e-10;
    while rel <= 1e-4 * (1.0 + 1e-9) {
        levels.push(mean_diag * lit(rel));
        rel *= 10.0;
    }
    for jitter in levels {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(kj) {
            let l = ch.l();
            if l.iter().all(|v| v.is_finite()) {
                return Ok((l, jitter));
            }
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter: to_f64(mean_diag) * 1e-4 })
}
