//! Exact Gaussian-process regression. O(n³); serves as the reference the
//! sparse variational model is checked against.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::kernels::{jittered_cholesky_from, kernel_matrix, ArdKernelParams, JitteredFactor, DEFAULT_JITTER};
use crate::linalg;
use crate::svgp::{GaussianMoments, Variance};

/// Largest training set exact inference accepts.
pub const MAX_EXACT_POINTS: usize = 4096;

#[derive(Debug, Clone)]
pub struct ExactGpModel {
    pub inputs: Array2<f64>,
    pub targets: Array1<f64>,
    pub kernel: ArdKernelParams,
    pub log_noise_variance: f64,
}

impl ExactGpModel {
    pub fn new(
        inputs: Array2<f64>,
        targets: Array1<f64>,
        kernel: ArdKernelParams,
        noise_variance: f64,
    ) -> Result<Self> {
        let m = ExactGpModel {
            inputs,
            targets,
            kernel,
            log_noise_variance: noise_variance.ln(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    fn validate(&self) -> Result<()> {
        let n = self.inputs.nrows();
        if n == 0 {
            return Err(Error::input("exact GP needs at least one training point"));
        }
        if n > MAX_EXACT_POINTS {
            return Err(Error::input(format!(
                "exact GP limited to {MAX_EXACT_POINTS} points (got {n}); use the sparse model"
            )));
        }
        if self.targets.len() != n {
            return Err(Error::shape(format!("{} inputs but {} targets", n, self.targets.len())));
        }
        if self.inputs.ncols() != self.kernel.dim() {
            return Err(Error::shape(format!(
                "inputs have {} columns, kernel has {} length scales",
                self.inputs.ncols(),
                self.kernel.dim()
            )));
        }
        if self.targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("targets must be finite"));
        }
        if !(self.noise_variance() > 0.0) {
            return Err(Error::config("noise variance must be positive"));
        }
        self.kernel.validate()
    }

    /// Factor of K + σ²I. Jitter is only added when the plain factorization fails.
    fn factor(&self) -> Result<JitteredFactor> {
        self.validate()?;
        let mut k = kernel_matrix(self.inputs.view(), self.inputs.view(), &self.kernel)?;
        let s2 = self.noise_variance();
        k.diag_mut().mapv_inplace(|d| d + s2);
        jittered_cholesky_from(k.view(), DEFAULT_JITTER, true, "K_XX + noise")
    }

    /// −½ yᵀ(K+σ²I)⁻¹y − ½ log|K+σ²I| − (n/2) log 2π.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let f = self.factor()?;
        let n = self.targets.len() as f64;
        let alpha = linalg::solve_lower_vec(f.factor.view(), self.targets.view());
        let fit = -0.5 * alpha.dot(&alpha);
        let complexity = -0.5 * linalg::log_det_from_cholesky(f.factor.view());
        Ok(fit + complexity - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }

    /// Data-fit and complexity terms separately, in that order.
    pub fn log_marginal_terms(&self) -> Result<(f64, f64)> {
        let f = self.factor()?;
        let alpha = linalg::solve_lower_vec(f.factor.view(), self.targets.view());
        Ok((
            -0.5 * alpha.dot(&alpha),
            -0.5 * linalg::log_det_from_cholesky(f.factor.view()),
        ))
    }

    /// Posterior over latent values at `queries`, with full covariance.
    pub fn predict(&self, queries: ArrayView2<f64>) -> Result<GaussianMoments> {
        if queries.ncols() != self.kernel.dim() {
            return Err(Error::shape(format!(
                "queries have {} columns, expected {}",
                queries.ncols(),
                self.kernel.dim()
            )));
        }
        let f = self.factor()?;
        let l = f.factor.view();
        let k_xs = kernel_matrix(self.inputs.view(), queries, &self.kernel)?;
        let k_ss = kernel_matrix(queries, queries, &self.kernel)?;
        let weights = linalg::cholesky_solve_vec(l, self.targets.view());
        let mean = k_xs.t().dot(&weights);
        let v = linalg::solve_lower(l, k_xs.view());
        let mut cov = &k_ss - &v.t().dot(&v);
        linalg::symmetrize(&mut cov);
        Ok(GaussianMoments::new(mean, Variance::Full(cov)))
    }
}
