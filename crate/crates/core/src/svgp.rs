//! Sparse variational Gaussian processes over deep-kernel features.
//!
//! Each output dimension owns a head `q(f_Z) = N(m, S)` with private inducing
//! inputs in feature space and a private noise variance; the feature net and
//! the ARD kernel are shared. With a Gaussian likelihood both ELBO terms are
//! closed form, so the objective and its reverse-mode gradient are computed
//! directly from a single factorization of `K_ZZ` per head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::deepnet::{FeedForwardNet, NetGradients};
use crate::error::{Error, Result};
use crate::kernels::{jittered_cholesky, kernel_matrix, kernel_matrix_backward, ArdKernelParams};
use crate::linalg;
use crate::vc::F0Stats;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Variance part of [`GaussianMoments`].
#[derive(Debug, Clone, PartialEq)]
pub enum Variance {
    Diagonal(Array1<f64>),
    Full(Array2<f64>),
}

/// Mean and (diagonal or full) covariance of a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Array1<f64>,
    pub variance: Variance,
}

impl GaussianMoments {
    /// Marginal variances are clamped at zero.
    pub fn new(mean: Array1<f64>, variance: Variance) -> Self {
        let variance = match variance {
            Variance::Diagonal(v) => Variance::Diagonal(v.mapv(|x| x.max(0.0))),
            Variance::Full(mut c) => {
                c.diag_mut().mapv_inplace(|x| x.max(0.0));
                Variance::Full(c)
            }
        };
        GaussianMoments { mean, variance }
    }

    pub fn variance_diag(&self) -> Array1<f64> {
        match &self.variance {
            Variance::Diagonal(v) => v.clone(),
            Variance::Full(c) => c.diag().to_owned(),
        }
    }

    pub fn full_covariance(&self) -> Option<&Array2<f64>> {
        match &self.variance {
            Variance::Full(c) => Some(c),
            Variance::Diagonal(_) => None,
        }
    }
}

/// `q(f_Z) = N(m, S)` with `S = L Lᵀ`. The diagonal of `L` is stored as logs
/// so unconstrained updates keep `S` positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// Z, M × Q, in feature space.
    pub inducing_inputs: Array2<f64>,
    /// m
    pub mean: Array1<f64>,
    /// Lower triangle of L with log-diagonal; the strict upper part is zero.
    pub chol_s_raw: Array2<f64>,
}

impl VariationalState {
    /// Builds a state from an explicit lower Cholesky factor of S.
    pub fn from_cholesky(
        inducing_inputs: Array2<f64>,
        mean: Array1<f64>,
        chol_s: ArrayView2<f64>,
    ) -> Result<Self> {
        let m = inducing_inputs.nrows();
        if m == 0 {
            return Err(Error::config("at least one inducing input is required"));
        }
        if mean.len() != m || chol_s.nrows() != m || chol_s.ncols() != m {
            return Err(Error::shape(format!(
                "variational state: {m} inducing inputs, mean {}, chol_S {}x{}",
                mean.len(),
                chol_s.nrows(),
                chol_s.ncols()
            )));
        }
        let mut raw = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..i {
                raw[[i, j]] = chol_s[[i, j]];
            }
            let d = chol_s[[i, i]];
            if !(d > 0.0) {
                return Err(Error::config(format!("chol_S diagonal entry {i} is not positive")));
            }
            raw[[i, i]] = d.ln();
        }
        let s = VariationalState {
            inducing_inputs,
            mean,
            chol_s_raw: raw,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.nrows()
    }

    /// L with the diagonal exponentiated.
    pub fn chol_s(&self) -> Array2<f64> {
        let m = self.num_inducing();
        let mut l = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..i {
                l[[i, j]] = self.chol_s_raw[[i, j]];
            }
            l[[i, i]] = self.chol_s_raw[[i, i]].exp();
        }
        l
    }

    /// S = L Lᵀ.
    pub fn covariance(&self) -> Array2<f64> {
        let l = self.chol_s();
        l.dot(&l.t())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_inducing();
        if m == 0 {
            return Err(Error::config("at least one inducing input is required"));
        }
        if self.mean.len() != m || self.chol_s_raw.dim() != (m, m) {
            return Err(Error::shape("variational state arrays disagree on M"));
        }
        if self.inducing_inputs.iter().any(|v| !v.is_finite())
            || self.mean.iter().any(|v| !v.is_finite())
            || self.chol_s_raw.iter().any(|v| !v.is_finite())
        {
            return Err(Error::numerical("variational state contains non-finite values"));
        }
        Ok(())
    }
}

/// One output dimension: variational state plus noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgpHead {
    pub state: VariationalState,
    pub log_noise_variance: f64,
}

impl SvgpHead {
    pub fn new(state: VariationalState, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(Error::config("noise variance must be positive"));
        }
        Ok(SvgpHead {
            state,
            log_noise_variance: noise_variance.ln(),
        })
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    /// Prior-matched initialization: `m = 0`, `L = scale · chol(K_ZZ)`.
    pub fn from_inducing(
        inducing: Array2<f64>,
        kernel: &ArdKernelParams,
        chol_scale: f64,
        noise_variance: f64,
        jitter_base: f64,
    ) -> Result<Self> {
        let kzz = kernel_matrix(inducing.view(), inducing.view(), kernel)?;
        let f = jittered_cholesky(kzz.view(), jitter_base, "K_ZZ (init)")?;
        let m = inducing.nrows();
        let state = VariationalState::from_cholesky(inducing, Array1::zeros(m), (f.factor * chol_scale).view())?;
        SvgpHead::new(state, noise_variance)
    }
}

impl SvgpHead {
    /// Replaces `(m, S)` with the optimal Gaussian for the current kernel,
    /// inducing inputs and noise given `(features, targets)`:
    /// `S = K A⁻¹ K`, `m = σ⁻² K A⁻¹ K_ZX y` with `A = K + σ⁻² K_ZX K_XZ`
    /// (K = jittered K_ZZ).
    pub fn fit_optimal(
        &mut self,
        kernel: &ArdKernelParams,
        features: ArrayView2<f64>,
        targets: ArrayView1<f64>,
        jitter_base: f64,
    ) -> Result<()> {
        if features.nrows() != targets.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        let z = self.state.inducing_inputs.view();
        let kzz = kernel_matrix(z, z, kernel)?;
        let lk = jittered_cholesky(kzz.view(), jitter_base, "K_ZZ (fit)")?.factor;
        let kzx = kernel_matrix(z, features, kernel)?;
        let prec = 1.0 / self.noise_variance();
        // Whitened: P = L_K⁻¹K_ZX, Ã = I + σ⁻²PPᵀ, so A = L_K Ã L_Kᵀ and
        // S = L_K Ã⁻¹ L_Kᵀ. Ã has eigenvalues ≥ 1 however badly K_ZZ is
        // conditioned.
        let p = linalg::solve_lower(lk.view(), kzx.view());
        let mut a = p.dot(&p.t()) * prec;
        a.diag_mut().mapv_inplace(|v| v + 1.0);
        linalg::symmetrize(&mut a);
        let la = linalg::cholesky(a.view())
            .ok_or_else(|| Error::numerical("I + P Pᵀ / noise is not positive definite"))?;
        let w = linalg::cholesky_solve_vec(la.view(), p.dot(&targets).view());
        let mean = lk.dot(&w) * prec;
        // S = CᵀC with C = L_Ã⁻¹ L_Kᵀ, factored through C
        let c = linalg::solve_lower(la.view(), lk.t());
        let ls = linalg::gram_cholesky(c.view());
        for i in 0..ls.nrows() {
            if !(ls[[i, i]] > 0.0) {
                return Err(Error::numerical(format!("optimal S is singular at pivot {i}")));
            }
        }
        self.state = VariationalState::from_cholesky(self.state.inducing_inputs.clone(), mean, ls.view())?;
        Ok(())
    }
}

/// Picks `count` distinct rows of `features` and perturbs them with
/// N(0, perturbation²) noise.
pub fn init_inducing<R: Rng>(
    features: ArrayView2<f64>,
    count: usize,
    perturbation: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let n = features.nrows();
    if count == 0 || count > n {
        return Err(Error::config(format!("cannot pick {count} inducing inputs from {n} rows")));
    }
    let mut idx = sample(rng, n, count).into_vec();
    idx.sort_unstable();
    let mut z = features.select(Axis(0), &idx);
    for v in z.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += perturbation * e;
    }
    Ok(z)
}

/// Per-dimension affine input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: Array1::zeros(dim),
            scale: Array1::ones(dim),
        }
    }

    /// Column means and population standard deviations (constant columns get scale 1).
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::input("cannot fit a normalizer on zero rows"));
        }
        let mean = data.mean_axis(Axis(0)).expect("nonempty");
        let scale = data.var_axis(Axis(0), 0.0).mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        Ok(Normalizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "normalizer expects {} columns, got {}",
                self.dim(),
                data.ncols()
            )));
        }
        Ok((&data - &self.mean) / &self.scale)
    }
}

/// The complete conversion function: shared net and kernel, one head per
/// output dimension, plus the normalization and F0 statistics needed to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdklModel {
    pub net: FeedForwardNet,
    pub kernel: ArdKernelParams,
    pub heads: Vec<SvgpHead>,
    pub input_normalizer: Normalizer,
    pub output_centers: Array1<f64>,
    pub f0_source: Option<F0Stats>,
    pub f0_target: Option<F0Stats>,
    pub jitter_base: f64,
    pub warping_alpha: f64,
}

impl SvdklModel {
    /// Model with identity normalization, zero centers and no F0 statistics.
    pub fn new(net: FeedForwardNet, kernel: ArdKernelParams, heads: Vec<SvgpHead>, jitter_base: f64) -> Result<Self> {
        let d = net.input_dim();
        let h = heads.len();
        let m = SvdklModel {
            net,
            kernel,
            heads,
            input_normalizer: Normalizer::identity(d),
            output_centers: Array1::zeros(h),
            f0_source: None,
            f0_target: None,
            jitter_base,
            warping_alpha: crate::vc::DEFAULT_ALPHA,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::config("model needs at least one head"));
        }
        let q = self.net.output_dim();
        if q != self.kernel.dim() {
            return Err(Error::config(format!(
                "net output size {q} does not match {} ARD length scales",
                self.kernel.dim()
            )));
        }
        self.kernel.validate()?;
        for (d, h) in self.heads.iter().enumerate() {
            h.state.validate()?;
            if h.state.inducing_inputs.ncols() != q {
                return Err(Error::config(format!(
                    "head {d}: inducing inputs have {} columns, feature space has {q}",
                    h.state.inducing_inputs.ncols()
                )));
            }
            if !h.log_noise_variance.is_finite() {
                return Err(Error::config(format!("head {d}: non-finite noise variance")));
            }
        }
        if self.input_normalizer.dim() != self.input_dim() || self.input_normalizer.scale.len() != self.input_dim() {
            return Err(Error::config("input normalizer does not match the net input size"));
        }
        if self.output_centers.len() != self.heads.len() {
            return Err(Error::config("output centers do not match the head count"));
        }
        if !(self.jitter_base > 0.0) {
            return Err(Error::config("jitter base must be positive"));
        }
        Ok(())
    }

    /// Normalized inputs mapped through the net.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xn = self.input_normalizer.apply(x)?;
        self.net.forward(xn.view())
    }

    fn check_pair(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::input("ELBO needs at least one row"));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::shape(format!("{} input rows but {} target rows", x.nrows(), y.nrows())));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "inputs have {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if y.ncols() != self.output_dim() {
            return Err(Error::shape(format!(
                "targets have {} columns, model has {} heads",
                y.ncols(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Per-head ELBO contributions with the data-fit sum scaled by `scale`.
    fn head_elbos(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, scale: f64) -> Result<Vec<f64>> {
        self.check_pair(x, y)?;
        let h = self.features(x)?;
        self.heads
            .iter()
            .enumerate()
            .map(|(d, head)| {
                let t = &y.column(d) - self.output_centers[d];
                head_objective(head, &self.kernel, h.view(), t.view(), scale, self.jitter_base, false, d)
                    .map(|r| r.elbo)
            })
            .collect()
    }

    /// Full-data ELBO per output dimension.
    pub fn elbo_per_head(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.head_elbos(x, y, 1.0)
    }

    /// Σ_d [Σ_i E_q log p(y_id | f) − KL_d].
    pub fn elbo_full(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
        Ok(self.elbo_per_head(x, y)?.iter().sum())
    }

    /// Unbiased minibatch estimate: the data term is rescaled by `total_n / |B|`.
    pub fn elbo_minibatch(&self, xb: ArrayView2<f64>, yb: ArrayView2<f64>, total_n: usize) -> Result<f64> {
        let b = xb.nrows();
        if b == 0 || total_n == 0 {
            return Err(Error::input(format!("empty minibatch ({b} of {total_n})")));
        }
        Ok(self.head_elbos(xb, yb, total_n as f64 / b as f64)?.iter().sum())
    }

    /// Predictive moments for each head; means include the output centers.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<GaussianMoments>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "inputs have {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let h = self.features(x)?;
        self.heads
            .iter()
            .enumerate()
            .map(|(d, head)| {
                let mut g = predict_head(head, &self.kernel, h.view(), self.jitter_base, false)?;
                g.mean += self.output_centers[d];
                Ok(g)
            })
            .collect()
    }

    /// Predictive means as a `t × heads` matrix.
    pub fn predict_means(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let preds = self.predict(x)?;
        let mut out = Array2::<f64>::zeros((x.nrows(), preds.len()));
        for (d, g) in preds.iter().enumerate() {
            out.column_mut(d).assign(&g.mean);
        }
        Ok(out)
    }
}

/// log N(y | μ, σ²) − var / (2σ²): the Gaussian expected log-likelihood
/// under f ~ N(μ, var).
pub fn expected_log_lik(mu: f64, var: f64, y: f64, noise_var: f64) -> f64 {
    let r = y - mu;
    -0.5 * (LN_2PI + noise_var.ln()) - (r * r + var) / (2.0 * noise_var)
}

struct HeadFactors {
    kzz_chol: Array2<f64>,
    kzz_inv: Array2<f64>,
    kzz_added: f64,
    escalations: u32,
}

fn factor_head(head: &SvgpHead, kernel: &ArdKernelParams, jitter_base: f64, d: usize) -> Result<(Array2<f64>, HeadFactors)> {
    let z = head.state.inducing_inputs.view();
    let kzz = kernel_matrix(z, z, kernel)?;
    let f = jittered_cholesky(kzz.view(), jitter_base, &format!("K_ZZ (head {d})"))?;
    let kzz_inv = linalg::cholesky_inverse(f.factor.view());
    Ok((
        kzz,
        HeadFactors {
            kzz_chol: f.factor,
            kzz_inv,
            kzz_added: f.added,
            escalations: f.escalations,
        },
    ))
}

/// q(f_X) marginals: μ = ψm, diag Σ = diag K_XX − diag ψ(K_ZZ − S)ψᵀ, ψ = K_XZ K_ZZ⁻¹.
pub fn marginal_q(
    head: &SvgpHead,
    kernel: &ArdKernelParams,
    features: ArrayView2<f64>,
    jitter_base: f64,
) -> Result<GaussianMoments> {
    predict_head(head, kernel, features, jitter_base, false)
}

/// Predictive distribution of one head at feature-space points (no output
/// center applied). `full` selects a full covariance instead of marginals.
pub fn predict_head(
    head: &SvgpHead,
    kernel: &ArdKernelParams,
    features: ArrayView2<f64>,
    jitter_base: f64,
    full: bool,
) -> Result<GaussianMoments> {
    if features.ncols() != kernel.dim() {
        return Err(Error::shape(format!(
            "features have {} columns, kernel expects {}",
            features.ncols(),
            kernel.dim()
        )));
    }
    let (_, f) = factor_head(head, kernel, jitter_base, 0)?;
    let kxz = kernel_matrix(features, head.state.inducing_inputs.view(), kernel)?;
    let psi = kxz.dot(&f.kzz_inv);
    let mean = psi.dot(&head.state.mean);
    let psi_l = psi.dot(&head.state.chol_s());
    let sf2 = kernel.signal_variance();
    if full {
        let kxx = kernel_matrix(features, features, kernel)?;
        let mut cov = kxx - psi.dot(&kxz.t()) + psi_l.dot(&psi_l.t());
        linalg::symmetrize(&mut cov);
        Ok(GaussianMoments::new(mean, Variance::Full(cov)))
    } else {
        let var = Array1::from_shape_fn(features.nrows(), |i| {
            let a: f64 = psi.row(i).dot(&kxz.row(i));
            let b: f64 = psi_l.row(i).dot(&psi_l.row(i));
            sf2 - a + b
        });
        Ok(GaussianMoments::new(mean, Variance::Diagonal(var)))
    }
}

/// KL[q(f_Z) ‖ p(f_Z)] = ½[tr(K⁻¹S) + mᵀK⁻¹m − M + log|K| − log|S|].
pub fn kl_q_p(head: &SvgpHead, kernel: &ArdKernelParams, jitter_base: f64) -> Result<f64> {
    if head.state.inducing_inputs.ncols() != kernel.dim() {
        return Err(Error::shape("inducing inputs do not match the kernel dimension"));
    }
    let (_, f) = factor_head(head, kernel, jitter_base, 0)?;
    let ls = head.state.chol_s();
    let wl = f.kzz_inv.dot(&ls);
    Ok(kl_from_factors(&head.state, &f, &ls, &wl))
}

/// `wl = K_ZZ⁻¹ L`; tr(K⁻¹S) = Σ (K⁻¹L) ∘ L.
fn kl_from_factors(state: &VariationalState, f: &HeadFactors, ls: &Array2<f64>, wl: &Array2<f64>) -> f64 {
    let m = state.num_inducing() as f64;
    let tr: f64 = (wl * ls).sum();
    let alpha = f.kzz_inv.dot(&state.mean);
    let maha = state.mean.dot(&alpha);
    let logdet_k = linalg::log_det_from_cholesky(f.kzz_chol.view());
    let logdet_s = 2.0 * state.chol_s_raw.diag().sum();
    0.5 * (tr + maha - m + logdet_k - logdet_s)
}

/// Gradient of one head's ELBO contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    /// ∂/∂ feature rows of the batch.
    pub features: Array2<f64>,
    pub log_signal_variance: f64,
    pub log_length_scales: Array1<f64>,
    pub inducing_inputs: Array2<f64>,
    pub mean: Array1<f64>,
    /// ∂/∂ `chol_s_raw` (diagonal entries w.r.t. their logs).
    pub chol_s_raw: Array2<f64>,
    pub log_noise_variance: f64,
}

pub(crate) struct HeadObjective {
    pub elbo: f64,
    pub grad: Option<HeadGradient>,
    pub escalations: u32,
}

/// ELBO contribution of one head on a batch of features:
/// `scale · Σ_i E_q log p(y_i | f_i) − KL`, optionally with its gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_objective(
    head: &SvgpHead,
    kernel: &ArdKernelParams,
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    scale: f64,
    jitter_base: f64,
    want_grad: bool,
    d: usize,
) -> Result<HeadObjective> {
    let state = &head.state;
    let z = state.inducing_inputs.view();
    let (kzz, f) = factor_head(head, kernel, jitter_base, d)?;
    let w = &f.kzz_inv;
    let kxz = kernel_matrix(features, z, kernel)?;
    let psi = kxz.dot(w);
    let alpha = w.dot(&state.mean);
    let mu = kxz.dot(&alpha);
    let ls = state.chol_s();
    let wl = w.dot(&ls);
    let psi_l = psi.dot(&ls);
    let sf2 = kernel.signal_variance();
    let noise = head.noise_variance();
    let b = features.nrows();

    let var = Array1::from_shape_fn(b, |i| {
        sf2 - psi.row(i).dot(&kxz.row(i)) + psi_l.row(i).dot(&psi_l.row(i))
    });
    let resid = &targets - &mu;
    let mut ell_sum = 0.0;
    let mut sq_sum = 0.0;
    for i in 0..b {
        ell_sum += expected_log_lik(mu[i], var[i], targets[i], noise);
        sq_sum += resid[i] * resid[i] + var[i];
    }
    let data_fit = scale * ell_sum;
    let kl = kl_from_factors(state, &f, &ls, &wl);
    let elbo = data_fit - kl;
    if !elbo.is_finite() {
        return Err(Error::numerical(format!("head {d}: non-finite ELBO")));
    }
    if !want_grad {
        return Ok(HeadObjective {
            elbo,
            grad: None,
            escalations: f.escalations,
        });
    }

    let g_mu = resid.mapv(|r| scale * r / noise);
    let g_v = -scale / (2.0 * noise);
    let d_log_noise = scale * (-0.5 * b as f64 + sq_sum / (2.0 * noise));

    // ψ S K⁻¹ = (ψL)(K⁻¹L)ᵀ
    let psi_sw = psi_l.dot(&wl.t());
    // ∂/∂K_XZ = g_μ αᵀ + 2 g_v (ψ S K⁻¹ − ψ)
    let mut g_kxz = (&psi_sw - &psi) * (2.0 * g_v);
    for i in 0..b {
        g_kxz.row_mut(i).scaled_add(g_mu[i], &alpha);
    }
    let psi_t_gmu = psi.t().dot(&g_mu);
    let phi = psi.t().dot(&psi);

    let d_mean = &psi_t_gmu - &alpha;

    // ∂/∂K_ZZ of the data term and of −KL; Φ S K⁻¹ = ψᵀ(ψ S K⁻¹)
    let phi_s_w = psi.t().dot(&psi_sw);
    let w_s_phi = phi_s_w.t().to_owned();
    let mut g_kzz = (&phi - &phi_s_w - &w_s_phi) * g_v;
    for i in 0..g_kzz.nrows() {
        for j in 0..g_kzz.ncols() {
            g_kzz[[i, j]] -= psi_t_gmu[i] * alpha[j];
        }
    }
    let w_s_w = wl.dot(&wl.t());
    g_kzz -= &((w - &w_s_w) * 0.5);
    for i in 0..g_kzz.nrows() {
        for j in 0..g_kzz.ncols() {
            g_kzz[[i, j]] += 0.5 * alpha[i] * alpha[j];
        }
    }

    let gz = kernel_matrix_backward(z, z, kzz.view(), g_kzz.view(), kernel);
    let gx = kernel_matrix_backward(features, z, kxz.view(), g_kxz.view(), kernel);

    let mut d_log_sf2 = gz.log_signal_variance + gx.log_signal_variance;
    d_log_sf2 += f.kzz_added * g_kzz.diag().sum();
    d_log_sf2 += g_v * sf2 * b as f64;
    let d_log_ls = &gz.log_length_scales + &gx.log_length_scales;
    let d_z = &gz.a + &gz.b + &gx.b;

    // S = L Lᵀ ⇒ ∂/∂L = 2 G_S L, restricted to the lower triangle, with
    // G_S = g_v Φ − ½K⁻¹ + ½S⁻¹. The ½S⁻¹ part contributes L⁻ᵀ, whose lower
    // part is diag(1/L_ii): +1 per log-diagonal entry.
    let g_l = psi.t().dot(&psi_l) * (2.0 * g_v) - &wl;
    let m = state.num_inducing();
    let mut d_chol = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..i {
            d_chol[[i, j]] = g_l[[i, j]];
        }
        d_chol[[i, i]] = g_l[[i, i]] * ls[[i, i]] + 1.0;
    }

    Ok(HeadObjective {
        elbo,
        grad: Some(HeadGradient {
            features: gx.a,
            log_signal_variance: d_log_sf2,
            log_length_scales: d_log_ls,
            inducing_inputs: d_z,
            mean: d_mean,
            chol_s_raw: d_chol,
            log_noise_variance: d_log_noise,
        }),
        escalations: f.escalations,
    })
}

/// ELBO estimate and its gradient for a whole model on one batch.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    pub elbo: f64,
    pub net: NetGradients,
    pub log_signal_variance: f64,
    pub log_length_scales: Array1<f64>,
    pub heads: Vec<HeadGradient>,
    /// K_ZZ factorizations performed (one per head).
    pub factorizations: usize,
    pub jitter_escalations: u32,
}

/// Minibatch ELBO (`scale = total_n / |B|`) and gradients for every
/// parameter group. Head terms are reduced in head order.
pub fn elbo_with_gradients(
    model: &SvdklModel,
    xb: ArrayView2<f64>,
    yb: ArrayView2<f64>,
    total_n: usize,
) -> Result<ModelObjective> {
    model.check_pair(xb, yb)?;
    let b = xb.nrows();
    if total_n == 0 {
        return Err(Error::input("total data size must be positive"));
    }
    let scale = total_n as f64 / b as f64;
    let xn = model.input_normalizer.apply(xb)?;
    let h = model.net.forward(xn.view())?;
    let mut elbo = 0.0;
    let mut d_features = Array2::<f64>::zeros(h.raw_dim());
    let mut d_sf2 = 0.0;
    let mut d_ls = Array1::<f64>::zeros(model.kernel.dim());
    let mut heads = Vec::with_capacity(model.heads.len());
    let mut escalations = 0;
    for (d, head) in model.heads.iter().enumerate() {
        let t = &yb.column(d) - model.output_centers[d];
        let r = head_objective(head, &model.kernel, h.view(), t.view(), scale, model.jitter_base, true, d)?;
        let g = r.grad.expect("gradient requested");
        elbo += r.elbo;
        escalations += r.escalations;
        d_features += &g.features;
        d_sf2 += g.log_signal_variance;
        d_ls += &g.log_length_scales;
        heads.push(g);
    }
    let (net_grad, _) = model.net.backward(xn.view(), d_features.view())?;
    Ok(ModelObjective {
        elbo,
        net: net_grad,
        log_signal_variance: d_sf2,
        log_length_scales: d_ls,
        heads,
        factorizations: model.heads.len(),
        jitter_escalations: escalations,
    })
}
