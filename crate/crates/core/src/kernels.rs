//! Squared-exponential ARD covariance and its deep-kernel composition.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::deepnet::{Activation, FeedForwardNet};
use crate::error::{Error, Result};
use crate::linalg;

/// Default relative jitter added to kernel diagonals before factorization.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Number of ×10 escalations tried after the base jitter.
pub const JITTER_ESCALATIONS: u32 = 4;

/// SE-ARD hyperparameters, stored in the log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ArdKernelParams {
    /// log σ_f²
    pub log_signal_variance: f64,
    /// log l_q, one per feature dimension
    pub log_length_scales: Array1<f64>,
}

impl ArdKernelParams {
    pub fn new(signal_variance: f64, length_scales: &[f64]) -> Result<Self> {
        if !(signal_variance > 0.0) || length_scales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::config("kernel parameters must be strictly positive"));
        }
        let p = ArdKernelParams {
            log_signal_variance: signal_variance.ln(),
            log_length_scales: length_scales.iter().map(|l| l.ln()).collect(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Isotropic parameters over `dim` feature dimensions.
    pub fn isotropic(dim: usize, signal_variance: f64, length_scale: f64) -> Result<Self> {
        Self::new(signal_variance, &vec![length_scale; dim])
    }

    pub fn dim(&self) -> usize {
        self.log_length_scales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    /// l_q² for every feature dimension.
    pub fn squared_length_scales(&self) -> Array1<f64> {
        self.log_length_scales.mapv(|v| (2.0 * v).exp())
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_length_scales.is_empty() {
            return Err(Error::config("kernel needs at least one length scale"));
        }
        if !self.log_signal_variance.is_finite()
            || self.log_length_scales.iter().any(|v| !v.is_finite())
        {
            return Err(Error::config("kernel parameters must be finite"));
        }
        Ok(())
    }
}

/// Architecture of the deep kernel: feature net sizes plus conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepKernelSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub jitter_base: f64,
}

impl DeepKernelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        DeepKernelSpec {
            layer_sizes,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Linear,
            jitter_base: DEFAULT_JITTER,
        }
    }

    /// Feature-space dimension Q.
    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::config(
                "deep kernel needs an input size, at least one hidden layer and an output size",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be at least 1"));
        }
        if !(self.jitter_base > 0.0) {
            return Err(Error::config("jitter base must be positive"));
        }
        Ok(())
    }
}

impl Default for DeepKernelSpec {
    fn default() -> Self {
        DeepKernelSpec::new(vec![24, 1000, 500, 50, 20])
    }
}

/// Scaled squared distance Σ_q (a_q − b_q)² / l_q², accumulated in ascending q.
#[inline]
fn scaled_sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>, inv_l2: &Array1<f64>) -> f64 {
    let mut acc = 0.0;
    for q in 0..inv_l2.len() {
        let d = a[q] - b[q];
        acc += d * d * inv_l2[q];
    }
    acc
}

/// σ_f² · exp(−½ Σ_q (a_q − b_q)² / l_q²).
pub fn se_ard(a: ArrayView1<f64>, b: ArrayView1<f64>, p: &ArdKernelParams) -> Result<f64> {
    let q = p.dim();
    if a.len() != q || b.len() != q {
        return Err(Error::shape(format!(
            "se_ard expects vectors of length {q}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let inv_l2 = p.squared_length_scales().mapv(|v| 1.0 / v);
    Ok(p.signal_variance() * (-0.5 * scaled_sq_dist(a, b, &inv_l2)).exp())
}

/// Cross-covariance between the rows of `a` and the rows of `b`.
pub fn kernel_matrix(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    p: &ArdKernelParams,
) -> Result<Array2<f64>> {
    let q = p.dim();
    if a.ncols() != q || b.ncols() != q {
        return Err(Error::shape(format!(
            "kernel_matrix expects {q} columns, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let sf2 = p.signal_variance();
    let inv_l2 = p.squared_length_scales().mapv(|v| 1.0 / v);
    let mut k = Array2::<f64>::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.axis_iter(Axis(0)).enumerate() {
        for (j, rb) in b.axis_iter(Axis(0)).enumerate() {
            k[[i, j]] = sf2 * (-0.5 * scaled_sq_dist(ra, rb, &inv_l2)).exp();
        }
    }
    Ok(k)
}

/// A lower Cholesky factor of `K + ε·mean(diag K)·I` and the relative ε used.
#[derive(Debug, Clone)]
pub struct JitteredFactor {
    pub factor: Array2<f64>,
    /// Relative jitter ε that succeeded.
    pub jitter: f64,
    /// Absolute diagonal term ε·mean(diag).
    pub added: f64,
    /// Number of escalations beyond the first attempt.
    pub escalations: u32,
}

/// Factorizes `mat + ε·mean(diag)·I`, trying ε = base·10^k for k = 0..=4.
///
/// `name` appears in the error when every level fails.
pub fn jittered_cholesky(
    mat: ArrayView2<f64>,
    jitter_base: f64,
    name: &str,
) -> Result<JitteredFactor> {
    jittered_cholesky_from(mat, jitter_base, false, name)
}

/// Like [`jittered_cholesky`], optionally attempting an unjittered factorization first.
pub(crate) fn jittered_cholesky_from(
    mat: ArrayView2<f64>,
    jitter_base: f64,
    try_exact: bool,
    name: &str,
) -> Result<JitteredFactor> {
    let n = mat.nrows();
    if n == 0 || mat.ncols() != n {
        return Err(Error::shape(format!("{name}: expected a nonempty square matrix")));
    }
    let mean_diag = mat.diag().sum() / n as f64;
    if try_exact {
        if let Some(factor) = linalg::cholesky(mat) {
            return Ok(JitteredFactor {
                factor,
                jitter: 0.0,
                added: 0.0,
                escalations: 0,
            });
        }
    }
    let mut eps = jitter_base;
    for level in 0..=JITTER_ESCALATIONS {
        let added = eps * mean_diag;
        let mut shifted = mat.to_owned();
        shifted.diag_mut().mapv_inplace(|d| d + added);
        if let Some(factor) = linalg::cholesky(shifted.view()) {
            return Ok(JitteredFactor {
                factor,
                jitter: eps,
                added,
                escalations: level + u32::from(try_exact),
            });
        }
        eps *= 10.0;
    }
    Err(Error::numerical(format!(
        "{name}: Cholesky factorization failed at maximum jitter {:e}",
        eps / 10.0
    )))
}

/// Stable factor of the kernel matrix of `a` with itself.
pub fn psd_factor(
    a: ArrayView2<f64>,
    p: &ArdKernelParams,
    jitter_base: f64,
) -> Result<JitteredFactor> {
    if a.nrows() == 0 {
        return Err(Error::input("psd_factor needs at least one point"));
    }
    let k = kernel_matrix(a, a, p)?;
    jittered_cholesky(k.view(), jitter_base, "K(A, A)")
}

/// k(M(x_i), M(x_j)) with the SE-ARD kernel applied to net features.
pub fn deep_kernel(
    x_i: ArrayView1<f64>,
    x_j: ArrayView1<f64>,
    net: &FeedForwardNet,
    p: &ArdKernelParams,
) -> Result<f64> {
    if net.output_dim() != p.dim() {
        return Err(Error::config(format!(
            "net output size {} does not match {} length scales",
            net.output_dim(),
            p.dim()
        )));
    }
    let batch = ndarray::stack(Axis(0), &[x_i, x_j]).map_err(|e| Error::shape(e.to_string()))?;
    let h = net.forward(batch.view())?;
    se_ard(h.row(0), h.row(1), p)
}

/// Gradients of a scalar through `K = kernel_matrix(a, b, p)`.
#[derive(Debug, Clone)]
pub struct KernelGrad {
    pub log_signal_variance: f64,
    pub log_length_scales: Array1<f64>,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

/// Back-propagates `upstream = ∂L/∂K` (same shape as `k`) to the kernel
/// parameters and to both input sets. `k` must be `kernel_matrix(a, b, p)`.
pub fn kernel_matrix_backward(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    k: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
    p: &ArdKernelParams,
) -> KernelGrad {
    let q = p.dim();
    let inv_l2 = p.squared_length_scales().mapv(|v| 1.0 / v);
    let mut g_sf = 0.0;
    let mut g_ls = Array1::<f64>::zeros(q);
    let mut ga = Array2::<f64>::zeros(a.raw_dim());
    let mut gb = Array2::<f64>::zeros(b.raw_dim());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let w = upstream[[i, j]] * k[[i, j]];
            if w == 0.0 {
                continue;
            }
            g_sf += w;
            for d in 0..q {
                let diff = a[[i, d]] - b[[j, d]];
                let s = diff * inv_l2[d];
                g_ls[d] += w * diff * s;
                ga[[i, d]] -= w * s;
                gb[[j, d]] += w * s;
            }
        }
    }
    KernelGrad {
        log_signal_variance: g_sf,
        log_length_scales: g_ls,
        a: ga,
        b: gb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepnet::Layer;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn se_ard_zero_distance() {
        let p = ArdKernelParams::new(2.5, &[0.3, 4.0, 1.0]).unwrap();
        let a = array![0.1, -2.0, 7.0];
        assert!((se_ard(a.view(), a.view(), &p).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn se_ard_unit_offset() {
        let p = ArdKernelParams::isotropic(4, 1.0, 1.0).unwrap();
        let a = array![1.0, 0.0, 0.0, 0.0];
        let b = Array1::zeros(4);
        // exp(-0.5) evaluated independently
        assert!((se_ard(a.view(), b.view(), &p).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn se_ard_long_length_scale_limit() {
        let p = ArdKernelParams::isotropic(3, 1.7, 1e8).unwrap();
        let a = array![3.0, -4.0, 10.0];
        let b = array![-2.0, 1.0, 0.0];
        assert!((se_ard(a.view(), b.view(), &p).unwrap() - 1.7).abs() < 1e-9);
    }

    #[test]
    fn se_ard_dimension_mismatch() {
        let p = ArdKernelParams::isotropic(3, 1.0, 1.0).unwrap();
        let a = array![1.0, 2.0];
        assert!(matches!(se_ard(a.view(), a.view(), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn kernel_matrix_single_row() {
        let p = ArdKernelParams::new(0.8, &[1.0, 2.0]).unwrap();
        let a = array![[0.5, 0.5]];
        let k = kernel_matrix(a.view(), a.view(), &p).unwrap();
        assert_eq!(k.shape(), &[1, 1]);
        assert!((k[[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn kernel_matrix_matches_entrywise_loop_and_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ArdKernelParams::new(1.3, &[0.5, 1.2, 2.0]).unwrap();
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let k = kernel_matrix(a.view(), b.view(), &p).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut s = 0.0;
                let ls = [0.5f64, 1.2, 2.0];
                for q in 0..3 {
                    s += (a[[i, q]] - b[[j, q]]).powi(2) / (ls[q] * ls[q]);
                }
                let oracle = 1.3 * (-0.5 * s).exp();
                assert!((k[[i, j]] - oracle).abs() < 1e-14);
            }
        }
        let kt = kernel_matrix(b.view(), a.view(), &p).unwrap();
        assert_eq!(k.t(), kt);
    }

    #[test]
    fn psd_factor_single_point() {
        let p = ArdKernelParams::isotropic(2, 2.0, 1.0).unwrap();
        let a = array![[0.3, 0.1]];
        let f = psd_factor(a.view(), &p, DEFAULT_JITTER).unwrap();
        assert!((f.factor[[0, 0]] - (2.0 * (1.0 + DEFAULT_JITTER)).sqrt()).abs() < 1e-14);
        assert_eq!(f.escalations, 0);
    }

    #[test]
    fn psd_factor_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ArdKernelParams::new(1.5, &[0.7, 1.1]).unwrap();
        let a = random_matrix(&mut rng, 12, 2);
        let f = psd_factor(a.view(), &p, DEFAULT_JITTER).unwrap();
        let mut k = kernel_matrix(a.view(), a.view(), &p).unwrap();
        k.diag_mut().mapv_inplace(|d| d + f.added);
        let r = f.factor.dot(&f.factor.t());
        let err = (&r - &k).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn psd_factor_rank_deficient_escalates() {
        let p = ArdKernelParams::isotropic(1, 1.0, 1.0).unwrap();
        // 40 copies of three points: rank 3, far below n
        let a = Array2::from_shape_fn((120, 1), |(i, _)| (i % 3) as f64);
        let f = psd_factor(a.view(), &p, 1e-16).unwrap();
        assert!(f.jitter > 1e-16);
    }

    #[test]
    fn psd_factor_failure_names_matrix() {
        let k = array![[1.0, 2.0], [2.0, 1.0]];
        let err = jittered_cholesky(k.view(), 1e-6, "K_test").unwrap_err();
        match err {
            Error::Numerical(msg) => assert!(msg.contains("K_test")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deep_kernel_identity_reduces_to_se_ard() {
        let p = ArdKernelParams::new(1.1, &[0.4, 0.9, 1.6]).unwrap();
        let net = FeedForwardNet::identity(3);
        let a = array![0.2, -0.4, 1.0];
        let b = array![1.0, 0.3, -0.5];
        let dk = deep_kernel(a.view(), b.view(), &net, &p).unwrap();
        let direct = se_ard(a.view(), b.view(), &p).unwrap();
        assert_eq!(dk, direct);
        let same = deep_kernel(a.view(), a.view(), &net, &p).unwrap();
        assert!((same - 1.1).abs() < 1e-15);
    }

    #[test]
    fn deep_kernel_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FeedForwardNet::new(
            vec![
                Layer::new(random_matrix(&mut rng, 5, 4), Array1::zeros(5), Activation::Relu),
                Layer::new(random_matrix(&mut rng, 2, 5), array![0.1, -0.2], Activation::Linear),
            ],
            0,
        )
        .unwrap();
        let p = ArdKernelParams::new(0.9, &[0.8, 1.3]).unwrap();
        let a = array![0.5, -0.1, 0.3, 0.9];
        let b = array![-0.6, 0.4, 0.0, 0.2];
        let h = net.forward(ndarray::stack(Axis(0), &[a.view(), b.view()]).unwrap().view()).unwrap();
        let composed = se_ard(h.row(0), h.row(1), &p).unwrap();
        let dk = deep_kernel(a.view(), b.view(), &net, &p).unwrap();
        assert!((dk - composed).abs() < 1e-15);
    }

    #[test]
    fn deep_kernel_dimension_mismatch() {
        let p = ArdKernelParams::isotropic(2, 1.0, 1.0).unwrap();
        let net = FeedForwardNet::identity(3);
        let a = array![0.0, 0.0, 0.0];
        assert!(matches!(deep_kernel(a.view(), a.view(), &net, &p), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = ArdKernelParams::new(1.2, &[0.6, 1.4]).unwrap();
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 4, 2);
        let up = random_matrix(&mut rng, 3, 4);
        let loss = |a: &Array2<f64>, b: &Array2<f64>, p: &ArdKernelParams| {
            (kernel_matrix(a.view(), b.view(), p).unwrap() * &up).sum()
        };
        let k = kernel_matrix(a.view(), b.view(), &p).unwrap();
        let g = kernel_matrix_backward(a.view(), b.view(), k.view(), up.view(), &p);
        let h = 1e-6;
        let mut pp = p.clone();
        pp.log_signal_variance += h;
        let mut pm = p.clone();
        pm.log_signal_variance -= h;
        let fd = (loss(&a, &b, &pp) - loss(&a, &b, &pm)) / (2.0 * h);
        assert!((fd - g.log_signal_variance).abs() < 1e-8);
        for q in 0..2 {
            let mut pp = p.clone();
            pp.log_length_scales[q] += h;
            let mut pm = p.clone();
            pm.log_length_scales[q] -= h;
            let fd = (loss(&a, &b, &pp) - loss(&a, &b, &pm)) / (2.0 * h);
            assert!((fd - g.log_length_scales[q]).abs() < 1e-8);
        }
        for i in 0..3 {
            for q in 0..2 {
                let mut ap = a.clone();
                ap[[i, q]] += h;
                let mut am = a.clone();
                am[[i, q]] -= h;
                let fd = (loss(&ap, &b, &p) - loss(&am, &b, &p)) / (2.0 * h);
                assert!((fd - g.a[[i, q]]).abs() < 1e-8);
            }
        }
        for j in 0..4 {
            for q in 0..2 {
                let mut bp = b.clone();
                bp[[j, q]] += h;
                let mut bm = b.clone();
                bm[[j, q]] -= h;
                let fd = (loss(&a, &bp, &p) - loss(&a, &bm, &p)) / (2.0 * h);
                assert!((fd - g.b[[j, q]]).abs() < 1e-8);
            }
        }
    }
}
