//! Dense Cholesky helpers on `ndarray` matrices.
//!
//! Only what the Gaussian-process code needs: a plain lower Cholesky
//! factorization, forward/back substitution against matrix right-hand sides,
//! inverses/log-determinants recovered from a factor, and a Householder
//! route to the factor of a Gram matrix.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower Cholesky factor of a symmetric matrix, or `None` when a pivot is not
/// strictly positive. Only the lower triangle of `a` is read.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let s = a[[i, j]] - dot(ri, rj);
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(Array2::from_shape_vec((n, n), l).expect("square"))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.as_standard_layout().into_owned();
    for i in 0..n {
        let (done, rest) = x.view_mut().split_at(ndarray::Axis(0), i);
        let mut xi = rest.index_axis_move(ndarray::Axis(0), 0);
        for k in 0..i {
            let c = l[[i, k]];
            if c != 0.0 {
                xi.scaled_add(-c, &done.row(k));
            }
        }
        xi /= l[[i, i]];
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.as_standard_layout().into_owned();
    for i in (0..n).rev() {
        let (head, done) = x.view_mut().split_at(ndarray::Axis(0), i + 1);
        let mut xi = head.index_axis_move(ndarray::Axis(0), i);
        for k in (i + 1)..n {
            let c = l[[k, i]];
            if c != 0.0 {
                xi.scaled_add(-c, &done.row(k - i - 1));
            }
        }
        xi /= l[[i, i]];
    }
    x
}

pub fn solve_lower_vec(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

pub fn solve_lower_transpose_vec(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `(L Lᵀ) x = b`.
pub fn cholesky_solve_vec(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower_vec(l, b);
    solve_lower_transpose_vec(l, y.view())
}

/// Solves `(L Lᵀ) X = B`.
pub fn cholesky_solve(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, y.view())
}

/// `(L Lᵀ)⁻¹`, symmetrized.
pub fn cholesky_inverse(l: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let linv = solve_lower(l, Array2::<f64>::eye(n).view());
    let mut inv = linv.t().dot(&linv);
    symmetrize(&mut inv);
    inv
}

/// `log |L Lᵀ|`.
pub fn log_det_from_cholesky(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Lower factor `L` with nonnegative diagonal and `L Lᵀ = Bᵀ B`, from the
/// R of a Householder QR of `B` (rows ≥ columns). Never forms `BᵀB`, so
/// small eigenvalues keep their relative accuracy.
pub fn gram_cholesky(b: ArrayView2<f64>) -> Array2<f64> {
    let (rows, n) = b.dim();
    debug_assert!(rows >= n);
    // column-major working copy
    let mut a: Vec<f64> = b.t().iter().copied().collect();
    let mut v = vec![0.0; rows];
    for k in 0..n {
        let col = &a[k * rows..(k + 1) * rows];
        let norm = dot(&col[k..], &col[k..]).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if col[k] > 0.0 { -norm } else { norm };
        v[k..].copy_from_slice(&col[k..]);
        v[k] -= alpha;
        let vv = dot(&v[k..], &v[k..]);
        if vv == 0.0 {
            continue;
        }
        for j in k..n {
            let cj = &mut a[j * rows..(j + 1) * rows];
            let f = 2.0 * dot(&v[k..], &cj[k..]) / vv;
            for (c, vi) in cj[k..].iter_mut().zip(&v[k..]) {
                *c -= f * vi;
            }
        }
    }
    // L = Rᵀ with each column's sign chosen so the diagonal is nonnegative
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let sign = if a[j * rows + j] < 0.0 { -1.0 } else { 1.0 };
        for i in j..n {
            l[[i, j]] = sign * a[i * rows + j];
        }
    }
    l
}
