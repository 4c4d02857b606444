//! Independent reference implementations for verifying `ibadcsc`.
//!
//! Everything here deliberately avoids the production code paths: the
//! convolution is a direct quadruple loop (no im2col, no GEMM), the top
//! eigenvalue comes from a dense symmetric eigendecomposition, and the lasso
//! solver is cyclic coordinate descent on the fully materialized problem.
//! Keep it that way — these routines are only trustworthy as oracles while
//! they share nothing with what they check.

use ndarray::{Array1, Array2, Array4};

use ibadcsc::dict::ConvDict;
use ibadcsc::Tensor4;

/// Direct-sum cross-correlation with stride 1 and zero "same" padding.
/// `kernels (m, c, k, k)`, `code (n, c, h, w)` -> `(n, m, h, w)`.
pub fn naive_synthesize(kernels: &Array4<f64>, code: &Tensor4) -> Tensor4 {
    let (m, c, k, _) = kernels.dim();
    let (n, zc, h, w) = code.dim();
    assert_eq!(zc, c, "code channels must match kernel code channels");
    let p = k / 2;
    let mut out = Tensor4::zeros((n, m, h, w));
    for item in 0..n {
        for i in 0..m {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for j in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let sy = y + u;
                                let sx = x + v;
                                if sy < p || sx < p {
                                    continue;
                                }
                                let (sy, sx) = (sy - p, sx - p);
                                if sy >= h || sx >= w {
                                    continue;
                                }
                                acc += kernels[[i, j, u, v]] * code[[item, j, sy, sx]];
                            }
                        }
                    }
                    out[[item, i, y, x]] = acc;
                }
            }
        }
    }
    out
}

/// Flat-loop recomputation of `lambda * ||z||_1 + 1/2 * ||x - D*z||_2^2`
/// on top of [`naive_synthesize`].
pub fn naive_objective(kernels: &Array4<f64>, x: &Tensor4, z: &Tensor4, lambda: f64) -> f64 {
    let synth = naive_synthesize(kernels, z);
    let l1: f64 = z.iter().map(|v| v.abs()).sum();
    let fit: f64 = x
        .iter()
        .zip(synth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    lambda * l1 + 0.5 * fit
}

/// Materializes the synthesis operator as a dense `(m*h*w, c*h*w)` matrix by
/// pushing each basis code through [`naive_synthesize`].
pub fn materialize_synthesis(dict: &ConvDict, h: usize, w: usize) -> Array2<f64> {
    let m = dict.signal_channels();
    let c = dict.code_channels();
    let rows = m * h * w;
    let cols = c * h * w;
    let mut a = Array2::zeros((rows, cols));
    for col in 0..cols {
        let mut basis = Tensor4::zeros((1, c, h, w));
        basis.as_slice_mut().unwrap()[col] = 1.0;
        let image = naive_synthesize(dict.kernels(), &basis);
        for (row, v) in image.as_slice().unwrap().iter().enumerate() {
            a[[row, col]] = *v;
        }
    }
    a
}

/// Largest eigenvalue of the symmetric matrix `a^T a` (the gram of the
/// materialized operator) via dense eigendecomposition.
pub fn top_gram_eigenvalue(a: &Array2<f64>) -> f64 {
    let (rows, cols) = a.dim();
    let na = nalgebra::DMatrix::from_fn(rows, cols, |r, c| a[[r, c]]);
    let gram = na.transpose() * &na;
    let eig = nalgebra::SymmetricEigen::new(gram);
    eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max)
}

/// Cyclic coordinate descent for `min_z lambda*||z||_1 + 1/2*||x - A z||^2`.
/// Runs until the largest coordinate update of a sweep drops below `tol` or
/// `max_sweeps` is exhausted. Returns the solution vector.
pub fn cd_lasso(a: &Array2<f64>, x: &Array1<f64>, lambda: f64, max_sweeps: usize, tol: f64) -> Array1<f64> {
    let (rows, cols) = a.dim();
    assert_eq!(rows, x.len());
    let col_sq: Vec<f64> = (0..cols).map(|j| a.column(j).dot(&a.column(j))).collect();
    let mut z = Array1::zeros(cols);
    let mut residual = x.clone(); // r = x - A z
    for _ in 0..max_sweeps {
        let mut max_delta = 0.0f64;
        for j in 0..cols {
            if col_sq[j] == 0.0 {
                continue;
            }
            let rho = a.column(j).dot(&residual) + col_sq[j] * z[j];
            let znew = soft(rho, lambda) / col_sq[j];
            let delta = znew - z[j];
            if delta != 0.0 {
                residual.scaled_add(-delta, &a.column(j));
                z[j] = znew;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }
    z
}

/// Objective of the materialized lasso.
pub fn lasso_objective(a: &Array2<f64>, x: &Array1<f64>, z: &Array1<f64>, lambda: f64) -> f64 {
    let r = x - &a.dot(z);
    lambda * z.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * r.dot(&r)
}

fn soft(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Central finite difference `(f(c+eps) - f(c-eps)) / (2 eps)`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, center: f64, eps: f64) -> f64 {
    (f(center + eps) - f(center - eps)) / (2.0 * eps)
}

/// Relative error with an absolute floor, for comparing gradients where the
/// true value may be tiny.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-8)
}
