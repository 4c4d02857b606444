//! Convolutional dictionary operators.
//!
//! A dictionary `D` is a bank of kernels of shape `(m, c, k, k)`: `m` signal
//! channels, `c` code channels, odd spatial size `k`. The synthesis operator
//! maps a code `Z (n, c, h, w)` to a signal `X (n, m, h, w)` by
//! cross-correlation with stride 1 and zero "same" padding `k/2`, so code and
//! signal always share spatial dimensions:
//!
//! ```text
//! (D * Z)[i] = sum_j d_ij (*) z_j
//! ```
//!
//! The analysis operator is the exact adjoint of synthesis with respect to
//! the Frobenius inner product; the solver's gradient step and the whole
//! reverse-mode pass rely on that identity, and the test suite enforces it
//! numerically. Both directions are evaluated as im2col plus one matrix
//! multiply per batch item.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, inner, sq_norm, Tensor4};

/// Default power-iteration budget for [`ConvDict::lipschitz_default`].
pub const POWER_ITERS: usize = 50;
/// Default relative-change stopping tolerance for power iteration.
pub const POWER_TOL: f64 = 1e-6;

// Fixed start-vector seed so Lipschitz estimates are reproducible.
const POWER_SEED: u64 = 0x7031_7e52;

/// Multichannel convolutional dictionary with stride 1 and "same" zero
/// padding. The kernel size must be odd so padding `k/2` preserves the
/// spatial dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDict {
    kernels: Array4<f64>,
}

impl ConvDict {
    /// Wraps a kernel bank of shape `(m, c, k, k)`.
    pub fn new(kernels: Array4<f64>) -> Result<Self> {
        let (m, c, kh, kw) = kernels.dim();
        if m == 0 || c == 0 || kh == 0 {
            return Err(Error::InvalidConfig(format!(
                "dictionary dimensions must be positive, got ({m}, {c}, {kh}, {kw})"
            )));
        }
        if kh != kw {
            return Err(Error::shape("ConvDict::new", "square kernels", format!("{kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size must be odd for same padding, got {kh}"
            )));
        }
        if !kernels.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ConvDict kernels"));
        }
        Ok(Self { kernels })
    }

    /// Gaussian-initialized dictionary, `N(0, scale^2)` entries.
    pub fn random(m: usize, c: usize, k: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = Array4::from_shape_simple_fn((m, c, k, k), || normal_sample(&mut rng) * scale);
        Self::new(kernels)
    }

    pub fn kernels(&self) -> &Array4<f64> {
        &self.kernels
    }

    /// Mutable kernel access for optimizer updates. The caller is responsible
    /// for keeping entries finite and refreshing any cached Lipschitz
    /// constant afterwards.
    pub fn kernels_mut(&mut self) -> &mut Array4<f64> {
        &mut self.kernels
    }

    /// Signal channel count `m`.
    pub fn signal_channels(&self) -> usize {
        self.kernels.dim().0
    }

    /// Code channel count `c`.
    pub fn code_channels(&self) -> usize {
        self.kernels.dim().1
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.dim().2
    }

    /// Synthesis `D * Z`: code `(n, c, h, w)` to signal `(n, m, h, w)`.
    pub fn synthesize(&self, code: &Tensor4) -> Result<Tensor4> {
        let (m, c, k, _) = self.kernels.dim();
        let (n, zc, h, w) = code.dim();
        if zc != c {
            return Err(Error::shape(
                "synthesize",
                format!("code with {c} channels"),
                format!("({n}, {zc}, {h}, {w})"),
            ));
        }
        let hw = h * w;
        let ckk = c * k * k;
        let kmat = self
            .kernels
            .view()
            .into_shape_with_order((m, ckk))
            .expect("kernel bank is contiguous");
        let mut out = Tensor4::zeros((n, m, h, w));
        let mut col = Array2::<f64>::zeros((ckk, hw));
        for item in 0..n {
            let z = code.index_axis(Axis(0), item);
            im2col_into(
                z.as_slice().expect("code is contiguous"),
                c,
                h,
                w,
                k,
                col.as_slice_mut().expect("col is contiguous"),
            );
            let mut dst = out
                .index_axis_mut(Axis(0), item)
                .into_shape_with_order((m, hw))
                .expect("output slice is contiguous");
            general_mat_mul(1.0, &kmat, &col, 0.0, &mut dst);
        }
        Ok(out)
    }

    /// Analysis `D^T X`: the adjoint of [`ConvDict::synthesize`], signal
    /// `(n, m, h, w)` to code `(n, c, h, w)`.
    pub fn analyze(&self, signal: &Tensor4) -> Result<Tensor4> {
        let (m, c, k, _) = self.kernels.dim();
        let (n, xm, h, w) = signal.dim();
        if xm != m {
            return Err(Error::shape(
                "analyze",
                format!("signal with {m} channels"),
                format!("({n}, {xm}, {h}, {w})"),
            ));
        }
        let hw = h * w;
        let ckk = c * k * k;
        let kmat = self
            .kernels
            .view()
            .into_shape_with_order((m, ckk))
            .expect("kernel bank is contiguous");
        let kmat_t = kmat.t();
        let mut out = Tensor4::zeros((n, c, h, w));
        let mut col = Array2::<f64>::zeros((ckk, hw));
        for item in 0..n {
            let x = signal
                .index_axis(Axis(0), item)
                .into_shape_with_order((m, hw))
                .expect("signal slice is contiguous");
            general_mat_mul(1.0, &kmat_t, &x, 0.0, &mut col);
            let mut z = out.index_axis_mut(Axis(0), item);
            col2im_add(
                col.as_slice().expect("col is contiguous"),
                c,
                h,
                w,
                k,
                z.as_slice_mut().expect("output slice is contiguous"),
            );
        }
        Ok(out)
    }

    /// Gradient of `<signal, D * code>` with respect to the kernels.
    /// Contributions are accumulated over the batch in index order.
    pub fn grad_kernels(&self, code: &Tensor4, signal: &Tensor4) -> Result<Array4<f64>> {
        let (m, c, k, _) = self.kernels.dim();
        let (n, zc, h, w) = code.dim();
        let (sn, sm, sh, sw) = signal.dim();
        if zc != c || sm != m || sn != n || sh != h || sw != w {
            return Err(Error::shape(
                "grad_kernels",
                format!("code (_, {c}, h, w) with signal (_, {m}, h, w)"),
                format!("code {:?}, signal {:?}", code.dim(), signal.dim()),
            ));
        }
        let hw = h * w;
        let ckk = c * k * k;
        let mut dk = Array2::<f64>::zeros((m, ckk));
        let mut col = Array2::<f64>::zeros((ckk, hw));
        for item in 0..n {
            let z = code.index_axis(Axis(0), item);
            im2col_into(
                z.as_slice().expect("code is contiguous"),
                c,
                h,
                w,
                k,
                col.as_slice_mut().expect("col is contiguous"),
            );
            let x = signal
                .index_axis(Axis(0), item)
                .into_shape_with_order((m, hw))
                .expect("signal slice is contiguous");
            general_mat_mul(1.0, &x, &col.t(), 1.0, &mut dk);
        }
        Ok(dk
            .into_shape_with_order((m, c, k, k))
            .expect("gradient is contiguous"))
    }

    /// Largest eigenvalue of `Z -> D^T(D * Z)` at the given spatial size,
    /// i.e. the squared spectral norm of the synthesis operator, by power
    /// iteration from a fixed-seed start vector. Returns 0 for the zero
    /// dictionary.
    pub fn lipschitz_estimate(&self, spatial: (usize, usize), iters: usize, tol: f64) -> f64 {
        assert!(iters >= 1, "power iteration needs at least one step");
        assert!(tol > 0.0, "tolerance must be positive");
        let (h, w) = spatial;
        let c = self.code_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
        let mut v = Tensor4::from_shape_simple_fn((1, c, h, w), || normal_sample(&mut rng));
        let norm = sq_norm(&v).sqrt();
        v.mapv_inplace(|x| x / norm);

        let mut estimate = 0.0;
        for _ in 0..iters {
            let av = self
                .analyze(&self.synthesize(&v).expect("shapes are internally consistent"))
                .expect("shapes are internally consistent");
            // Rayleigh quotient; v is unit norm.
            let next = inner(&v, &av);
            let av_norm = sq_norm(&av).sqrt();
            if av_norm == 0.0 {
                return 0.0;
            }
            let converged = (next - estimate).abs() <= tol * next.abs().max(f64::MIN_POSITIVE);
            estimate = next;
            if converged {
                break;
            }
            v = av / av_norm;
        }
        estimate
    }

    /// [`ConvDict::lipschitz_estimate`] with the default budget.
    pub fn lipschitz_default(&self, spatial: (usize, usize)) -> f64 {
        self.lipschitz_estimate(spatial, POWER_ITERS, POWER_TOL)
    }

    /// Validates that kernel entries stayed finite (e.g. after an optimizer
    /// step).
    pub fn check_finite(&self) -> Result<()> {
        if self.kernels.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("ConvDict kernels"))
        }
    }
}

/// Standard normal via Box-Muller; keeps the crate off heavier samplers.
pub(crate) fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        if u > f64::MIN_POSITIVE {
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}

/// Unfolds `z (c, h, w)` into `col (c*k*k, h*w)` with zero "same" padding:
/// `col[(j*k+u)*k+v, y*w+x] = z[j, y+u-p, x+v-p]`.
fn im2col_into(z: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let p = k / 2;
    let hw = h * w;
    debug_assert_eq!(z.len(), c * hw);
    debug_assert_eq!(col.len(), c * k * k * hw);
    for j in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (j * k + u) * k + v;
                let dst = &mut col[row * hw..(row + 1) * hw];
                // Valid output x range for this kernel column offset.
                let x_lo = p.saturating_sub(v);
                let x_hi = (w + p).saturating_sub(v).min(w);
                for y in 0..h {
                    let line = &mut dst[y * w..(y + 1) * w];
                    let sy = y + u;
                    if sy < p || sy - p >= h || x_lo >= x_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let sy = sy - p;
                    line[..x_lo].fill(0.0);
                    line[x_hi..].fill(0.0);
                    let src_start = j * hw + sy * w + (x_lo + v - p);
                    line[x_lo..x_hi].copy_from_slice(&z[src_start..src_start + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: folds `col (c*k*k, h*w)` back into
/// `z (c, h, w)`, accumulating overlapping contributions.
fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, k: usize, z: &mut [f64]) {
    let p = k / 2;
    let hw = h * w;
    debug_assert_eq!(z.len(), c * hw);
    debug_assert_eq!(col.len(), c * k * k * hw);
    for j in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (j * k + u) * k + v;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = p.saturating_sub(v);
                let x_hi = (w + p).saturating_sub(v).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + u;
                    if sy < p || sy - p >= h {
                        continue;
                    }
                    let sy = sy - p;
                    let dst_start = j * hw + sy * w + (x_lo + v - p);
                    let dst = &mut z[dst_start..dst_start + (x_hi - x_lo)];
                    let line = &src[y * w + x_lo..y * w + x_hi];
                    for (d, s) in dst.iter_mut().zip(line) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Loose upper bound on the squared spectral norm: `sum_ij ||d_ij||_1^2`.
/// Used as a sanity cap in tests (Young's inequality per kernel, then the
/// Frobenius bound over the channel block matrix).
pub fn lipschitz_upper_bound(dict: &ConvDict) -> f64 {
    let (m, c, _, _) = dict.kernels().dim();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..c {
            let l1: f64 = dict
                .kernels()
                .slice(ndarray::s![i, j, .., ..])
                .iter()
                .map(|v| v.abs())
                .sum();
            total += l1 * l1;
        }
    }
    total
}

/// Checks both operands of a synthesize call in one place; used by solver
/// entry points that must reject non-finite input before iterating.
pub(crate) fn check_signal_code_shapes(
    dict: &ConvDict,
    signal: &Tensor4,
    context: &'static str,
) -> Result<()> {
    ensure_finite(signal, context)?;
    if signal.dim().1 != dict.signal_channels() {
        return Err(Error::shape(
            context,
            format!("signal with {} channels", dict.signal_channels()),
            format!("{:?}", signal.dim()),
        ));
    }
    Ok(())
}
