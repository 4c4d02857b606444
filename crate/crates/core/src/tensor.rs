//! Rank-4 tensors in `(batch, channels, rows, cols)` layout.
//!
//! All numeric state in this crate is 64-bit: the gradient machinery is
//! verified against central finite differences, which is hopeless in single
//! precision.

use ndarray::Array4;

use crate::error::{Error, Result};

/// Dense rank-4 array, shape `(n, c, h, w)` = (batch, channels, rows, cols).
pub type Tensor4 = Array4<f64>;

/// Rejects tensors containing NaN or infinity.
pub fn ensure_finite(t: &Tensor4, context: &'static str) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

/// Frobenius inner product `<a, b>`.
pub fn inner(a: &Tensor4, b: &Tensor4) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Squared Frobenius norm.
pub fn sq_norm(t: &Tensor4) -> f64 {
    t.iter().map(|v| v * v).sum()
}

/// Entrywise l1 norm.
pub fn l1_norm(t: &Tensor4) -> f64 {
    t.iter().map(|v| v.abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn finite_check_accepts_ordinary_values() {
        let t = Array4::from_elem((2, 3, 4, 5), 1.5);
        assert!(ensure_finite(&t, "t").is_ok());
        assert_eq!(t.len(), 2 * 3 * 4 * 5);
    }

    #[test]
    fn finite_check_rejects_nan_and_inf() {
        let mut t = Array4::zeros((1, 1, 2, 2));
        t[[0, 0, 0, 0]] = f64::NAN;
        assert!(matches!(ensure_finite(&t, "t"), Err(Error::NonFinite("t"))));
        t[[0, 0, 0, 0]] = f64::INFINITY;
        assert!(ensure_finite(&t, "t").is_err());
    }

    #[test]
    fn inner_product_and_norms() {
        let a = Array4::from_elem((1, 2, 2, 2), 2.0);
        let b = Array4::from_elem((1, 2, 2, 2), -3.0);
        assert_eq!(inner(&a, &b), -48.0);
        assert_eq!(sq_norm(&a), 32.0);
        assert_eq!(l1_norm(&b), 24.0);
    }
}
