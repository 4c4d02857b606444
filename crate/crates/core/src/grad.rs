//! Exact derivatives through the unrolled solver.
//!
//! The production path is reverse mode: one backward sweep over a recorded
//! [`FistaTrace`] yields the gradients of `<upstream, Z>` with respect to the
//! sparsity weight `lambda`, the dictionary kernels, and the layer input in a
//! single pass. The forward-in-`lambda` recursion
//!
//! ```text
//! dx_k = chi_E(g_k) * ( -sign(g_k) * s + dg_k )
//! dy_{k+1} = (1 + beta_k) * dx_k - beta_k * dx_{k-1}
//! ```
//!
//! (with `chi_E` the active-set indicator and `dg_k` the gradient step applied
//! linearly to `dy_k`) is kept as [`lambda_grad_forward`], an independent
//! route the test suite checks the backward pass against coordinate by
//! coordinate. Forward mode over the whole dictionary would be prohibitively
//! wide, which is why it only exists for `lambda`.
//!
//! At the nondifferentiable boundary `|g| = tau` the subgradient 0 is used
//! (the coordinate is treated as inactive); the finite-difference tests keep
//! instances away from that measure-zero set.

use ndarray::{Array4, Zip};

use crate::dict::ConvDict;
use crate::error::{Error, Result};
use crate::fista::{csc_solve, FistaConfig, FistaTrace};
use crate::tensor::Tensor4;

/// Gradients of a scalar function of the solver output.
#[derive(Debug, Clone)]
pub struct UnrollGradients {
    /// Derivative with respect to the layer's scalar sparsity weight.
    pub d_lambda: f64,
    /// Derivative with respect to the dictionary kernels, `(m, c, k, k)`.
    pub d_dict: Array4<f64>,
    /// Derivative with respect to the input signal, `(n, m, h, w)`.
    pub d_input: Tensor4,
}

/// Per-step indicators of the active set `E = { |g| > tau }`.
///
/// The soft threshold maps exactly the active coordinates to nonzero values,
/// so the mask at step `k` is the support of `x_k`.
#[derive(Debug, Clone)]
pub struct ThresholdMask {
    steps: Vec<Array4<bool>>,
}

impl ThresholdMask {
    pub fn from_trace(trace: &FistaTrace) -> Self {
        let steps = trace.xs.iter().map(|x| x.mapv(|v| v != 0.0)).collect();
        Self { steps }
    }

    pub fn step(&self, k: usize) -> &Array4<bool> {
        &self.steps[k]
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Coordinatewise `dZ/d(lambda)` by forward accumulation of the recursion in
/// the module docs. Runs the solver internally; the returned field has the
/// code shape `(n, c, h, w)`.
pub fn lambda_grad_forward(
    x: &Tensor4,
    dict: &ConvDict,
    lambda: f64,
    cfg: &FistaConfig,
) -> Result<Tensor4> {
    let (_, trace) = csc_solve(x, dict, lambda, cfg)?;
    lambda_grad_forward_from_trace(dict, &trace)
}

/// Forward-mode recursion replayed over an existing trace.
pub fn lambda_grad_forward_from_trace(dict: &ConvDict, trace: &FistaTrace) -> Result<Tensor4> {
    let cfg = trace.config;
    let s = cfg.threshold_scale;
    let inv_l = 1.0 / cfg.lipschitz;
    let code_dim = trace.xs[0].dim();

    let mut dx_prev = Tensor4::zeros(code_dim); // d x_{k-1} / d lambda
    let mut dy = Tensor4::zeros(code_dim); // d y_k / d lambda
    let mut dx = Tensor4::zeros(code_dim);

    for (i, x_k) in trace.xs.iter().enumerate() {
        // dg_k = (I - (1/L) D^T D) dy_k : the gradient step is linear and
        // lambda-independent, so the derivative passes straight through.
        let mut dg = dict.analyze(&dict.synthesize(&dy)?)?;
        dg.zip_mut_with(&dy, |a, b| *a = b - inv_l * *a);

        // dx_k = chi_E * (dg - s * sign(g_k)); on the active set the sign of
        // the pre-threshold point equals the sign of x_k.
        Zip::from(&mut dg).and(x_k).for_each(|d, &xv| {
            if xv != 0.0 {
                *d -= s * xv.signum();
            } else {
                *d = 0.0;
            }
        });
        dx = dg;

        let k = i + 1;
        if k < trace.steps() {
            let beta = trace.momentum_coeff(k);
            let mut dy_next = dx.clone();
            dy_next.zip_mut_with(&dx_prev, |a, p| *a += beta * (*a - p));
            dy = dy_next;
            dx_prev = dx.clone();
        }
    }
    Ok(dx)
}

/// Reverse-mode sweep: gradients of `<upstream, Z>` with respect to lambda,
/// the dictionary, and the input, replaying the recorded trace backwards.
pub fn unroll_backward(
    trace: &FistaTrace,
    x: &Tensor4,
    dict: &ConvDict,
    lambda: f64,
    upstream: &Tensor4,
) -> Result<UnrollGradients> {
    let cfg = trace.config;
    let steps = cfg.steps;
    if trace.xs.len() != steps || trace.ys.len() != steps || trace.ts.len() != steps + 1 {
        return Err(Error::InvalidConfig(format!(
            "trace is inconsistent with its config: {} x, {} y, {} t for {} steps",
            trace.xs.len(),
            trace.ys.len(),
            trace.ts.len(),
            steps
        )));
    }
    if (trace.lambda - lambda).abs() > f64::EPSILON * lambda.abs().max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "trace was recorded at lambda = {}, backward called with {}",
            trace.lambda, lambda
        )));
    }
    let code_dim = trace.xs[0].dim();
    if upstream.dim() != code_dim {
        return Err(Error::shape(
            "unroll_backward upstream",
            format!("{code_dim:?}"),
            format!("{:?}", upstream.dim()),
        ));
    }
    if x.dim().1 != dict.signal_channels() {
        return Err(Error::shape(
            "unroll_backward input",
            format!("signal with {} channels", dict.signal_channels()),
            format!("{:?}", x.dim()),
        ));
    }

    let s = cfg.threshold_scale;
    let inv_l = 1.0 / cfg.lipschitz;

    let mut xbar: Vec<Tensor4> = (0..steps).map(|_| Tensor4::zeros(code_dim)).collect();
    xbar[steps - 1] = upstream.clone();

    let mut d_lambda = 0.0;
    let mut d_dict = Array4::<f64>::zeros(dict.kernels().dim());
    let mut d_input = Tensor4::zeros(x.dim());

    for i in (0..steps).rev() {
        let x_k = &trace.xs[i];
        let y_k = &trace.ys[i];

        // Through x_k = soft_threshold(g_k, lambda * s): inactive coordinates
        // block the flow, active ones pass it and feed -sign(g_k) * s into
        // the lambda gradient.
        let mut gbar = std::mem::replace(&mut xbar[i], Tensor4::zeros((0, 0, 0, 0)));
        let mut lambda_term = 0.0;
        Zip::from(&mut gbar).and(x_k).for_each(|g, &xv| {
            if xv != 0.0 {
                lambda_term += *g * xv.signum();
            } else {
                *g = 0.0;
            }
        });
        d_lambda -= s * lambda_term;

        // Through g_k = y_k - (1/L) D^T (D y_k - X). The operator D^T D is
        // self-adjoint, so the y_k adjoint reuses the same pair; the two
        // dictionary occurrences contribute via the product rule.
        let synth_gbar = dict.synthesize(&gbar)?;
        let mut residual = dict.synthesize(y_k)?;
        residual -= x;

        d_input.zip_mut_with(&synth_gbar, |d, v| *d += inv_l * v);
        let dd1 = dict.grad_kernels(&gbar, &residual)?;
        let dd2 = dict.grad_kernels(y_k, &synth_gbar)?;
        Zip::from(&mut d_dict).and(&dd1).and(&dd2).for_each(|d, a, b| {
            *d -= inv_l * (a + b);
        });

        let mut ybar = dict.analyze(&synth_gbar)?;
        ybar.zip_mut_with(&gbar, |a, g| *a = g - inv_l * *a);

        // Through y_k = (1 + beta_{k-1}) x_{k-1} - beta_{k-1} x_{k-2};
        // y_1 = 0 and x_0 = 0 are constants, their adjoints are dropped.
        if i >= 1 {
            let beta = trace.momentum_coeff(i); // beta_{k-1} for k = i + 1
            xbar[i - 1].zip_mut_with(&ybar, |a, v| *a += (1.0 + beta) * v);
            if i >= 2 {
                xbar[i - 2].zip_mut_with(&ybar, |a, v| *a -= beta * v);
            }
        }
    }

    Ok(UnrollGradients {
        d_lambda,
        d_dict,
        d_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn identity_dict() -> ConvDict {
        let mut k = Array4::zeros((1, 1, 1, 1));
        k[[0, 0, 0, 0]] = 1.0;
        ConvDict::new(k).unwrap()
    }

    #[test]
    fn dead_zone_everywhere_gives_zero_lambda_gradient() {
        let d = identity_dict();
        let x = Tensor4::from_elem((1, 1, 2, 2), 0.5);
        // tau = lambda / L = lambda; anything above max|X| kills every step.
        let cfg = FistaConfig::new(3, 1.0).unwrap();
        let field = lambda_grad_forward(&x, &d, 10.0, &cfg).unwrap();
        assert!(field.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_one_step_closed_form() {
        // All dims 1, identity kernel, T = 1, X > tau:
        // Z = X - lambda * s, so dZ/dlambda = -s.
        let d = identity_dict();
        let x = Tensor4::from_elem((1, 1, 1, 1), 2.0);
        let cfg = FistaConfig::new(1, 1.0).unwrap();
        let lambda = 0.3;
        let (z, trace) = csc_solve(&x, &d, lambda, &cfg).unwrap();
        assert!((z[[0, 0, 0, 0]] - (2.0 - lambda)).abs() < 1e-15);
        let field = lambda_grad_forward(&x, &d, lambda, &cfg).unwrap();
        assert!((field[[0, 0, 0, 0]] + cfg.threshold_scale).abs() < 1e-15);

        let upstream = Tensor4::from_elem((1, 1, 1, 1), 1.0);
        let grads = unroll_backward(&trace, &x, &d, lambda, &upstream).unwrap();
        assert!((grads.d_lambda + cfg.threshold_scale).abs() < 1e-15);
        // dZ/dX = 1 on the active coordinate for the identity problem.
        assert!((grads.d_input[[0, 0, 0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let d = ConvDict::random(2, 3, 3, 0.4, 5).unwrap();
        let x = Tensor4::from_shape_fn((1, 2, 4, 4), |(_, c, y, xx)| {
            ((c * 16 + y * 4 + xx) as f64).sin()
        });
        let cfg = FistaConfig::from_estimate(2, d.lipschitz_default((4, 4))).unwrap();
        let (_, trace) = csc_solve(&x, &d, 0.05, &cfg).unwrap();
        let upstream = Tensor4::zeros((1, 3, 4, 4));
        let grads = unroll_backward(&trace, &x, &d, 0.05, &upstream).unwrap();
        assert_eq!(grads.d_lambda, 0.0);
        assert!(grads.d_dict.iter().all(|v| *v == 0.0));
        assert!(grads.d_input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masks_match_support() {
        let d = ConvDict::random(1, 2, 3, 0.5, 8).unwrap();
        let x = Tensor4::from_shape_fn((1, 1, 4, 4), |(_, _, y, xx)| ((y + xx) as f64).cos());
        let cfg = FistaConfig::from_estimate(3, d.lipschitz_default((4, 4))).unwrap();
        let (_, trace) = csc_solve(&x, &d, 0.02, &cfg).unwrap();
        let masks = ThresholdMask::from_trace(&trace);
        assert_eq!(masks.len(), 3);
        for (k, mask) in (0..3).map(|k| (k, masks.step(k))) {
            for (m, v) in mask.iter().zip(trace.xs[k].iter()) {
                assert_eq!(*m, *v != 0.0);
            }
        }
    }

    #[test]
    fn gating_blocks_inactive_coordinates() {
        // Construct an input where one spatial site is far above threshold
        // and another is exactly zero throughout; the zero site must receive
        // exactly zero input gradient.
        let d = identity_dict();
        let mut x = Tensor4::zeros((1, 1, 1, 2));
        x[[0, 0, 0, 0]] = 5.0;
        let cfg = FistaConfig::new(2, 1.0).unwrap();
        let lambda = 0.1;
        let (z, trace) = csc_solve(&x, &d, lambda, &cfg).unwrap();
        assert!(z[[0, 0, 0, 0]] != 0.0 && z[[0, 0, 0, 1]] == 0.0);
        let upstream = Tensor4::from_elem((1, 1, 1, 2), 1.0);
        let grads = unroll_backward(&trace, &x, &d, lambda, &upstream).unwrap();
        assert_eq!(grads.d_input[[0, 0, 0, 1]], 0.0);
        // Positive active coordinate with positive upstream pulls lambda down.
        assert!(grads.d_lambda < 0.0);
    }

    #[test]
    fn trace_mismatches_rejected() {
        let d = identity_dict();
        let x = Tensor4::from_elem((1, 1, 2, 2), 1.0);
        let cfg = FistaConfig::new(2, 1.0).unwrap();
        let (_, trace) = csc_solve(&x, &d, 0.1, &cfg).unwrap();
        let bad_upstream = Tensor4::zeros((1, 1, 3, 3));
        assert!(unroll_backward(&trace, &x, &d, 0.1, &bad_upstream).is_err());
        let upstream = Tensor4::zeros((1, 1, 2, 2));
        assert!(unroll_backward(&trace, &x, &d, 0.4, &upstream).is_err());
    }
}
