//! Unrolled FISTA for the convolutional lasso.
//!
//! Solves `argmin_Z lambda*||Z||_1 + 1/2*||X - D*Z||_2^2` with a fixed,
//! configurable number of iterations:
//!
//! ```text
//! g_k = y_k - (1/L) * D^T (D * y_k - X)
//! x_k = soft_threshold(g_k, lambda * s)
//! t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2
//! y_{k+1} = x_k + ((t_k - 1)/t_{k+1}) * (x_k - x_{k-1})
//! ```
//!
//! starting from `x_0 = y_1 = 0`, `t_1 = 1`. The effective threshold is
//! `tau = lambda * s` with `s` exposed as [`FistaConfig::threshold_scale`];
//! the default `s = 1/L` is the step size that actually minimizes the
//! objective above. Every iterate is recorded in a [`FistaTrace`] so the
//! gradient module can replay the computation in reverse.

use serde::{Deserialize, Serialize};

use crate::dict::{check_signal_code_shapes, ConvDict};
use crate::error::{Error, Result};
use crate::tensor::{l1_norm, Tensor4};

/// Safety factor applied on top of power-iteration Lipschitz estimates so
/// the step size stays valid under slight underestimation.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;

/// Solver configuration for one unrolled solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FistaConfig {
    /// Unroll count `T >= 1`.
    pub steps: usize,
    /// Gradient Lipschitz constant `L > 0` of the quadratic term.
    pub lipschitz: f64,
    /// Threshold multiplier `s`: the solver shrinks by `tau = lambda * s`.
    pub threshold_scale: f64,
    /// Record per-step objective values in the trace. Network layers switch
    /// this off; solver-style callers and the test suite keep it on.
    pub record_objectives: bool,
}

impl FistaConfig {
    /// Configuration with the standard threshold scale `s = 1/L`.
    pub fn new(steps: usize, lipschitz: f64) -> Result<Self> {
        Self::with_threshold_scale(steps, lipschitz, 1.0 / lipschitz)
    }

    /// Configuration with an explicit threshold scale.
    pub fn with_threshold_scale(steps: usize, lipschitz: f64, threshold_scale: f64) -> Result<Self> {
        let cfg = Self {
            steps,
            lipschitz,
            threshold_scale,
            record_objectives: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds a config from a raw power-iteration estimate, applying the
    /// [`LIPSCHITZ_SAFETY`] factor before deriving the step and threshold.
    pub fn from_estimate(steps: usize, raw_lipschitz: f64) -> Result<Self> {
        Self::new(steps, raw_lipschitz * LIPSCHITZ_SAFETY)
    }

    pub fn without_objectives(mut self) -> Self {
        self.record_objectives = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidConfig("fista steps must be >= 1".into()));
        }
        if !(self.lipschitz.is_finite() && self.lipschitz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "fista lipschitz must be finite and positive, got {}",
                self.lipschitz
            )));
        }
        if !(self.threshold_scale.is_finite() && self.threshold_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "fista threshold_scale must be finite and positive, got {}",
                self.threshold_scale
            )));
        }
        Ok(())
    }
}

/// Scalar shrinkage `sign(v) * max(|v| - tau, 0)`.
///
/// `tau` must be non-negative; negative thresholds are a caller bug.
#[inline]
pub fn soft_threshold(v: f64, tau: f64) -> f64 {
    assert!(tau >= 0.0, "soft threshold requires tau >= 0, got {tau}");
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Elementwise [`soft_threshold`] over a tensor.
pub fn soft_threshold_tensor(t: &Tensor4, tau: f64) -> Tensor4 {
    assert!(tau >= 0.0, "soft threshold requires tau >= 0, got {tau}");
    t.mapv(|v| {
        if v > tau {
            v - tau
        } else if v < -tau {
            v + tau
        } else {
            0.0
        }
    })
}

/// Momentum recurrence `t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`.
#[inline]
pub fn fista_momentum(t_k: f64) -> f64 {
    debug_assert!(t_k >= 1.0, "momentum sequence starts at t_1 = 1");
    (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt()) / 2.0
}

/// Everything reverse-mode differentiation needs to replay one solve.
///
/// `xs[k]` and `ys[k]` are the iterates `x_{k+1}` and `y_{k+1}` of the
/// formulas above (0-indexed storage of the 1-indexed recurrence), `ts`
/// holds `t_1 ..= t_{T+1}`, and `objectives[k]` is the lasso objective at
/// `x_{k+1}` when recording is enabled.
#[derive(Debug, Clone)]
pub struct FistaTrace {
    pub xs: Vec<Tensor4>,
    pub ys: Vec<Tensor4>,
    pub ts: Vec<f64>,
    pub objectives: Vec<f64>,
    pub lambda: f64,
    pub config: FistaConfig,
}

impl FistaTrace {
    pub fn steps(&self) -> usize {
        self.config.steps
    }

    /// Final code iterate `x_T`.
    pub fn output(&self) -> &Tensor4 {
        self.xs.last().expect("trace has at least one step")
    }

    /// Momentum coefficient `(t_k - 1) / t_{k+1}` for 1-indexed step `k`.
    pub fn momentum_coeff(&self, k: usize) -> f64 {
        debug_assert!(k >= 1 && k <= self.steps());
        (self.ts[k - 1] - 1.0) / self.ts[k]
    }
}

/// Unrolled FISTA solve of the convolutional lasso. Returns the final code
/// `x_T` together with the full trace.
pub fn csc_solve(
    x: &Tensor4,
    dict: &ConvDict,
    lambda: f64,
    cfg: &FistaConfig,
) -> Result<(Tensor4, FistaTrace)> {
    solve_inner(x, dict, lambda, cfg, true)
}

/// Plain proximal gradient (ISTA): identical to [`csc_solve`] but with the
/// momentum combination disabled (`y_{k+1} = x_k`). With a valid `L` the
/// recorded objective sequence is non-increasing, which the test suite uses
/// as a solver sanity property.
pub fn ista_solve(
    x: &Tensor4,
    dict: &ConvDict,
    lambda: f64,
    cfg: &FistaConfig,
) -> Result<(Tensor4, FistaTrace)> {
    solve_inner(x, dict, lambda, cfg, false)
}

fn solve_inner(
    x: &Tensor4,
    dict: &ConvDict,
    lambda: f64,
    cfg: &FistaConfig,
    momentum: bool,
) -> Result<(Tensor4, FistaTrace)> {
    cfg.validate()?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    check_signal_code_shapes(dict, x, "csc_solve input")?;

    let (n, _, h, w) = x.dim();
    let c = dict.code_channels();
    let tau = lambda * cfg.threshold_scale;
    let inv_l = 1.0 / cfg.lipschitz;

    let mut xs = Vec::with_capacity(cfg.steps);
    let mut ys = Vec::with_capacity(cfg.steps);
    let mut ts = Vec::with_capacity(cfg.steps + 1);
    let mut objectives = Vec::new();

    let mut x_prev = Tensor4::zeros((n, c, h, w)); // x_{k-1}, starts at x_0
    let mut y = Tensor4::zeros((n, c, h, w)); // y_k, starts at y_1
    let mut t = 1.0; // t_k
    ts.push(t);

    for _ in 0..cfg.steps {
        // g_k = y_k - (1/L) D^T (D y_k - X)
        let mut residual = dict.synthesize(&y)?;
        residual -= x;
        let mut g = dict.analyze(&residual)?;
        g.zip_mut_with(&y, |gi, yi| *gi = yi - inv_l * *gi);
        let x_k = soft_threshold_tensor(&g, tau);

        let t_next = fista_momentum(t);
        ts.push(t_next);

        if cfg.record_objectives {
            objectives.push(objective_given(dict, x, &x_k, lambda)?);
        }

        // y_{k+1} = x_k + beta_k (x_k - x_{k-1}); beta_1 = 0, so y_2 = x_1.
        let beta = if momentum { (t - 1.0) / t_next } else { 0.0 };
        let mut y_next = x_k.clone();
        if beta != 0.0 {
            y_next.zip_mut_with(&x_prev, |a, p| *a += beta * (*a - p));
        }

        ys.push(std::mem::replace(&mut y, y_next));
        xs.push(x_k.clone());
        x_prev = x_k;
        t = t_next;
    }

    let trace = FistaTrace {
        xs,
        ys,
        ts,
        objectives,
        lambda,
        config: *cfg,
    };
    Ok((trace.output().clone(), trace))
}

/// Lasso objective `lambda*||Z||_1 + 1/2*||X - D*Z||_F^2`.
pub fn csc_objective(x: &Tensor4, dict: &ConvDict, z: &Tensor4, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    objective_given(dict, x, z, lambda)
}

fn objective_given(dict: &ConvDict, x: &Tensor4, z: &Tensor4, lambda: f64) -> Result<f64> {
    let synth = dict.synthesize(z)?;
    if synth.dim() != x.dim() {
        return Err(Error::shape(
            "csc_objective",
            format!("{:?}", synth.dim()),
            format!("{:?}", x.dim()),
        ));
    }
    let fit = x
        .iter()
        .zip(synth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    Ok(lambda * l1_norm(z) + 0.5 * fit)
}

/// One ISTA step from `z`: `soft_threshold(z - (1/L) D^T (D z - X), lambda*s)`.
/// Exposed for fixed-point checks.
pub fn ista_step(x: &Tensor4, dict: &ConvDict, z: &Tensor4, lambda: f64, cfg: &FistaConfig) -> Result<Tensor4> {
    let mut residual = dict.synthesize(z)?;
    residual -= x;
    let mut g = dict.analyze(&residual)?;
    let inv_l = 1.0 / cfg.lipschitz;
    g.zip_mut_with(z, |gi, zi| *gi = zi - inv_l * *gi);
    Ok(soft_threshold_tensor(&g, lambda * cfg.threshold_scale))
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
    fn soft_threshold_branches() {
        assert_eq!(soft_threshold(2.0, 0.5), 1.5);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
        assert_eq!(soft_threshold(0.5, 0.5), 0.0);
    }

    #[test]
    #[should_panic(expected = "tau >= 0")]
    fn soft_threshold_rejects_negative_tau() {
        soft_threshold(1.0, -0.1);
    }

    #[test]
    fn momentum_start_value() {
        // t_2 from t_1 = 1 is the golden ratio.
        let t2 = fista_momentum(1.0);
        assert!((t2 - (1.0 + 5.0f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((t2 - 1.618034).abs() < 1e-6);
    }

    #[test]
    fn momentum_next_value_matches_direct_evaluation() {
        // Independent evaluation of the closed form at t = 1.618034:
        // 4 t^2 = 10.47213..., sqrt(11.47213...) = 3.38705...,
        // (1 + 3.38705...) / 2 = 2.19352...
        let t = 1.618034_f64;
        let direct = 0.5 * (1.0 + (1.0 + 4.0 * t.powi(2)).sqrt());
        assert!((fista_momentum(t) - direct).abs() < 1e-15);
        assert!((direct - 2.193527).abs() < 1e-6);
    }

    #[test]
    fn momentum_is_strictly_increasing() {
        for &t in &[1.0, 1.5, 2.0, 5.0, 100.0] {
            assert!(fista_momentum(t) > t);
        }
    }

    #[test]
    fn momentum_sequence_matches_closed_form_for_ten_terms() {
        // Recompute the recurrence with independent arithmetic order.
        let mut t = 1.0f64;
        let mut reference = 1.0f64;
        for _ in 0..10 {
            t = fista_momentum(t);
            reference = (1.0 + (4.0 * reference * reference + 1.0).sqrt()) * 0.5;
            assert!((t - reference).abs() <= 1e-12);
        }
    }

    #[test]
    fn unpenalized_identity_problem_recovers_input() {
        let d = identity_dict();
        let x = Tensor4::from_shape_fn((1, 1, 2, 3), |(_, _, y, c)| (y * 3 + c) as f64 - 2.0);
        let cfg = FistaConfig::from_estimate(200, 1.0).unwrap();
        let (z, trace) = csc_solve(&x, &d, 0.0, &cfg).unwrap();
        let rel = (&z - &x).iter().map(|v| v * v).sum::<f64>().sqrt()
            / x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rel <= 1e-8, "relative error {rel}");
        assert_eq!(trace.xs.len(), 200);
        assert_eq!(trace.ys.len(), 200);
        assert_eq!(trace.ts.len(), 201);
        assert_eq!(trace.objectives.len(), 200);
    }

    #[test]
    fn full_shrinkage_returns_zero_after_one_step() {
        // Kernel value 3 gives L = 9 >= 1, so lambda = L * max|D^T X| is
        // above the dead-zone bound for the default tau = lambda / L.
        let mut k = Array4::zeros((1, 1, 1, 1));
        k[[0, 0, 0, 0]] = 3.0;
        let d = ConvDict::new(k).unwrap();
        let x = Tensor4::from_shape_fn((1, 1, 2, 2), |(_, _, y, c)| (y * 2 + c) as f64 - 1.5);
        let l = 9.0;
        let max_atx = d.analyze(&x).unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let lambda = l * max_atx;
        let cfg = FistaConfig::new(1, l).unwrap();
        let (z, _) = csc_solve(&x, &d, lambda, &cfg).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn objective_trivial_cases() {
        let d = identity_dict();
        let x = Tensor4::from_elem((1, 1, 2, 2), 2.0);
        let z = Tensor4::zeros((1, 1, 2, 2));
        // Z = 0 -> 1/2 ||X||^2 = 8
        assert!((csc_objective(&x, &d, &z, 0.7).unwrap() - 8.0).abs() < 1e-15);
        // exact fit, lambda = 0 -> 0
        assert_eq!(csc_objective(&x, &d, &x, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_input_rejected_before_iteration() {
        let d = identity_dict();
        let mut x = Tensor4::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 0]] = f64::NAN;
        let cfg = FistaConfig::new(2, 1.0).unwrap();
        assert!(matches!(csc_solve(&x, &d, 0.1, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(FistaConfig::new(0, 1.0).is_err());
        assert!(FistaConfig::new(2, 0.0).is_err());
        assert!(FistaConfig::new(2, -1.0).is_err());
        assert!(FistaConfig::with_threshold_scale(2, 1.0, 0.0).is_err());
        let cfg = FistaConfig::new(2, 1.0).unwrap();
        let d = identity_dict();
        let x = Tensor4::zeros((1, 1, 2, 2));
        assert!(csc_solve(&x, &d, -0.1, &cfg).is_err());
    }

    #[test]
    fn fixed_point_is_stationary_under_one_more_step() {
        // For the identity dictionary the lasso minimizer has the closed
        // form x* = soft_threshold(X, lambda), which is a fixed point of the
        // ISTA map for any valid L >= 1.
        let d = identity_dict();
        let x = Tensor4::from_shape_fn((1, 1, 3, 3), |(_, _, y, c)| ((y * 3 + c) as f64 - 4.0) / 2.0);
        let lambda = 0.8;
        let cfg = FistaConfig::new(1, 1.0).unwrap();
        let fixed = soft_threshold_tensor(&x, lambda);
        let stepped = ista_step(&x, &d, &fixed, lambda, &cfg).unwrap();
        let max_diff = fixed
            .iter()
            .zip(stepped.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "moved by {max_diff}");

        // Same statement with a looser step size.
        let cfg2 = FistaConfig::new(1, 1.7).unwrap();
        let stepped2 = ista_step(&x, &d, &fixed, lambda, &cfg2).unwrap();
        let max_diff2 = fixed
            .iter()
            .zip(stepped2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff2 <= 1e-12, "moved by {max_diff2}");
    }
}
