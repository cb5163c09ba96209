//! Curvature probes: finite-difference Hessian-vector products, power
//! iteration with restarts, sharpness and pre-conditioned sharpness, and the
//! instability-threshold monitor curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Objective;
use crate::numerics::{axpy, dot, norm, normalize, FlatVector, RngStream};
use crate::optim::{OptimizerConfig, OptimizerState};

pub const DEFAULT_HVP_EPS: f64 = 1e-4;

/// Hessian-vector product by central differences of the gradient:
/// `(g(θ + εv̂) - g(θ - εv̂)) / 2ε · ‖v‖`.
pub fn hvp<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    v: &[f64],
    eps0: f64,
) -> Result<FlatVector> {
    let v_norm = norm(v);
    if v_norm == 0.0 {
        return Err(Error::ZeroVector("hvp"));
    }
    if !(eps0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "hvp step {eps0} must be positive"
        )));
    }
    if let Some(hv) = obj.exact_hvp(theta, v) {
        return Ok(hv);
    }
    let step = eps0 / v_norm;
    let mut plus = theta.to_vec();
    axpy(step, v, &mut plus);
    let mut minus = theta.to_vec();
    axpy(-step, v, &mut minus);
    let (_, g_plus) = obj.loss_and_grad(&plus);
    let (_, g_minus) = obj.loss_and_grad(&minus);
    let factor = v_norm / (2.0 * eps0);
    Ok(g_plus
        .iter()
        .zip(&g_minus)
        .map(|(a, b)| (a - b) * factor)
        .collect())
}

/// Power-iteration settings. The restart protocol: an attempt that has not
/// converged after `restart_after` iterations is restarted from a fresh random
/// vector, at most `max_restarts` times; the last attempt may run `max_iter`
/// iterations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EigConfig {
    pub tol: f64,
    pub restart_after: usize,
    pub max_restarts: usize,
    pub max_iter: usize,
    pub hvp_eps: f64,
}

impl Default for EigConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            restart_after: 100,
            max_restarts: 10,
            max_iter: 1000,
            hvp_eps: DEFAULT_HVP_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigEstimate {
    pub value: f64,
    pub vector: FlatVector,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
}

struct PowerRun {
    value: f64,
    vector: FlatVector,
    /// `‖A v‖` at the last iterate; bounds the spectral radius from below.
    image_norm: f64,
    residual: f64,
    iterations: usize,
    restarts: usize,
    converged: bool,
}

fn power_with_restarts<F>(
    apply: &mut F,
    dim: usize,
    rng: &mut RngStream,
    cfg: &EigConfig,
    init: Option<&[f64]>,
) -> Result<PowerRun>
where
    F: FnMut(&[f64]) -> Result<FlatVector>,
{
    let mut total = 0;
    let mut last = None;
    for attempt in 0..=cfg.max_restarts {
        let cap = if attempt == cfg.max_restarts {
            cfg.max_iter
        } else {
            cfg.restart_after
        };
        let mut v = match (attempt, init) {
            (0, Some(v0)) if v0.len() == dim && norm(v0) > 0.0 => {
                let mut v = v0.to_vec();
                normalize(&mut v);
                v
            }
            _ => rng.unit_vector(dim),
        };
        let mut prev: Option<f64> = None;
        let mut value = f64::NAN;
        let mut image_norm = 0.0;
        let mut residual = f64::INFINITY;
        let mut converged = false;
        for _ in 0..cap {
            total += 1;
            let w = apply(&v)?;
            value = dot(&v, &w);
            image_norm = norm(&w);
            if !value.is_finite() || !image_norm.is_finite() {
                break;
            }
            residual = (image_norm * image_norm - value * value).max(0.0).sqrt();
            if image_norm == 0.0 {
                converged = true;
                break;
            }
            if let Some(p) = prev {
                if (value - p).abs() <= cfg.tol * value.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            prev = Some(value);
            v = w;
            scale_to_unit(&mut v, image_norm);
        }
        let run = PowerRun {
            value,
            vector: v,
            image_norm,
            residual,
            iterations: total,
            restarts: attempt,
            converged,
        };
        if converged {
            return Ok(run);
        }
        last = Some(run);
    }
    Ok(last.expect("at least one attempt"))
}

fn scale_to_unit(v: &mut [f64], n: f64) {
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// Algebraically largest eigenvalue of a symmetric operator.
///
/// Power iteration converges to the eigenvalue of largest magnitude. When
/// that one is negative (or the iterate is trapped between a `±λ` pair),
/// the operator is shifted by the spectral-radius estimate and the shift is
/// subtracted from the result.
pub fn top_eigen<F>(
    mut apply: F,
    dim: usize,
    rng: &mut RngStream,
    cfg: &EigConfig,
    init: Option<&[f64]>,
) -> Result<EigEstimate>
where
    F: FnMut(&[f64]) -> Result<FlatVector>,
{
    if dim == 0 {
        return Err(Error::InvalidArgument("zero-dimensional operator".into()));
    }
    let first = power_with_restarts(&mut apply, dim, rng, cfg, init)?;
    // A converged dominant pair has a small residual relative to its value;
    // a `±λ` oscillation leaves a residual of order |λ|.
    let settled = first.residual <= 1e-2 * first.value.abs().max(f64::MIN_POSITIVE);
    // An unconverged run usually means two dominant magnitudes of opposite
    // sign; the shifted operator separates them.
    let finite = first.value.is_finite() && first.image_norm.is_finite();
    if !finite || (first.converged && first.value >= 0.0 && settled) || first.image_norm == 0.0 {
        return Ok(EigEstimate {
            value: first.value,
            vector: first.vector,
            iterations: first.iterations,
            restarts: first.restarts,
            converged: first.converged,
        });
    }
    let shift = first.value.abs().max(first.image_norm);
    let mut shifted = |v: &[f64]| -> Result<FlatVector> {
        let mut w = apply(v)?;
        axpy(shift, v, &mut w);
        Ok(w)
    };
    let second = power_with_restarts(&mut shifted, dim, rng, cfg, None)?;
    Ok(EigEstimate {
        value: second.value - shift,
        vector: second.vector,
        iterations: first.iterations + second.iterations,
        restarts: first.restarts.max(second.restarts),
        converged: second.converged,
    })
}

/// λ^H: top Hessian eigenvalue of `obj` at `theta`.
pub fn sharpness<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    cfg: &EigConfig,
    rng: &mut RngStream,
    init: Option<&[f64]>,
) -> Result<EigEstimate> {
    top_eigen(
        |v| hvp(obj, theta, v, cfg.hvp_eps),
        obj.dim(),
        rng,
        cfg,
        init,
    )
}

/// Diagonal of Adam's preconditioner `P = (1-β₁ᵗ)[diag(v/(1-β₂ᵗ)) + εI]`.
pub fn adam_preconditioner(opt: &OptimizerConfig, state: &OptimizerState) -> Result<FlatVector> {
    if state.t == 0 {
        return Err(Error::InvalidArgument(
            "preconditioner needs at least one step".into(),
        ));
    }
    if let Some((index, &value)) = state.v.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeSecondMoment { index, value });
    }
    let t = state.t as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    Ok(state.v.iter().map(|v| bc1 * (v / bc2 + opt.eps)).collect())
}

/// λ_max(P⁻¹H) through the similar symmetric operator `P^{-1/2} H P^{-1/2}`.
pub fn preconditioned_sharpness<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    opt: &OptimizerConfig,
    state: &OptimizerState,
    cfg: &EigConfig,
    rng: &mut RngStream,
    init: Option<&[f64]>,
) -> Result<EigEstimate> {
    let p = adam_preconditioner(opt, state)?;
    let inv_sqrt: FlatVector = p.iter().map(|x| 1.0 / x.sqrt()).collect();
    preconditioned_top_eigen(
        |u| hvp(obj, theta, u, cfg.hvp_eps),
        &inv_sqrt,
        rng,
        cfg,
        init,
    )
}

/// Top eigenvalue of `D H D` for a diagonal `D`, given an `H` action.
pub fn preconditioned_top_eigen<F>(
    mut apply_h: F,
    inv_sqrt_p: &[f64],
    rng: &mut RngStream,
    cfg: &EigConfig,
    init: Option<&[f64]>,
) -> Result<EigEstimate>
where
    F: FnMut(&[f64]) -> Result<FlatVector>,
{
    let apply = |u: &[f64]| -> Result<FlatVector> {
        let scaled: FlatVector = u.iter().zip(inv_sqrt_p).map(|(a, d)| a * d).collect();
        let mut w = apply_h(&scaled)?;
        w.iter_mut().zip(inv_sqrt_p).for_each(|(a, d)| *a *= d);
        Ok(w)
    };
    top_eigen(apply, inv_sqrt_p.len(), rng, cfg, init)
}

/// Instability-threshold monitor values at learning rate `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurves {
    /// `2/η` (gradient descent).
    pub gd: f64,
    /// `(2+2β)/η` (heavy-ball momentum).
    pub momentum: f64,
    /// `(2+2β₁)/(η(1-β₁))` (Adam, for λ^{P⁻¹H}).
    pub adam: f64,
}

pub fn threshold_curves(lr: f64, beta: f64, beta1: f64) -> Result<ThresholdCurves> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold curves need lr > 0, got {lr}"
        )));
    }
    Ok(ThresholdCurves {
        gd: 2.0 / lr,
        momentum: (2.0 + 2.0 * beta) / lr,
        adam: (2.0 + 2.0 * beta1) / (lr * (1.0 - beta1)),
    })
}
