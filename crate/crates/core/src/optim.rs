//! SGD, heavy-ball SGD, Adam and the gradient- / randomly-initialized Adam
//! variants.
//!
//! The learning rate is supplied on every step, so any schedule drives any
//! optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, FlatVector, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Sgdm,
    Adam,
    /// Adam with `v₀ = a·g₀²`.
    GiAdam,
    /// Adam with a random `v₀` matched in norm to `g₀²`.
    RiAdam,
}

impl OptimizerKind {
    pub fn is_adam_family(self) -> bool {
        matches!(self, Self::Adam | Self::GiAdam | Self::RiAdam)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Sgdm => "sgdm",
            Self::Adam => "adam",
            Self::GiAdam => "gi_adam",
            Self::RiAdam => "ri_adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Heavy-ball momentum coefficient.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `a` in `v₀ = a·g₀²`.
    pub gi_scale: f64,
    /// Per-parameter multipliers applied to Adam-family updates (µP). Filled
    /// from the network layout, never from config files.
    #[serde(skip)]
    pub lr_multipliers: Option<FlatVector>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gi_scale: 1.0,
            lr_multipliers: None,
        }
    }
}

impl OptimizerConfig {
    pub fn of_kind(kind: OptimizerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn sgd() -> Self {
        Self::of_kind(OptimizerKind::Sgd)
    }

    pub fn sgdm(beta: f64) -> Self {
        Self {
            beta,
            ..Self::of_kind(OptimizerKind::Sgdm)
        }
    }

    pub fn adam() -> Self {
        Self::of_kind(OptimizerKind::Adam)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} = {x} outside [0, 1)"
                )))
            }
        };
        unit("beta", self.beta)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps = {} must be >= 0",
                self.eps
            )));
        }
        if !(self.gi_scale >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gi_scale = {} must be >= 1",
                self.gi_scale
            )));
        }
        Ok(())
    }
}

/// Moments and step counter of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: FlatVector,
    /// Second moment; empty for the SGD family.
    pub v: FlatVector,
    /// Number of steps applied so far.
    pub t: u64,
}

impl OptimizerState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Fresh state. GI/RI variants need the gradient at initialization; RI
    /// also draws from `rng`.
    pub fn init(
        cfg: &OptimizerConfig,
        dim: usize,
        g0: Option<&[f64]>,
        rng: Option<&mut RngStream>,
    ) -> Result<Self> {
        let m = vec![0.0; dim];
        let v = match cfg.kind {
            OptimizerKind::Sgd | OptimizerKind::Sgdm => Vec::new(),
            OptimizerKind::Adam => vec![0.0; dim],
            OptimizerKind::GiAdam => {
                let g0 = g0.ok_or(Error::MissingInitGradient("gi_adam"))?;
                check_len(g0, dim)?;
                g0.iter().map(|g| cfg.gi_scale * g * g).collect()
            }
            OptimizerKind::RiAdam => {
                let g0 = g0.ok_or(Error::MissingInitGradient("ri_adam"))?;
                check_len(g0, dim)?;
                let rng = rng.ok_or(Error::MissingRng("ri_adam"))?;
                let g2: FlatVector = g0.iter().map(|g| g * g).collect();
                let target = norm(&g2);
                let mut v: FlatVector = rng.normal_vec(dim).into_iter().map(|u| u * u).collect();
                let current = norm(&v);
                if current > 0.0 {
                    let s = target / current;
                    v.iter_mut().for_each(|x| *x *= s);
                }
                v
            }
        };
        Ok(Self { m, v, t: 0 })
    }
}

fn check_len(g: &[f64], dim: usize) -> Result<()> {
    if g.len() == dim {
        Ok(())
    } else {
        Err(Error::Shape {
            expected: format!("{dim} gradient entries"),
            got: g.len().to_string(),
        })
    }
}

/// One optimizer update of `theta` in place with learning rate `lr`.
/// Non-finite gradients propagate into `theta`.
pub fn apply_step(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    theta: &mut [f64],
    g: &[f64],
    lr: f64,
) {
    debug_assert_eq!(theta.len(), g.len());
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, gi) in theta.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        OptimizerKind::Sgdm => {
            for ((p, m), gi) in theta.iter_mut().zip(state.m.iter_mut()).zip(g) {
                *m = gi + cfg.beta * *m;
                *p -= lr * *m;
            }
        }
        OptimizerKind::Adam | OptimizerKind::GiAdam | OptimizerKind::RiAdam => {
            let t = (state.t + 1) as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..theta.len() {
                let gi = g[i];
                let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
                state.m[i] = m;
                state.v[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let mult = cfg.lr_multipliers.as_ref().map_or(1.0, |mul| mul[i]);
                theta[i] -= lr * mult * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    state.t += 1;
}

/// Learning rate under which the bias-correction-free variant reproduces
/// GI-Adam's iterates: `η_trgt·√(1-β₂ᵗ)`.
pub fn gi_equivalence_schedule(target_lr: f64, beta2: f64, t: u64) -> f64 {
    target_lr * (1.0 - beta2.powi(t as i32)).sqrt()
}

/// Adam step without second-moment bias correction (`v̂ = v`), the
/// comparison variant for GI-Adam.
pub fn apply_step_uncorrected_v(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    theta: &mut [f64],
    g: &[f64],
    lr: f64,
) {
    let t = (state.t + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    for i in 0..theta.len() {
        let gi = g[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
        let mult = cfg.lr_multipliers.as_ref().map_or(1.0, |mul| mul[i]);
        theta[i] -= lr * mult * (state.m[i] / bc1) / (state.v[i].sqrt() + cfg.eps);
    }
    state.t += 1;
}
