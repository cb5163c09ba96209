//! Learning-rate schedules. Steps are counted from 1 in the training loop, so
//! a linear warmup with `warmup_steps = 1` is a constant learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Constant {
        lr: f64,
    },
    /// `η_init + (η_trgt - η_init)·t/T_wrm`, held at `η_trgt` afterwards.
    LinearWarmup {
        #[serde(default)]
        init_lr: f64,
        target_lr: f64,
        warmup_steps: u64,
    },
    /// Warmup started at a measured critical learning rate with slope
    /// `η_trgt/T_wrm`, clamped at `η_trgt`.
    OffsetWarmup {
        init_lr: f64,
        target_lr: f64,
        warmup_steps: u64,
    },
    /// Cosine decay from `target_lr` to `min_lr` over `decay_steps`, with the
    /// step counted from the start of the decay.
    Cosine {
        target_lr: f64,
        min_lr: f64,
        decay_steps: u64,
        #[serde(default = "default_rho")]
        rho: f64,
    },
    WarmupThenCosine {
        #[serde(default)]
        init_lr: f64,
        target_lr: f64,
        warmup_steps: u64,
        min_lr: f64,
        decay_steps: u64,
        #[serde(default = "default_rho")]
        rho: f64,
    },
    /// The warmup implied by GI-Adam's bias correction: `η_trgt·√(1-β₂ᵗ)`.
    GiImplicit {
        target_lr: f64,
        beta2: f64,
    },
}

fn default_rho() -> f64 {
    1.0
}

fn linear(init: f64, target: f64, warmup: u64, t: u64) -> f64 {
    if t >= warmup {
        target
    } else {
        init + (target - init) * (t as f64 / warmup as f64)
    }
}

fn cosine(target: f64, min: f64, decay: u64, rho: f64, t: u64) -> f64 {
    if t >= decay {
        return if rho == 0.0 { target } else { min };
    }
    let phase = 0.5 * (1.0 + (PI * t as f64 / decay as f64).cos());
    min + (target - min) * phase.powf(rho)
}

impl ScheduleSpec {
    pub fn constant(lr: f64) -> Self {
        Self::Constant { lr }
    }

    pub fn linear_warmup(target_lr: f64, warmup_steps: u64) -> Self {
        Self::LinearWarmup {
            init_lr: 0.0,
            target_lr,
            warmup_steps,
        }
    }

    /// Cosine decay with the default floor `η_trgt/10` and `ρ = 1`.
    pub fn cosine(target_lr: f64, decay_steps: u64) -> Self {
        Self::Cosine {
            target_lr,
            min_lr: target_lr / 10.0,
            decay_steps,
            rho: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, x: f64| {
            if x >= 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} = {x} must be finite and >= 0"
                )))
            }
        };
        let positive_steps = |name: &str, n: u64| {
            if n >= 1 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be >= 1")))
            }
        };
        match *self {
            Self::Constant { lr } => nonneg("lr", lr),
            Self::LinearWarmup {
                init_lr,
                target_lr,
                warmup_steps,
            }
            | Self::OffsetWarmup {
                init_lr,
                target_lr,
                warmup_steps,
            } => {
                nonneg("init_lr", init_lr)?;
                nonneg("target_lr", target_lr)?;
                positive_steps("warmup_steps", warmup_steps)
            }
            Self::Cosine {
                target_lr,
                min_lr,
                decay_steps,
                rho,
            } => {
                nonneg("target_lr", target_lr)?;
                nonneg("min_lr", min_lr)?;
                nonneg("rho", rho)?;
                positive_steps("decay_steps", decay_steps)
            }
            Self::WarmupThenCosine {
                init_lr,
                target_lr,
                warmup_steps,
                min_lr,
                decay_steps,
                rho,
            } => {
                nonneg("init_lr", init_lr)?;
                nonneg("target_lr", target_lr)?;
                nonneg("min_lr", min_lr)?;
                nonneg("rho", rho)?;
                positive_steps("warmup_steps", warmup_steps)?;
                positive_steps("decay_steps", decay_steps)
            }
            Self::GiImplicit { target_lr, beta2 } => {
                nonneg("target_lr", target_lr)?;
                if (0.0..1.0).contains(&beta2) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "beta2 = {beta2} outside [0, 1)"
                    )))
                }
            }
        }
    }

    /// Learning rate at step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        match *self {
            Self::Constant { lr } => lr,
            Self::LinearWarmup {
                init_lr,
                target_lr,
                warmup_steps,
            } => linear(init_lr, target_lr, warmup_steps, t),
            Self::OffsetWarmup {
                init_lr,
                target_lr,
                warmup_steps,
            } => {
                if t >= offset_reach(init_lr, target_lr, warmup_steps) {
                    target_lr
                } else {
                    init_lr + target_lr * (t as f64 / warmup_steps as f64)
                }
            }
            Self::Cosine {
                target_lr,
                min_lr,
                decay_steps,
                rho,
            } => cosine(target_lr, min_lr, decay_steps, rho, t),
            Self::WarmupThenCosine {
                init_lr,
                target_lr,
                warmup_steps,
                min_lr,
                decay_steps,
                rho,
            } => {
                if t <= warmup_steps {
                    linear(init_lr, target_lr, warmup_steps, t)
                } else {
                    cosine(target_lr, min_lr, decay_steps, rho, t - warmup_steps)
                }
            }
            Self::GiImplicit { target_lr, beta2 } => {
                crate::optim::gi_equivalence_schedule(target_lr, beta2, t)
            }
        }
    }

    /// Warmup rate `α = (η_trgt - η_init)/T_wrm` for the warmup variants.
    pub fn warmup_rate(&self) -> Option<f64> {
        match *self {
            Self::LinearWarmup {
                init_lr,
                target_lr,
                warmup_steps,
            }
            | Self::WarmupThenCosine {
                init_lr,
                target_lr,
                warmup_steps,
                ..
            } => Some((target_lr - init_lr) / warmup_steps as f64),
            Self::OffsetWarmup {
                target_lr,
                warmup_steps,
                ..
            } => Some(target_lr / warmup_steps as f64),
            _ => None,
        }
    }

    /// The learning rate the schedule settles at (the decay floor excluded).
    pub fn target_lr(&self) -> f64 {
        match *self {
            Self::Constant { lr } => lr,
            Self::LinearWarmup { target_lr, .. }
            | Self::OffsetWarmup { target_lr, .. }
            | Self::Cosine { target_lr, .. }
            | Self::WarmupThenCosine { target_lr, .. }
            | Self::GiImplicit { target_lr, .. } => target_lr,
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        match *self {
            Self::LinearWarmup { warmup_steps, .. }
            | Self::OffsetWarmup { warmup_steps, .. }
            | Self::WarmupThenCosine { warmup_steps, .. } => warmup_steps,
            _ => 1,
        }
    }
}

/// First step at which an offset warmup reaches its target:
/// `ceil(T_wrm (1 - η_c/η_trgt))`, or 1 when `η_c ≥ η_trgt`.
fn offset_reach(init_lr: f64, target_lr: f64, warmup_steps: u64) -> u64 {
    if init_lr >= target_lr {
        1
    } else {
        ((warmup_steps as f64) * (1.0 - init_lr / target_lr))
            .ceil()
            .max(1.0) as u64
    }
}

/// Offset warmup starting at the critical learning rate, with its `T_reach`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetWarmup {
    pub schedule: ScheduleSpec,
    pub reach_steps: u64,
}

pub fn offset_warmup(critical_lr: f64, target_lr: f64, warmup_steps: u64) -> Result<OffsetWarmup> {
    if !(target_lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target lr {target_lr} must be positive"
        )));
    }
    if !(critical_lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "critical lr {critical_lr} must be >= 0"
        )));
    }
    if warmup_steps == 0 {
        return Err(Error::InvalidArgument("warmup_steps must be >= 1".into()));
    }
    Ok(OffsetWarmup {
        schedule: ScheduleSpec::OffsetWarmup {
            init_lr: critical_lr,
            target_lr,
            warmup_steps,
        },
        reach_steps: offset_reach(critical_lr, target_lr, warmup_steps),
    })
}
