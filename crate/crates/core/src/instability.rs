//! Critical learning-rate estimation from forward passes only, initial
//! learning-rate selection for warmup, and the persistent catapult warmup
//! controller.
//!
//! A *trial* takes one optimizer step from a fixed point with fresh optimizer
//! state and the gradient at that point computed once, then evaluates the
//! loss with a single forward pass. The searches below only ever look at
//! trial losses, so their cost is the number of trials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Objective;
use crate::numerics::{FlatVector, RngStream};
use crate::optim::{apply_step, OptimizerConfig, OptimizerState};
use crate::schedule::{offset_warmup, ScheduleSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// First learning rate tried by the exponential search.
    pub initial_lr: f64,
    pub growth: f64,
    /// Binary search stops once `L_uppr ≤ L₀(1+δ)`.
    pub tolerance: f64,
    /// Upper limit on the search; reaching it ends the search "capped".
    pub cap: Option<f64>,
    /// Growth steps allowed before an uncapped search gives up.
    pub max_doublings: u32,
    pub max_bisections: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            growth: 2.0,
            tolerance: 0.1,
            cap: None,
            max_doublings: 64,
            max_bisections: 200,
        }
    }
}

impl SearchConfig {
    /// Defaults for `opt`: δ = 0.01 for the Adam family, 0.1 otherwise.
    pub fn for_optimizer(opt: &OptimizerConfig) -> Self {
        let tolerance = if opt.kind.is_adam_family() { 0.01 } else { 0.1 };
        Self {
            tolerance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "initial lr {} must be > 0",
                self.initial_lr
            )));
        }
        if !(self.growth > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "growth factor {} must be > 1",
                self.growth
            )));
        }
        if !(self.tolerance > 0.0 && self.tolerance <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance {} outside (0, 1]",
                self.tolerance
            )));
        }
        if let Some(cap) = self.cap {
            if !(cap > 0.0) {
                return Err(Error::InvalidArgument(format!("cap {cap} must be > 0")));
            }
        }
        Ok(())
    }
}

/// One-step loss evaluator used by the searches.
pub trait StepTrial {
    /// `L(θ₀)`.
    fn base_loss(&self) -> f64;
    /// `L(θ₁)` after one step of size `lr` from `θ₀`.
    fn trial_loss(&mut self, lr: f64) -> f64;
}

/// Trial evaluator for an objective: fresh optimizer state at `θ₀`, gradient
/// at `θ₀` reused for every step size.
pub struct OneStepTrial<'a, O: Objective + ?Sized> {
    objective: &'a O,
    theta0: &'a [f64],
    grad0: &'a [f64],
    base_loss: f64,
    optimizer: &'a OptimizerConfig,
    seed: u64,
    forward_passes: usize,
}

impl<'a, O: Objective + ?Sized> OneStepTrial<'a, O> {
    /// `base_loss` and `grad0` are `L(θ₀)` and `∇L(θ₀)`, computed by the caller
    /// (usually as part of a training step).
    pub fn new(
        objective: &'a O,
        theta0: &'a [f64],
        base_loss: f64,
        grad0: &'a [f64],
        optimizer: &'a OptimizerConfig,
    ) -> Self {
        Self {
            objective,
            theta0,
            grad0,
            base_loss,
            optimizer,
            seed: 0,
            forward_passes: 0,
        }
    }

    /// Seed for RI-Adam's random second moment, fixed across trials.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    /// Parameters after one trial step.
    pub fn step(&self, lr: f64) -> FlatVector {
        let mut rng = RngStream::new(self.seed);
        let mut state = OptimizerState::init(
            self.optimizer,
            self.theta0.len(),
            Some(self.grad0),
            Some(&mut rng),
        )
        .expect("trial optimizer state from a gradient of matching length");
        let mut theta = self.theta0.to_vec();
        apply_step(self.optimizer, &mut state, &mut theta, self.grad0, lr);
        theta
    }
}

impl<O: Objective + ?Sized> StepTrial for OneStepTrial<'_, O> {
    fn base_loss(&self) -> f64 {
        self.base_loss
    }

    fn trial_loss(&mut self, lr: f64) -> f64 {
        let theta = self.step(lr);
        self.forward_passes += 1;
        self.objective.loss(&theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketKind {
    /// Loss increased somewhere in `(lower, upper]`.
    Bracketed,
    /// The cap was reached without a loss increase.
    Capped,
    /// The loss already increased at the initial guess.
    Degenerate,
    /// An uncapped search ran out of growth steps without a loss increase.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bracket {
    pub lower: f64,
    pub upper: f64,
    /// Trial loss at `upper`, when it was evaluated.
    pub upper_loss: Option<f64>,
    pub kind: BracketKind,
    /// Every `(lr, loss)` trial in evaluation order.
    pub trace: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalLrEstimate {
    pub lower: f64,
    pub upper: f64,
    pub critical_lr: f64,
    /// Trial forward passes spent across both stages.
    pub forward_passes: usize,
    /// Midpoint trials of the binary search.
    pub bisections: usize,
    pub kind: BracketKind,
    pub base_loss: f64,
    pub trace: Vec<(f64, f64)>,
}

impl CriticalLrEstimate {
    pub fn capped(&self) -> bool {
        self.kind == BracketKind::Capped
    }
}

fn increased(trial_loss: f64, base: f64) -> bool {
    // NaN compares false, so a non-finite trial counts as an increase.
    !(trial_loss < base)
}

/// Grows the learning rate from `cfg.initial_lr` by `cfg.growth` until one
/// step increases the loss, returning `[η/k, η]`.
pub fn exponential_search<T: StepTrial + ?Sized>(
    trial: &mut T,
    cfg: &SearchConfig,
) -> Result<Bracket> {
    cfg.validate()?;
    let base = trial.base_loss();
    let mut trace = Vec::new();
    let mut lr = cfg.initial_lr;
    let mut loss = trial.trial_loss(lr);
    trace.push((lr, loss));
    if increased(loss, base) {
        return Ok(Bracket {
            lower: lr / cfg.growth,
            upper: lr,
            upper_loss: Some(loss),
            kind: BracketKind::Degenerate,
            trace,
        });
    }
    let mut doublings = 0;
    while !increased(loss, base) {
        if let Some(cap) = cfg.cap {
            if lr >= cap {
                return Ok(Bracket {
                    lower: cap / cfg.growth,
                    upper: cap,
                    upper_loss: None,
                    kind: BracketKind::Capped,
                    trace,
                });
            }
        }
        if doublings == cfg.max_doublings {
            return Ok(Bracket {
                lower: lr / cfg.growth,
                upper: lr,
                upper_loss: Some(loss),
                kind: BracketKind::Exhausted,
                trace,
            });
        }
        lr *= cfg.growth;
        doublings += 1;
        loss = trial.trial_loss(lr);
        trace.push((lr, loss));
    }
    Ok(Bracket {
        lower: lr / cfg.growth,
        upper: lr,
        upper_loss: Some(loss),
        kind: BracketKind::Bracketed,
        trace,
    })
}

/// Bisects a bracket until the loss at its upper end is within `(1+δ)` of
/// the base loss; the estimate is the final upper end.
pub fn binary_search<T: StepTrial + ?Sized>(
    trial: &mut T,
    cfg: &SearchConfig,
    bracket: Bracket,
) -> Result<CriticalLrEstimate> {
    if !(bracket.lower < bracket.upper) {
        return Err(Error::InvertedBracket {
            lower: bracket.lower,
            upper: bracket.upper,
        });
    }
    let base = trial.base_loss();
    let Bracket {
        mut lower,
        mut upper,
        upper_loss,
        kind,
        mut trace,
    } = bracket;
    if kind != BracketKind::Bracketed {
        return Ok(CriticalLrEstimate {
            lower,
            upper,
            critical_lr: upper,
            forward_passes: trace.len(),
            bisections: 0,
            kind,
            base_loss: base,
            trace,
        });
    }
    let mut upper_loss = match upper_loss {
        Some(l) => l,
        None => {
            let l = trial.trial_loss(upper);
            trace.push((upper, l));
            l
        }
    };
    let limit = base * (1.0 + cfg.tolerance);
    let mut bisections = 0;
    // `!(a <= b)` also continues on a NaN upper loss.
    while !(upper_loss <= limit) && bisections < cfg.max_bisections {
        let mid = 0.5 * (lower + upper);
        if !(mid > lower && mid < upper) {
            break;
        }
        let mid_loss = trial.trial_loss(mid);
        trace.push((mid, mid_loss));
        bisections += 1;
        if mid_loss < base {
            lower = mid;
        } else {
            upper = mid;
            upper_loss = mid_loss;
        }
    }
    Ok(CriticalLrEstimate {
        lower,
        upper,
        critical_lr: upper,
        forward_passes: trace.len(),
        bisections: bisections as usize,
        kind,
        base_loss: base,
        trace,
    })
}

/// Both search stages.
pub fn estimate_critical_lr<T: StepTrial + ?Sized>(
    trial: &mut T,
    cfg: &SearchConfig,
) -> Result<CriticalLrEstimate> {
    let bracket = exponential_search(trial, cfg)?;
    binary_search(trial, cfg, bracket)
}

/// Outcome of choosing `η_init` for a warmup run.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaInitSelection {
    pub init_lr: f64,
    pub estimate: CriticalLrEstimate,
    pub schedule: ScheduleSpec,
    /// Steps until the offset warmup reaches `η_trgt`.
    pub reach_steps: u64,
    /// `T_wrm·min(η_c/η_trgt, 1) - T_fp/2`, the net steps saved.
    pub saved_steps: f64,
    /// No loss increase was found: `η_init = η_trgt/10` instead.
    pub fallback: bool,
}

/// Sets `η_init = η_c` for a warmup to `target_lr` over `warmup_steps`.
/// The search runs uncapped so the ratio `η_c/η_trgt` is measured even
/// when it exceeds one.
pub fn select_eta_init<T: StepTrial + ?Sized>(
    trial: &mut T,
    cfg: &SearchConfig,
    target_lr: f64,
    warmup_steps: u64,
) -> Result<EtaInitSelection> {
    let uncapped = SearchConfig {
        cap: None,
        ..cfg.clone()
    };
    let estimate = estimate_critical_lr(trial, &uncapped)?;
    let fallback = estimate.kind == BracketKind::Exhausted;
    let init_lr = if fallback {
        target_lr / 10.0
    } else {
        estimate.critical_lr
    };
    let warmup = offset_warmup(init_lr, target_lr, warmup_steps)?;
    let ratio = (init_lr / target_lr).min(1.0);
    let saved_steps = warmup_steps as f64 * ratio - estimate.forward_passes as f64 / 2.0;
    Ok(EtaInitSelection {
        init_lr,
        schedule: warmup.schedule,
        reach_steps: warmup.reach_steps,
        saved_steps,
        fallback,
        estimate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcwPhase {
    Searching,
    Waiting,
    Reached,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcwConfig {
    pub search: SearchConfig,
    /// Steps to wait for the loss to return below the reference before
    /// giving up.
    pub max_wait: u64,
}

impl Default for PcwConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            max_wait: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PcwAction {
    /// A new reference was set and the learning rate raised.
    Searched {
        estimate: CriticalLrEstimate,
        lr: f64,
    },
    Wait,
    Reached,
    Stalled,
}

/// Persistent catapult warmup: repeatedly raise the learning rate to the
/// upper end of a fresh critical-LR bracket, then wait for the loss to fall
/// below the reference loss before searching again.
#[derive(Debug, Clone)]
pub struct PcwController {
    reference: FlatVector,
    reference_loss: f64,
    lr: f64,
    target_lr: f64,
    phase: PcwPhase,
    waited: u64,
    cfg: PcwConfig,
    searches: usize,
}

impl PcwController {
    /// Starts at `theta0` with a search there (initial guess `cfg.search.initial_lr`).
    pub fn start<F>(
        theta0: &[f64],
        loss0: f64,
        target_lr: f64,
        cfg: PcwConfig,
        search: F,
    ) -> Result<(Self, PcwAction)>
    where
        F: FnOnce(&SearchConfig) -> Result<CriticalLrEstimate>,
    {
        if !(target_lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target lr {target_lr} must be > 0"
            )));
        }
        let mut ctl = Self {
            reference: theta0.to_vec(),
            reference_loss: loss0,
            lr: 0.0,
            target_lr,
            phase: PcwPhase::Searching,
            waited: 0,
            cfg,
            searches: 0,
        };
        let search_cfg = SearchConfig {
            cap: Some(target_lr),
            ..ctl.cfg.search.clone()
        };
        let action = ctl.apply_search(search(&search_cfg)?);
        Ok((ctl, action))
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn phase(&self) -> PcwPhase {
        self.phase
    }

    pub fn reference_loss(&self) -> f64 {
        self.reference_loss
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn searches(&self) -> usize {
        self.searches
    }

    fn apply_search(&mut self, estimate: CriticalLrEstimate) -> PcwAction {
        self.searches += 1;
        self.lr = self.lr.max(estimate.upper).min(self.target_lr);
        self.waited = 0;
        if self.lr >= self.target_lr {
            self.phase = PcwPhase::Reached;
        } else {
            self.phase = PcwPhase::Waiting;
        }
        PcwAction::Searched {
            estimate,
            lr: self.lr,
        }
    }

    /// Feeds the current point and its loss. `search` runs the critical learning-rate search at
    /// `theta` with the given configuration when a new reference is taken.
    pub fn observe<F>(&mut self, theta: &[f64], loss: f64, search: F) -> Result<PcwAction>
    where
        F: FnOnce(&SearchConfig) -> Result<CriticalLrEstimate>,
    {
        match self.phase {
            PcwPhase::Reached => return Ok(PcwAction::Reached),
            PcwPhase::Stalled => return Ok(PcwAction::Stalled),
            PcwPhase::Searching | PcwPhase::Waiting => {}
        }
        if loss < self.reference_loss {
            self.phase = PcwPhase::Searching;
            self.reference.clear();
            self.reference.extend_from_slice(theta);
            self.reference_loss = loss;
            let search_cfg = SearchConfig {
                initial_lr: self.lr.max(self.cfg.search.initial_lr),
                cap: Some(self.target_lr),
                ..self.cfg.search.clone()
            };
            let estimate = search(&search_cfg)?;
            return Ok(self.apply_search(estimate));
        }
        self.waited += 1;
        if self.waited > self.cfg.max_wait {
            self.phase = PcwPhase::Stalled;
            return Ok(PcwAction::Stalled);
        }
        Ok(PcwAction::Wait)
    }
}
