//! Runs driven by the critical learning-rate search: `η_init` selection at
//! initialization and full-batch persistent catapult warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::load_dataset;
use crate::harness::train::RunConfig;
use crate::instability::{
    estimate_critical_lr, select_eta_init, CriticalLrEstimate, EtaInitSelection, OneStepTrial,
    PcwAction, PcwConfig, PcwController, PcwPhase, SearchConfig,
};
use crate::model::{Bound, Fcn, Model};
use crate::numerics::{all_finite, RngStream};
use crate::optim::{apply_step, OptimizerConfig, OptimizerState};

fn optimizer_for(model: &Fcn, cfg: &RunConfig) -> OptimizerConfig {
    let mut opt = cfg.train.optimizer.clone();
    if opt.lr_multipliers.is_none() {
        opt.lr_multipliers = model.adam_lr_multipliers();
    }
    opt
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitSelectionReport {
    pub selection: EtaInitSelection,
    /// Trial forward passes counted by the evaluator itself.
    pub audited_forward_passes: usize,
    pub initial_loss: f64,
}

/// Measures `η_c` at initialization on the full training split and builds
/// the offset warmup to `target_lr`.
pub fn select_init_for_run(
    cfg: &RunConfig,
    search: &SearchConfig,
    target_lr: f64,
    warmup_steps: u64,
) -> Result<InitSelectionReport> {
    let data = load_dataset(&cfg.dataset)?;
    let model = cfg.build_model()?;
    let opt = optimizer_for(&model, cfg);
    opt.validate()?;
    let theta0 = cfg.init_params(&model);
    let obj = Bound::new(&model, &data.train)?;
    let (loss0, grad0) = model.loss_and_grad(&theta0, &data.train);
    let mut trial = OneStepTrial::new(&obj, &theta0, loss0, &grad0, &opt).with_seed(cfg.train.seed);
    let selection = select_eta_init(&mut trial, search, target_lr, warmup_steps)?;
    Ok(InitSelectionReport {
        audited_forward_passes: trial.forward_passes(),
        selection,
        initial_loss: loss0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcwRunConfig {
    /// Network, data, optimizer and seed; `train.steps` is the step budget.
    pub run: RunConfig,
    pub target_lr: f64,
    pub pcw: PcwConfig,
    /// Steps to keep training at `η_trgt` once it is reached.
    pub settle_steps: u64,
}

impl Default for PcwRunConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            target_lr: 0.1,
            pcw: PcwConfig::default(),
            settle_steps: 100,
        }
    }
}

/// A learning-rate increase and the loss excursion that followed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatapultRecord {
    /// First step run at the new learning rate.
    pub step: u64,
    pub lr: f64,
    pub reference_loss: f64,
    pub peak_loss: f64,
    /// First step whose loss fell below `reference_loss`.
    pub recovered_at: Option<u64>,
    pub forward_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcwOutcome {
    /// Learning rate used at each step.
    pub lrs: Vec<f64>,
    /// Full-batch loss at the start of each step.
    pub losses: Vec<f64>,
    pub catapults: Vec<CatapultRecord>,
    pub phase: PcwPhase,
    pub reached_at: Option<u64>,
    pub diverged: bool,
    pub forward_passes: usize,
}

impl PcwOutcome {
    pub fn lr_non_decreasing(&self) -> bool {
        self.lrs.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn all_recovered(&self) -> bool {
        self.catapults.iter().all(|c| c.recovered_at.is_some())
    }

    pub fn stalled(&self) -> bool {
        self.phase == PcwPhase::Stalled
    }
}

/// Full-batch training under the persistent catapult warmup controller.
/// After `η_trgt` is reached the run continues for `settle_steps` and at
/// least until the last catapult has recovered, within the step budget.
pub fn pcw_run(cfg: &PcwRunConfig) -> Result<PcwOutcome> {
    let data = load_dataset(&cfg.run.dataset)?;
    let model = cfg.run.build_model()?;
    let opt = optimizer_for(&model, &cfg.run);
    opt.validate()?;
    let obj = Bound::new(&model, &data.train)?;
    let seed = cfg.run.train.seed;
    let search_at = |theta: &[f64],
                     loss: f64,
                     grad: &[f64],
                     scfg: &SearchConfig|
     -> Result<CriticalLrEstimate> {
        let mut trial = OneStepTrial::new(&obj, theta, loss, grad, &opt).with_seed(seed);
        estimate_critical_lr(&mut trial, scfg)
    };

    let mut theta = cfg.run.init_params(&model);
    let (mut loss, mut grad) = model.loss_and_grad(&theta, &data.train);
    if !loss.is_finite() {
        return Err(Error::NonFinite("initial loss"));
    }
    let diverge_limit = cfg.run.train.divergence_factor * loss.abs().max(f64::MIN_POSITIVE);
    let mut catapults = Vec::new();
    let mut forward_passes = 0;
    let mut record = |action: &PcwAction,
                      step: u64,
                      reference_loss: f64,
                      catapults: &mut Vec<CatapultRecord>| {
        if let PcwAction::Searched { estimate, lr } = action {
            forward_passes += estimate.forward_passes;
            catapults.push(CatapultRecord {
                step,
                lr: *lr,
                reference_loss,
                peak_loss: reference_loss,
                recovered_at: None,
                forward_passes: estimate.forward_passes,
            });
        }
    };
    let (mut ctl, action) =
        PcwController::start(&theta, loss, cfg.target_lr, cfg.pcw.clone(), |s| {
            search_at(&theta, loss, &grad, s)
        })?;
    record(&action, 1, ctl.reference_loss(), &mut catapults);

    let mut state = OptimizerState::init(
        &opt,
        theta.len(),
        Some(&grad),
        Some(&mut RngStream::substream(seed, 3)),
    )?;
    let mut lrs = Vec::new();
    let mut losses = Vec::new();
    let mut reached_at = (ctl.phase() == PcwPhase::Reached).then_some(1);
    let mut diverged = false;
    for step in 1..=cfg.run.train.steps {
        if step > 1 {
            (loss, grad) = model.loss_and_grad(&theta, &data.train);
            if !loss.is_finite() || loss > diverge_limit || !all_finite(&grad) {
                diverged = true;
                break;
            }
            if let Some(open) = catapults.last_mut() {
                open.peak_loss = open.peak_loss.max(loss);
                if open.recovered_at.is_none() && loss < open.reference_loss {
                    open.recovered_at = Some(step);
                }
            }
            match ctl.phase() {
                PcwPhase::Reached => {
                    let settled = reached_at.is_some_and(|r| step >= r + cfg.settle_steps);
                    if settled && catapults.iter().all(|c| c.recovered_at.is_some()) {
                        break;
                    }
                }
                PcwPhase::Stalled => break,
                PcwPhase::Searching | PcwPhase::Waiting => {
                    let action =
                        ctl.observe(&theta, loss, |s| search_at(&theta, loss, &grad, s))?;
                    match action {
                        PcwAction::Stalled => break,
                        PcwAction::Searched { .. } => {
                            record(&action, step, ctl.reference_loss(), &mut catapults);
                            if ctl.phase() == PcwPhase::Reached {
                                reached_at = Some(step);
                            }
                        }
                        PcwAction::Wait | PcwAction::Reached => {}
                    }
                }
            }
        }
        let lr = ctl.lr();
        lrs.push(lr);
        losses.push(loss);
        apply_step(&opt, &mut state, &mut theta, &grad, lr);
    }
    Ok(PcwOutcome {
        lrs,
        losses,
        catapults,
        phase: ctl.phase(),
        reached_at,
        diverged,
        forward_passes,
    })
}
