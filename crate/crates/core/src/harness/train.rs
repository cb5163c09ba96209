//! The training loop: minibatch updates under a schedule, periodic curvature
//! probes and evaluation, and event / status classification.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::data::{flip_crop, load_dataset, Augmentation, DatasetSpec};
use crate::model::{Bound, Fcn, LossKind, Model, NetworkSpec, Samples};
use crate::numerics::{all_finite, FlatVector, RngStream};
use crate::optim::{apply_step, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::probe::{preconditioned_sharpness, sharpness, threshold_curves, EigConfig};
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Event {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "LOSS_SPIKE")]
    LossSpike,
    #[serde(rename = "DIVERGED")]
    Diverged,
    #[serde(rename = "FAILED")]
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum RunStatus {
    #[serde(rename = "CONVERGED")]
    Converged,
    #[serde(rename = "DIVERGED")]
    Diverged,
    #[serde(rename = "FAILED")]
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Converged => "CONVERGED",
            Self::Diverged => "DIVERGED",
            Self::Failed => "FAILED",
        }
    }
}

/// One logged training step. Quantities are measured at the parameters the
/// step starts from; `lr` is the rate the step uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub lr: f64,
    pub minibatch_loss: f64,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub sharpness: Option<f64>,
    pub precond_sharpness: Option<f64>,
    pub thr_gd: Option<f64>,
    pub thr_mom: Option<f64>,
    pub thr_adam: Option<f64>,
    pub event: Event,
}

/// Everything about a run except the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSpec,
    pub steps: u64,
    /// `None` trains full batch.
    pub batch_size: Option<usize>,
    /// Probe sharpness every this many steps (0 disables probes).
    pub probe_every: u64,
    pub probe_precond: bool,
    pub eig: EigConfig,
    /// Evaluate on the test split every this many steps (0: only at the end).
    pub eval_every: u64,
    pub seed: u64,
    /// Diverged once the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    /// Spike marker: minibatch loss above this multiple of the best train loss.
    pub spike_factor: f64,
    /// Failure: final train accuracy below this multiple of chance.
    pub failure_factor: f64,
    /// Augmentation applied to the training split each epoch.
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleSpec::constant(0.01),
            steps: 1000,
            batch_size: None,
            probe_every: 10,
            probe_precond: false,
            eig: EigConfig::default(),
            eval_every: 100,
            seed: 0,
            divergence_factor: 1e6,
            spike_factor: 2.0,
            failure_factor: 1.5,
            augmentation: Augmentation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub steps_run: u64,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    pub final_train_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub initial_sharpness: Option<f64>,
    pub spikes: usize,
    /// Hidden layers whose activations are identically zero at the end
    /// (informational).
    pub dead_layers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<TrajectoryRow>,
    pub summary: RunSummary,
    pub final_params: FlatVector,
}

/// Minibatch source: shuffled epochs drawn from a dedicated random stream.
struct Batcher<'a> {
    data: &'a Samples,
    batch: Option<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: RngStream,
    augmentation: Augmentation,
    epoch_data: Option<Samples>,
}

impl<'a> Batcher<'a> {
    fn new(
        data: &'a Samples,
        batch: Option<usize>,
        rng: RngStream,
        augmentation: Augmentation,
    ) -> Self {
        let batch = batch.filter(|&b| b > 0 && b < data.len());
        Self {
            data,
            batch,
            order: (0..data.len()).collect(),
            cursor: data.len(),
            rng,
            augmentation,
            epoch_data: None,
        }
    }

    fn new_epoch(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
        if self.augmentation == Augmentation::FlipCrop {
            let mut aug = self.data.clone();
            aug.x = flip_crop(&self.data.x, 4, &mut self.rng);
            self.epoch_data = Some(aug);
        }
    }

    /// Returns a minibatch, or `None` when the full (unaugmented) split is
    /// the batch.
    fn next(&mut self) -> Option<Samples> {
        let source_is_plain = self.augmentation == Augmentation::None;
        match self.batch {
            None if source_is_plain => None,
            None => {
                self.new_epoch();
                self.epoch_data.clone()
            }
            Some(b) => {
                if self.cursor + b > self.order.len() {
                    self.new_epoch();
                }
                let idx = &self.order[self.cursor..self.cursor + b];
                self.cursor += b;
                let source = self.epoch_data.as_ref().unwrap_or(self.data);
                Some(source.select(idx))
            }
        }
    }
}

fn evaluate<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    data: &Samples,
) -> (Option<f64>, Option<f64>) {
    if data.is_empty() && model.check_samples(data).is_err() {
        return (None, None);
    }
    (Some(model.loss(theta, data)), model.accuracy(theta, data))
}

/// Trains `model` from `theta0`. Abnormal endings are reported through the
/// summary status, never as errors.
pub fn train<M: Model + DeadLayers + ?Sized>(
    model: &M,
    train_data: &Samples,
    test_data: &Samples,
    theta0: &[f64],
    cfg: &TrainConfig,
) -> Result<RunResult> {
    cfg.optimizer.validate()?;
    cfg.schedule.validate()?;
    model.check_samples(train_data)?;
    let full = Bound::new(model, train_data)?;

    let mut opt = cfg.optimizer.clone();
    if opt.lr_multipliers.is_none() {
        opt.lr_multipliers = model.adam_lr_multipliers();
    }
    let mut probe_rng = RngStream::substream(cfg.seed, 1);
    let mut batcher = Batcher::new(
        train_data,
        cfg.batch_size,
        RngStream::substream(cfg.seed, 2),
        cfg.augmentation,
    );
    let mut init_rng = RngStream::substream(cfg.seed, 3);

    let mut theta = theta0.to_vec();
    let initial_loss = model.loss(&theta, train_data);
    let mut state: Option<OptimizerState> = None;
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    let mut best_train_loss = initial_loss;
    let mut best_test_acc: Option<f64> = None;
    let mut initial_sharpness = None;
    let mut sharp_vec: Option<FlatVector> = None;
    let mut precond_vec: Option<FlatVector> = None;
    let mut spikes = 0;
    let mut diverged = false;
    let mut steps_run = 0;
    let is_full_batch = cfg
        .batch_size
        .is_none_or(|b| b == 0 || b >= train_data.len())
        && cfg.augmentation == Augmentation::None;
    let diverge_limit = cfg.divergence_factor * initial_loss.abs().max(f64::MIN_POSITIVE);

    for step in 1..=cfg.steps {
        let lr = cfg.schedule.lr_at(step);
        let batch = batcher.next();
        let batch_ref = batch.as_ref().unwrap_or(train_data);
        let (mb_loss, grad) = model.loss_and_grad(&theta, batch_ref);

        let st = match state.as_mut() {
            Some(s) => s,
            None => state.insert(OptimizerState::init(
                &opt,
                theta.len(),
                Some(&grad),
                Some(&mut init_rng),
            )?),
        };

        let mut row = TrajectoryRow {
            step,
            lr,
            minibatch_loss: mb_loss,
            train_loss: None,
            test_loss: None,
            test_acc: None,
            sharpness: None,
            precond_sharpness: None,
            thr_gd: None,
            thr_mom: None,
            thr_adam: None,
            event: Event::None,
        };
        if let Ok(curves) = threshold_curves(lr, opt.beta, opt.beta1) {
            row.thr_gd = Some(curves.gd);
            row.thr_mom = Some(curves.momentum);
            row.thr_adam = Some(curves.adam);
        }

        steps_run = step;
        if !mb_loss.is_finite() || mb_loss > diverge_limit || !all_finite(&grad) {
            row.event = Event::Diverged;
            rows.push(row);
            diverged = true;
            break;
        }

        let probe_now = cfg.probe_every > 0 && (step == 1 || step % cfg.probe_every == 0);
        if probe_now {
            let est = sharpness(
                &full,
                &theta,
                &cfg.eig,
                &mut probe_rng,
                sharp_vec.as_deref(),
            )?;
            if est.converged {
                row.sharpness = Some(est.value);
                if step == 1 {
                    initial_sharpness = Some(est.value);
                }
            }
            sharp_vec = Some(est.vector);
            if cfg.probe_precond && opt.kind.is_adam_family() && st.t >= 1 {
                let est = preconditioned_sharpness(
                    &full,
                    &theta,
                    &opt,
                    st,
                    &cfg.eig,
                    &mut probe_rng,
                    precond_vec.as_deref(),
                )?;
                if est.converged {
                    row.precond_sharpness = Some(est.value);
                }
                precond_vec = Some(est.vector);
            }
        }

        let train_loss = if is_full_batch {
            Some(mb_loss)
        } else if probe_now {
            Some(model.loss(&theta, train_data))
        } else {
            None
        };
        if let Some(l) = train_loss {
            row.train_loss = Some(l);
        }
        if mb_loss > cfg.spike_factor * best_train_loss {
            row.event = Event::LossSpike;
            spikes += 1;
        }
        if let Some(l) = train_loss {
            best_train_loss = best_train_loss.min(l);
        }

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let (tl, ta) = evaluate(model, &theta, test_data);
            row.test_loss = tl;
            row.test_acc = ta;
            if let Some(a) = ta {
                best_test_acc = Some(best_test_acc.map_or(a, |b: f64| b.max(a)));
            }
        }

        apply_step(&opt, st, &mut theta, &grad, lr);
        rows.push(row);
    }

    let final_train_loss = model.loss(&theta, train_data);
    let final_train_acc = model.accuracy(&theta, train_data);
    if !diverged {
        let (_, ta) = evaluate(model, &theta, test_data);
        if let Some(a) = ta {
            best_test_acc = Some(best_test_acc.map_or(a, |b: f64| b.max(a)));
        }
        if !final_train_loss.is_finite() || final_train_loss > diverge_limit {
            diverged = true;
        }
    }
    let failed = !diverged
        && match (final_train_acc, train_data.classes) {
            (Some(acc), Some(classes)) => acc < cfg.failure_factor / classes as f64,
            _ => false,
        };
    let status = if diverged {
        RunStatus::Diverged
    } else if failed {
        if let Some(last) = rows.last_mut() {
            last.event = Event::Failed;
        }
        RunStatus::Failed
    } else {
        RunStatus::Converged
    };
    let dead_layers = if diverged {
        Vec::new()
    } else {
        model.dead_layers(&theta, train_data)
    };
    Ok(RunResult {
        rows,
        summary: RunSummary {
            status,
            steps_run,
            initial_loss,
            final_train_loss,
            final_train_acc,
            best_test_acc,
            initial_sharpness,
            spikes,
            dead_layers,
        },
        final_params: theta,
    })
}

/// Models that can report hidden layers with identically zero output.
pub trait DeadLayers {
    fn dead_layers(&self, _theta: &[f64], _samples: &Samples) -> Vec<usize> {
        Vec::new()
    }
}

impl DeadLayers for Fcn {
    fn dead_layers(&self, theta: &[f64], samples: &Samples) -> Vec<usize> {
        self.hidden_activation_norms(theta, samples)
            .into_iter()
            .enumerate()
            .filter(|(_, n)| *n == 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

impl DeadLayers for crate::model::QuadraticOracle {}

/// A complete, serializable run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub loss: LossKind,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkSpec::default(),
            loss: LossKind::Mse,
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Network dimensions follow the dataset.
    pub fn resolved_network(&self) -> NetworkSpec {
        NetworkSpec {
            in_dim: self.dataset.input_dim(),
            out_dim: self.dataset.output_dim(),
            ..self.network.clone()
        }
    }

    pub fn build_model(&self) -> Result<Fcn> {
        Fcn::new(self.resolved_network(), self.loss)
    }

    /// Initial parameters for this run's seed.
    pub fn init_params(&self, model: &Fcn) -> FlatVector {
        model
            .init_params(&mut RngStream::substream(self.train.seed, 0))
            .values
    }
}

/// Loads data, builds the network and trains it.
pub fn train_run(cfg: &RunConfig) -> Result<RunResult> {
    let data = load_dataset(&cfg.dataset)?;
    let model = cfg.build_model()?;
    let theta0 = cfg.init_params(&model);
    let mut train_cfg = cfg.train.clone();
    if train_cfg.augmentation == Augmentation::None {
        train_cfg.augmentation = cfg.dataset.augmentation;
    }
    train(&model, &data.train, &data.test, &theta0, &train_cfg)
}

/// Whether the optimizer needs the gradient at initialization.
pub fn needs_init_gradient(kind: OptimizerKind) -> bool {
    matches!(kind, OptimizerKind::GiAdam | OptimizerKind::RiAdam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuadraticOracle;

    fn quad_cfg(lr: f64, steps: u64) -> TrainConfig {
        TrainConfig {
            schedule: ScheduleSpec::constant(lr),
            steps,
            probe_every: 0,
            eval_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn quadratic_gd_diverges_past_two_over_lambda() {
        let q = QuadraticOracle::diagonal(&[4.0, 1.0]);
        let empty = Samples::empty();
        let r = train(&q, &empty, &empty, &[1.0, 1.0], &quad_cfg(0.51, 5000)).unwrap();
        assert_eq!(r.summary.status, RunStatus::Diverged);
        assert_eq!(r.rows.last().unwrap().event, Event::Diverged);
        let r = train(&q, &empty, &empty, &[1.0, 1.0], &quad_cfg(0.49, 5000)).unwrap();
        assert_eq!(r.summary.status, RunStatus::Converged);
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let q = QuadraticOracle::diagonal(&[4.0, 1.0]);
        let empty = Samples::empty();
        let r = train(&q, &empty, &empty, &[1.0, -2.0], &quad_cfg(0.0, 50)).unwrap();
        assert_eq!(r.summary.status, RunStatus::Converged);
        assert_eq!(r.final_params, vec![1.0, -2.0]);
        assert!(r
            .rows
            .iter()
            .all(|row| row.minibatch_loss == r.summary.initial_loss));
        assert!(r.rows.iter().all(|row| row.thr_gd.is_none()));
    }

    #[test]
    fn rows_follow_schedule() {
        let q = QuadraticOracle::diagonal(&[1.0]);
        let empty = Samples::empty();
        let cfg = TrainConfig {
            schedule: ScheduleSpec::linear_warmup(0.3, 16),
            ..quad_cfg(0.0, 40)
        };
        let r = train(&q, &empty, &empty, &[1.0], &cfg).unwrap();
        for (i, row) in r.rows.iter().enumerate() {
            assert_eq!(row.step, i as u64 + 1);
            assert_eq!(row.lr, cfg.schedule.lr_at(row.step));
            assert_eq!(row.thr_gd, Some(2.0 / row.lr));
        }
    }

    #[test]
    fn classification_failure_at_budget_end() {
        // A zero last layer plus zero learning rate keeps accuracy at the
        // share of the first class.
        let cfg = RunConfig {
            network: NetworkSpec {
                depth: 2,
                width: 8,
                sigma_w2_last: 0.0,
                ..Default::default()
            },
            dataset: DatasetSpec {
                n_train: 200,
                n_test: 50,
                ..Default::default()
            },
            train: TrainConfig {
                schedule: ScheduleSpec::constant(0.0),
                steps: 3,
                probe_every: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = train_run(&cfg).unwrap();
        assert_eq!(r.summary.status, RunStatus::Failed);
        assert!(r.summary.final_train_acc.unwrap() < 0.15);
        assert_eq!(r.rows.last().unwrap().event, Event::Failed);
    }

    #[test]
    fn minibatch_run_is_reproducible() {
        let cfg = RunConfig {
            network: NetworkSpec {
                depth: 3,
                width: 16,
                ..Default::default()
            },
            dataset: DatasetSpec {
                n_train: 128,
                n_test: 32,
                ..Default::default()
            },
            train: TrainConfig {
                schedule: ScheduleSpec::linear_warmup(0.05, 10),
                steps: 30,
                batch_size: Some(32),
                probe_every: 10,
                eval_every: 10,
                seed: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = train_run(&cfg).unwrap();
        let b = train_run(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.final_params, b.final_params);
        assert!(a.rows[9].sharpness.is_some());
        assert!(a.rows[9].train_loss.is_some());
        assert!(a.rows[8].train_loss.is_none());
        assert!(a.summary.best_test_acc.is_some());
    }

    #[test]
    fn adam_probe_records_preconditioned_sharpness() {
        let cfg = RunConfig {
            network: NetworkSpec {
                depth: 2,
                width: 8,
                ..Default::default()
            },
            dataset: DatasetSpec {
                n_train: 64,
                n_test: 16,
                in_dim: 6,
                classes: 3,
                ..Default::default()
            },
            train: TrainConfig {
                optimizer: OptimizerConfig::adam(),
                schedule: ScheduleSpec::constant(1e-3),
                steps: 10,
                probe_every: 5,
                probe_precond: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = train_run(&cfg).unwrap();
        // No preconditioner before the first update.
        assert!(r.rows[0].precond_sharpness.is_none());
        let p = r.rows[4].precond_sharpness.unwrap();
        let s = r.rows[4].sharpness.unwrap();
        assert!(p > s, "{p} vs {s}");
    }
}
