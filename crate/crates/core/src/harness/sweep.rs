//! Phase-diagram sweeps over (warmup duration, target learning rate).
//!
//! Columns are target learning rates in increasing order. Every
//! (duration, seed) cell of a column runs concurrently; the sweep stops after
//! the first column in which no cell trains successfully.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::load_dataset;
use crate::harness::train::{train, RunConfig, RunStatus};
use crate::model::{Bound, Fcn, Samples};
use crate::numerics::RngStream;
use crate::probe::{sharpness, EigConfig};
use crate::schedule::ScheduleSpec;

/// One sweep run, summarized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub warmup_steps: u64,
    pub target_lr: f64,
    pub best_test_acc: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub status: RunStatus,
    pub steps_run: u64,
    pub seed: u64,
}

impl PhaseCell {
    pub fn key(&self) -> CellKey {
        (self.warmup_steps, self.target_lr.to_bits(), self.seed)
    }
}

/// `(T_wrm, η_trgt bits, seed)`.
pub type CellKey = (u64, u64, u64);

/// Target learning rates; column `c` uses exponent `x = start + c·step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrGrid {
    /// `2^x / λ₀^H`, with `λ₀^H` measured per seed at initialization.
    SharpnessAnchored {
        start: f64,
        step: f64,
    },
    /// `base · 2^x`.
    Geometric {
        base: f64,
        start: f64,
        step: f64,
    },
    Explicit {
        lrs: Vec<f64>,
    },
}

impl LrGrid {
    pub fn sharpness_anchored() -> Self {
        Self::SharpnessAnchored {
            start: 0.0,
            step: 1.0,
        }
    }

    pub fn geometric(base: f64) -> Self {
        Self::Geometric {
            base,
            start: 0.0,
            step: 1.0,
        }
    }

    fn lr(&self, column: usize, lambda0: f64) -> Option<f64> {
        match self {
            Self::SharpnessAnchored { start, step } => {
                Some((start + column as f64 * step).exp2() / lambda0)
            }
            Self::Geometric { base, start, step } => {
                Some(base * (start + column as f64 * step).exp2())
            }
            Self::Explicit { lrs } => lrs.get(column).copied(),
        }
    }

    fn needs_sharpness(&self) -> bool {
        matches!(self, Self::SharpnessAnchored { .. })
    }
}

/// Which column ends the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// `first_diverged` for SGD-family optimizers, `first_failed` for Adam.
    #[default]
    Auto,
    /// Stop after a column where every cell diverged.
    FirstDiverged,
    /// Stop after a column where no cell converged.
    FirstFailed,
    /// Run every column up to `max_columns`.
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Template run; its schedule is replaced per cell by a linear warmup.
    pub base: RunConfig,
    pub warmup_steps: Vec<u64>,
    pub seeds: Vec<u64>,
    pub grid: LrGrid,
    pub stop: StopRule,
    pub max_columns: usize,
    /// Worker threads (0: one per core).
    pub workers: usize,
    /// Eigensolver settings for `λ₀^H`.
    pub eig: EigConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            base: RunConfig::default(),
            warmup_steps: vec![1, 4, 16, 64, 256],
            seeds: vec![0],
            grid: LrGrid::sharpness_anchored(),
            stop: StopRule::Auto,
            max_columns: 16,
            workers: 0,
            eig: EigConfig::default(),
        }
    }
}

impl SweepConfig {
    /// `{1, 2, 4, ..., 2^k}`.
    pub fn powers_of_two(k: u32) -> Vec<u64> {
        (0..=k).map(|i| 1u64 << i).collect()
    }

    fn effective_stop(&self) -> StopRule {
        match self.stop {
            StopRule::Auto if self.base.train.optimizer.kind.is_adam_family() => {
                StopRule::FirstFailed
            }
            StopRule::Auto => StopRule::FirstDiverged,
            other => other,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.warmup_steps.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "sweep needs warmup durations and seeds".into(),
            ));
        }
        if self.warmup_steps.contains(&0) {
            return Err(Error::InvalidArgument(
                "warmup durations must be >= 1".into(),
            ));
        }
        let unique: HashSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("duplicate sweep seeds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// All cells, previously existing ones included, in grid order.
    pub cells: Vec<PhaseCell>,
    /// `λ₀^H` per seed (anchored grids only).
    pub initial_sharpness: Vec<(u64, f64)>,
    pub columns: usize,
}

/// `λ₀^H` of `model` on `data` at `theta`.
pub fn initial_sharpness(
    model: &Fcn,
    data: &Samples,
    theta: &[f64],
    eig: &EigConfig,
    seed: u64,
) -> Result<f64> {
    let obj = Bound::new(model, data)?;
    let est = sharpness(&obj, theta, eig, &mut RngStream::substream(seed, 7), None)?;
    // An unconverged estimate is still a Rayleigh quotient of the last
    // iterate, which is good enough to anchor a power-of-two grid.
    if !(est.value > 0.0 && est.value.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "initial sharpness {} is unusable for an anchored grid",
            est.value
        )));
    }
    Ok(est.value)
}

/// Runs the sweep. Cells already in `existing` are reused, not rerun. Each
/// newly finished cell is passed to `sink` from the calling thread, in grid
/// order, so an append-only results file has a single writer.
pub fn sweep<F>(cfg: &SweepConfig, existing: &[PhaseCell], mut sink: F) -> Result<SweepOutcome>
where
    F: FnMut(&PhaseCell) -> Result<()>,
{
    cfg.validate()?;
    let data = load_dataset(&cfg.base.dataset)?;
    let model = cfg.base.build_model()?;
    let stop = cfg.effective_stop();

    let mut init = HashMap::new();
    let mut lambdas = Vec::new();
    for &seed in &cfg.seeds {
        let run = RunConfig {
            train: crate::harness::train::TrainConfig {
                seed,
                ..cfg.base.train.clone()
            },
            ..cfg.base.clone()
        };
        let theta0 = run.init_params(&model);
        if cfg.grid.needs_sharpness() {
            lambdas.push((
                seed,
                initial_sharpness(&model, &data.train, &theta0, &cfg.eig, seed)?,
            ));
        }
        init.insert(seed, theta0);
    }
    let lambda_of = |seed: u64| {
        lambdas
            .iter()
            .find(|(s, _)| *s == seed)
            .map_or(1.0, |(_, l)| *l)
    };

    let done: HashMap<CellKey, PhaseCell> = existing.iter().map(|c| (c.key(), c.clone())).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;

    let mut cells = Vec::new();
    let mut columns = 0;
    for column in 0..cfg.max_columns {
        let mut jobs = Vec::new();
        for &seed in &cfg.seeds {
            let Some(lr) = cfg.grid.lr(column, lambda_of(seed)) else {
                continue;
            };
            for &warmup in &cfg.warmup_steps {
                jobs.push((warmup, lr, seed));
            }
        }
        if jobs.is_empty() {
            break;
        }
        columns += 1;
        let fresh: Vec<(usize, PhaseCell)> = pool.install(|| {
            jobs.par_iter()
                .enumerate()
                .filter(|(_, &(w, lr, s))| !done.contains_key(&(w, lr.to_bits(), s)))
                .map(|(i, &(warmup, lr, seed))| {
                    run_cell(cfg, &model, &data, &init[&seed], warmup, lr, seed).map(|c| (i, c))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut fresh = fresh.into_iter().peekable();
        let mut column_cells = Vec::with_capacity(jobs.len());
        for (i, &(w, lr, s)) in jobs.iter().enumerate() {
            let cell = match fresh.peek() {
                Some((j, _)) if *j == i => {
                    let (_, cell) = fresh.next().expect("peeked");
                    sink(&cell)?;
                    cell
                }
                _ => done[&(w, lr.to_bits(), s)].clone(),
            };
            column_cells.push(cell);
        }
        let end = match stop {
            StopRule::FirstDiverged => column_cells.iter().all(|c| c.status == RunStatus::Diverged),
            StopRule::FirstFailed => column_cells
                .iter()
                .all(|c| c.status != RunStatus::Converged),
            StopRule::Never | StopRule::Auto => false,
        };
        cells.extend(column_cells);
        if end {
            break;
        }
    }
    Ok(SweepOutcome {
        cells,
        initial_sharpness: lambdas,
        columns,
    })
}

fn run_cell(
    cfg: &SweepConfig,
    model: &Fcn,
    data: &crate::harness::data::Dataset,
    theta0: &[f64],
    warmup: u64,
    lr: f64,
    seed: u64,
) -> Result<PhaseCell> {
    let mut train_cfg = cfg.base.train.clone();
    train_cfg.seed = seed;
    train_cfg.schedule = ScheduleSpec::linear_warmup(lr, warmup);
    if train_cfg.augmentation == crate::harness::data::Augmentation::None {
        train_cfg.augmentation = cfg.base.dataset.augmentation;
    }
    let result = train(model, &data.train, &data.test, theta0, &train_cfg)?;
    let s = result.summary;
    Ok(PhaseCell {
        warmup_steps: warmup,
        target_lr: lr,
        best_test_acc: s.best_test_acc,
        final_train_acc: if s.status == RunStatus::Diverged {
            None
        } else {
            s.final_train_acc
        },
        status: s.status,
        steps_run: s.steps_run,
        seed,
    })
}

/// Largest target learning rate that did not diverge, per warmup duration.
pub fn max_stable_lr(cells: &[PhaseCell], seed: u64, warmup: u64) -> Option<f64> {
    cells
        .iter()
        .filter(|c| c.seed == seed && c.warmup_steps == warmup && c.status != RunStatus::Diverged)
        .map(|c| c.target_lr)
        .fold(None, |m, lr| Some(m.map_or(lr, |m: f64| m.max(lr))))
}

/// Smallest target learning rate whose run did not converge.
pub fn min_failed_lr(cells: &[PhaseCell], seed: u64, warmup: u64) -> Option<f64> {
    cells
        .iter()
        .filter(|c| c.seed == seed && c.warmup_steps == warmup && c.status != RunStatus::Converged)
        .map(|c| c.target_lr)
        .fold(None, |m, lr| Some(m.map_or(lr, |m: f64| m.min(lr))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::DatasetSpec;
    use crate::harness::train::TrainConfig;
    use crate::model::NetworkSpec;

    fn small(steps: u64) -> SweepConfig {
        SweepConfig {
            base: RunConfig {
                network: NetworkSpec {
                    depth: 2,
                    width: 16,
                    ..Default::default()
                },
                dataset: DatasetSpec {
                    n_train: 64,
                    n_test: 32,
                    in_dim: 8,
                    classes: 4,
                    ..Default::default()
                },
                train: TrainConfig {
                    steps,
                    probe_every: 0,
                    eval_every: 10,
                    ..Default::default()
                },
                ..Default::default()
            },
            warmup_steps: SweepConfig::powers_of_two(3),
            seeds: vec![5],
            workers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn explicit_grid_fills_every_cell() {
        let cfg = SweepConfig {
            grid: LrGrid::Explicit {
                lrs: vec![0.01, 0.02, 0.04, 0.08, 0.16, 0.32],
            },
            stop: StopRule::Never,
            ..small(20)
        };
        let mut sunk = 0;
        let out = sweep(&cfg, &[], |_| {
            sunk += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.cells.len(), 24);
        assert_eq!(sunk, 24);
        let keys: HashSet<_> = out.cells.iter().map(PhaseCell::key).collect();
        assert_eq!(keys.len(), 24);
        assert!(out.cells.iter().all(|c| c.steps_run >= 1));
    }

    #[test]
    fn anchored_grid_starts_at_inverse_sharpness() {
        let cfg = SweepConfig {
            max_columns: 2,
            stop: StopRule::Never,
            ..small(5)
        };
        let out = sweep(&cfg, &[], |_| Ok(())).unwrap();
        let (_, lambda0) = out.initial_sharpness[0];
        assert_eq!(out.cells[0].target_lr, 1.0 / lambda0);
        assert_eq!(out.cells.last().unwrap().target_lr, 2.0 / lambda0);
    }

    #[test]
    fn stops_after_first_all_diverged_column() {
        let cfg = SweepConfig {
            grid: LrGrid::Explicit {
                lrs: vec![0.01, 1e4, 1e5],
            },
            warmup_steps: vec![1, 2],
            ..small(20)
        };
        let out = sweep(&cfg, &[], |_| Ok(())).unwrap();
        assert_eq!(out.columns, 2);
        assert!(out.cells[2..]
            .iter()
            .all(|c| c.status == RunStatus::Diverged));
        assert_eq!(max_stable_lr(&out.cells, 5, 1), Some(0.01));
    }

    #[test]
    fn resume_skips_existing_cells() {
        let cfg = SweepConfig {
            grid: LrGrid::Explicit {
                lrs: vec![0.01, 0.05],
            },
            stop: StopRule::Never,
            ..small(10)
        };
        let full = sweep(&cfg, &[], |_| Ok(())).unwrap();
        let partial = &full.cells[..3];
        let mut rerun = Vec::new();
        let resumed = sweep(&cfg, partial, |c| {
            rerun.push(c.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(rerun.len(), full.cells.len() - 3);
        assert_eq!(resumed.cells, full.cells);
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let cfg = SweepConfig {
            seeds: vec![1, 1],
            ..small(1)
        };
        assert!(sweep(&cfg, &[], |_| Ok(())).is_err());
    }
}
