//! Datasets, training runs, phase-diagram sweeps and their CSV records.

pub mod adaptive;
pub mod data;
pub mod sweep;
pub mod train;

use std::io::{Read, Write};

use crate::error::Result;

pub use adaptive::{
    pcw_run, select_init_for_run, CatapultRecord, InitSelectionReport, PcwOutcome, PcwRunConfig,
};
pub use data::{load_dataset, Augmentation, Dataset, DatasetKind, DatasetSpec};
pub use sweep::{
    initial_sharpness, max_stable_lr, min_failed_lr, sweep, LrGrid, PhaseCell, StopRule,
    SweepConfig, SweepOutcome,
};
pub use train::{
    train, train_run, DeadLayers, Event, RunConfig, RunResult, RunStatus, RunSummary, TrainConfig,
    TrajectoryRow,
};

/// Trajectory CSV header, in column order.
pub const TRAJECTORY_COLUMNS: [&str; 12] = [
    "step",
    "lr",
    "minibatch_loss",
    "train_loss",
    "test_loss",
    "test_acc",
    "sharpness",
    "precond_sharpness",
    "thr_gd",
    "thr_mom",
    "thr_adam",
    "event",
];

/// Phase CSV header, in column order.
pub const PHASE_COLUMNS: [&str; 7] = [
    "warmup_steps",
    "target_lr",
    "best_test_acc",
    "final_train_acc",
    "status",
    "steps_run",
    "seed",
];

fn write_records<W: Write, T: serde::Serialize>(out: W, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_records<R: Read, T: serde::de::DeserializeOwned>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Missing optional values are written as empty fields.
pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    write_records(out, rows, &TRAJECTORY_COLUMNS)
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRow>> {
    read_records(input)
}

pub fn write_phase_csv<W: Write>(out: W, cells: &[PhaseCell]) -> Result<()> {
    write_records(out, cells, &PHASE_COLUMNS)
}

pub fn read_phase_csv<R: Read>(input: R) -> Result<Vec<PhaseCell>> {
    read_records(input)
}

/// Append-only phase CSV: each cell is flushed as soon as it is written.
pub struct PhaseWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> PhaseWriter<W> {
    /// Writes the header first when `header` is set (a new file).
    pub fn new(out: W, header: bool) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        if header {
            inner.write_record(PHASE_COLUMNS)?;
            inner.flush()?;
        }
        Ok(Self { inner })
    }

    pub fn append(&mut self, cell: &PhaseCell) -> Result<()> {
        self.inner.serialize(cell)?;
        self.inner.flush()?;
        Ok(())
    }
}
