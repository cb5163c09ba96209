//! Learning-rate warmup laboratory: optimizers, schedules, curvature probes,
//! critical learning-rate search, persistent catapult warmup and the
//! training / sweep harness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod instability;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod probe;
pub mod schedule;

pub use error::{Error, Result};
pub use model::{
    Bound, Fcn, LossKind, Model, NetworkSpec, Objective, ParamLayout, ParamVector,
    Parameterization, QuadraticOracle, Samples,
};
pub use numerics::{FlatVector, RngStream, SymMatrix};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use probe::{EigEstimate, ThresholdCurves};
pub use schedule::ScheduleSpec;
