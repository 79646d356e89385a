//! Online multi-object association on detection + embedding streams.
//!
//! The crate covers box geometry and anchor labelling, a batched
//! constant-velocity Kalman filter, fused appearance/motion association,
//! the tracklet lifecycle engine, embedding and multi-task losses,
//! CLEAR-MOT / identity evaluation, synthetic scenarios and a throughput
//! harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod bench;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kalman;
pub mod losses;
pub mod metrics;
pub mod simulate;
pub mod tracker;

pub use association::{solve_assignment, Assignment, CostMatrix, INFEASIBLE};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use metrics::{evaluate_clear, MotReport, SequenceResult, TrackRow};
pub use tracker::{tracker_run, Detection, Tracker, TrackerConfig};
