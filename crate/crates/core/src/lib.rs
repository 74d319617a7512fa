//! Coral spawn tank monitoring: a synthetic tank simulator, detectors,
//! detection evaluation, culture analytics, durable telemetry storage,
//! annotation bookkeeping, and the fleet coordinator with its wire protocol
//! and HTTP API.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod annotate;
pub mod detect;
pub mod error;
pub mod evalkit;
pub mod fleet;
pub mod model;
pub mod raster;
pub mod simtank;
pub mod store;

pub use error::{Error, Result};
pub use model::{BoundingBox, Detection, GroundTruthBox, OperationalMode, PhaseTimeline, StageCounts, StageLabel};
