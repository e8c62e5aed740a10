//! Commute pattern mining over mobile network traffic records.
//!
//! Records are grouped into per-user daily stay trajectories, home and work
//! anchors are inferred from dwell time, and morning and night commute
//! durations are estimated between the anchors. Cohort statistics relate
//! commute time to commute distance.

// Validation writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod commute;
pub mod geo;
pub mod ingest;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod synth;
pub mod trajectory;
