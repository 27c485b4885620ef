//! Experiment harness for `dmvae-core`: configuration files, teacher
//! checkpoints, TSV and SVG outputs, and the experiment drivers behind the
//! `dmvae` command.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod pool;
pub mod svg;
pub mod table;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{LabError, LabResult};
