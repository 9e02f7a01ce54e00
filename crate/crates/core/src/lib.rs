//! Post-hoc calibration of classifier logits.
//!
//! Implements temperature scaling and its input-dependent generalizations
//! (linear, entropy-based, combined, and MLP temperature functions), plus
//! bin-wise and ensemble temperature scaling, the metrics used to judge
//! them, a synthetic data generator with known distortions, and a
//! benchmark harness over validation-set sizes.

pub mod calibrators;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod kv;
pub mod mathkit;
pub mod metrics;
pub mod optim;
pub mod paramfile;
pub mod synthgen;

pub use calibrators::{fit, CalibratorParams, Method};
pub use dataset::{LogitDataset, TaskSplit};
pub use error::{CalibError, Result};
pub use optim::{FitConfig, FitObjective};
