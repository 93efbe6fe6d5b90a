//! Train small normalized networks, evaluate them under parameterized
//! covariate shift with swappable normalization statistics, and measure
//! accuracy, calibration, and activation-distribution discrepancy.
//!
//! The headline mechanism is prediction-time batch normalization: instead of
//! the exponential-moving-average statistics frozen after training, batch
//! norm layers can recompute mean and variance on each prediction batch
//! (`BnMode::EvalBatch`), or reuse statistics captured once from a reference
//! batch (`BnMode::EvalFrozen`).

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod seeding;
pub mod shift;
pub mod tensor;

pub use error::{Error, Result};
