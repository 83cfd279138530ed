//! A desk-scale laboratory for learning with noisy labels.
//!
//! The centerpiece is CUFIT, a curriculum fine-tuning paradigm over a frozen
//! vision-transformer backbone: a linear probing module (LPM) trains on every
//! sample, an intermediate adapter module (IAM) trains on the samples the LPM
//! agrees with, and a last adapter module (LAM) trains on the samples the IAM
//! agrees with. Only the LAM serves predictions. Around it the crate provides
//! label-noise simulation, parameter-efficient adapter variants, two-network
//! selection baselines (Co-teaching, JoCor-style, CoDis-style), selection
//! quality metrics (label precision / recall), and a config-driven experiment
//! runner.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability. The `cufit` binary exposes the same machinery as CLI
//! subcommands (`inject-noise`, `train`, `evaluate`, `suite`, `plot`).

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod container;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod runner;
pub mod scalar;
pub mod seeding;

pub use error::{Error, Result};
pub use scalar::Scalar;
