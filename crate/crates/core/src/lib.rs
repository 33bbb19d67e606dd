//! Small-scale adversarial training lab: a reverse-mode autodiff tape, MLP
//! classifiers, l∞ attacks, subsampled memorization estimates, benign
//! adversarial training, and a synthetic long-tail benchmark.

pub mod attack;
pub mod bat;
pub mod config;
pub mod error;
pub mod memorization;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seeding;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
