//! Benign adversarial training: objective terms, optimizer, training loop.

pub mod objective;
pub mod optim;
pub mod trainer;

pub use objective::{bat_weight, discrimination_loss, poisoning_score, reweighted_adv_loss};
pub use optim::{sgd_update, OptimizerConfig, SgdState};
pub use trainer::{batch_objective, train, train_with_hook, BatConfig, BatchStep, EpochHook, EpochSummary, Method, TrainReport};
