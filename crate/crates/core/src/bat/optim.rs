use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlpModel;

/// Momentum SGD with L2 weight decay and a step learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Epochs (0-based) from which the rate is multiplied by `lr_decay_factor` again.
    pub decay_epochs: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            decay_epochs: vec![75, 90],
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Contract(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Contract(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Contract("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Velocity buffers, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(model: &MlpModel) -> Self {
        SgdState {
            velocity: model.params().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// `v ← μ v + (g + λ θ)`, `θ ← θ − lr · v`, in place.
pub fn sgd_update(
    model: &mut MlpModel,
    grads: &[Vec<f64>],
    state: &mut SgdState,
    config: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    let lr = config.lr_at(epoch);
    if grads.len() != state.velocity.len() {
        return Err(Error::dim(
            "sgd_update",
            format!("{} gradients for {} parameter tensors", grads.len(), state.velocity.len()),
        ));
    }
    for ((param, g), v) in model.params_mut().zip(grads).zip(&mut state.velocity) {
        if g.len() != param.len() {
            return Err(Error::dim(
                "sgd_update",
                format!("gradient of length {} for a parameter of length {}", g.len(), param.len()),
            ));
        }
        for ((p, &gi), vi) in param.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = config.momentum * *vi + gi + config.weight_decay * *p;
            *p -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: lr,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_decay_factor: 0.1,
            decay_epochs: vec![2],
        }
    }

    #[test]
    fn vanilla_step() {
        let mut m = MlpModel::init(2, &[], 2, 0).unwrap();
        let before = m.clone();
        let grads: Vec<Vec<f64>> = m.params().map(|p| vec![1.5; p.len()]).collect();
        let mut st = SgdState::new(&m);
        sgd_update(&mut m, &grads, &mut st, &plain(0.1), 0).unwrap();
        for (a, b) in m.params().zip(before.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.15).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_grads_are_a_fixed_point() {
        let mut m = MlpModel::init(3, &[4], 2, 1).unwrap();
        let before = m.clone();
        let grads: Vec<Vec<f64>> = m.params().map(|p| vec![0.0; p.len()]).collect();
        let mut st = SgdState::new(&m);
        let mut cfg = plain(0.1);
        cfg.momentum = 0.9;
        for e in 0..3 {
            sgd_update(&mut m, &grads, &mut st, &cfg, e).unwrap();
        }
        assert_eq!(m, before);
    }

    #[test]
    fn schedule_decays() {
        let cfg = plain(0.1);
        assert_eq!(cfg.lr_at(1), 0.1);
        assert!((cfg.lr_at(2) - 0.01).abs() < 1e-15);
        let two = OptimizerConfig {
            decay_epochs: vec![30, 45],
            ..plain(0.1)
        };
        assert!((two.lr_at(45) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut m = MlpModel::init(2, &[], 2, 0).unwrap();
        let mut st = SgdState::new(&m);
        assert!(sgd_update(&mut m, &[vec![0.0]], &mut st, &plain(0.1), 0).is_err());
        let grads = vec![vec![0.0; 3], vec![0.0; 2]];
        assert!(sgd_update(&mut m, &grads, &mut st, &plain(0.1), 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(plain(0.0).validate().is_err());
        let mut c = plain(0.1);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }
}
