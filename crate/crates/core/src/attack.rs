//! l∞-bounded FGSM and PGD attacks on cross-entropy loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l∞ radius.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Start from a uniform point of the ε-box instead of the clean input.
    pub random_init: bool,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl AttackConfig {
    /// 10 steps of ε/4 from a random start.
    pub fn training(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 4.0,
            steps: 10,
            random_init: true,
            clamp_min: 0.0,
            clamp_max: 1.0,
        }
    }

    /// 20 steps of ε/4 from the clean input.
    pub fn evaluation(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 4.0,
            steps: 20,
            random_init: false,
            clamp_min: 0.0,
            clamp_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Contract(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size >= 0.0) || (self.steps > 0 && self.epsilon > 0.0 && self.step_size == 0.0) {
            return Err(Error::Contract(format!(
                "step_size must be > 0 when steps > 0 and epsilon > 0, got {}",
                self.step_size
            )));
        }
        if !(self.clamp_min < self.clamp_max) {
            return Err(Error::Contract(format!(
                "clamp range [{}, {}] is empty",
                self.clamp_min, self.clamp_max
            )));
        }
        Ok(())
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::training(0.05)
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the mean cross-entropy with respect to the inputs, and the loss.
pub fn input_gradient(model: &MlpModel, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = model.forward_on(&mut tape, xv, false)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;
    let g = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    Ok((g, tape.value(loss).item()))
}

/// Mean cross-entropy of the model on `x`.
pub fn loss(model: &MlpModel, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward_on(&mut tape, xv, false)?;
    let l = tape.softmax_cross_entropy(out.logits, labels)?;
    Ok(tape.value(l).item())
}

/// One signed-gradient step of size ε, clamped to the valid input range.
pub fn fgsm(model: &MlpModel, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<Tensor> {
    config.validate()?;
    if config.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (g, _) = input_gradient(model, x, labels)?;
    let mut adv = x.clone();
    for (a, gi) in adv.data_mut().iter_mut().zip(&g) {
        *a = (*a + config.epsilon * sign(*gi)).clamp(config.clamp_min, config.clamp_max);
    }
    Ok(adv)
}

/// Projected signed-gradient ascent inside `B_ε(x) ∩ [clamp_min, clamp_max]`.
///
/// `seed` drives the random start and is ignored when `random_init` is off.
pub fn pgd(model: &MlpModel, x: &Tensor, labels: &[usize], config: &AttackConfig, seed: u64) -> Result<Tensor> {
    config.validate()?;
    let x0 = x.data();
    let lo: Vec<f64> = x0.iter().map(|v| (v - config.epsilon).max(config.clamp_min)).collect();
    let hi: Vec<f64> = x0.iter().map(|v| (v + config.epsilon).min(config.clamp_max)).collect();
    let project = |v: f64, i: usize| v.max(lo[i]).min(hi[i]);

    let mut adv = x.clone();
    if config.random_init && config.epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, a) in adv.data_mut().iter_mut().enumerate() {
            let delta = rng.random_range(-config.epsilon..=config.epsilon);
            *a = project(*a + delta, i);
        }
    } else {
        // inputs outside the clamp range are pulled back in
        for (i, a) in adv.data_mut().iter_mut().enumerate() {
            *a = project(*a, i);
        }
    }
    if config.epsilon == 0.0 {
        return Ok(adv);
    }
    for _ in 0..config.steps {
        let (g, _) = input_gradient(model, &adv, labels)?;
        for (i, (a, gi)) in adv.data_mut().iter_mut().zip(&g).enumerate() {
            *a = project(*a + config.step_size * sign(*gi), i);
        }
    }
    Ok(adv)
}
