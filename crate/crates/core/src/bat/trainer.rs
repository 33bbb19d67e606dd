use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::objective::{bat_weight, discrimination_loss, poisoning_score, reweighted_adv_loss};
use super::optim::{sgd_update, OptimizerConfig, SgdState};
use crate::attack::{pgd, AttackConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{argmax, MlpModel};
use crate::seeding::{self, STREAM_ATTACK, STREAM_INIT, STREAM_SHUFFLE};
use crate::synthdata::LabeledDataset;
use crate::tensor::{softmax_rows, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    PgdAt,
    Bat,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::PgdAt => "pgd-at",
            Method::Bat => "bat",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Method::Erm),
            "pgd-at" | "pgd_at" | "pgdat" => Ok(Method::PgdAt),
            "bat" => Ok(Method::Bat),
            other => Err(format!("unknown method {other:?} (expected erm, pgd-at or bat)")),
        }
    }
}

/// Everything one training run consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatConfig {
    /// Reweighting sharpness.
    pub alpha: f64,
    /// Weight of the discrimination loss.
    pub beta: f64,
    /// Memorization threshold separating typical from atypical samples.
    pub sigma: f64,
    /// Temperature of the discrimination loss.
    pub tau: f64,
    pub include_positive_in_denominator: bool,
    pub attack: AttackConfig,
    pub optimizer: OptimizerConfig,
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BatConfig {
    fn default() -> Self {
        BatConfig {
            alpha: 1.0,
            beta: 0.2,
            sigma: 0.15,
            tau: 0.5,
            include_positive_in_denominator: false,
            attack: AttackConfig::training(0.05),
            optimizer: OptimizerConfig::default(),
            hidden_dims: vec![64, 32],
            epochs: 100,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl BatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Config(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optimizer.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Training statistics of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean sample weight over the epoch.
    pub mean_weight: f64,
    /// Sample-weighted mean of the per-batch (reweighted) cross-entropy.
    pub ce_loss: f64,
    /// Mean discrimination loss over batches where it was computed.
    pub dl_loss: Option<f64>,
}

impl EpochSummary {
    pub fn to_record(&self, split: &str) -> MetricsRecord {
        MetricsRecord {
            mean_weight: Some(self.mean_weight),
            ce_loss: Some(self.ce_loss),
            dl_loss: self.dl_loss,
            ..MetricsRecord::empty(self.epoch, split)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub method: Method,
    pub epochs: Vec<EpochSummary>,
    /// Evaluation records produced by the per-epoch hook, if any.
    pub records: Vec<MetricsRecord>,
    pub model: MlpModel,
    /// Number of adversarial-example generations performed.
    pub attack_calls: usize,
}

/// Per-epoch evaluation hook: `(epoch, model, summary) -> records`.
pub type EpochHook<'a> = dyn FnMut(usize, &MlpModel, &EpochSummary) -> Result<Vec<MetricsRecord>> + 'a;

pub fn train(dataset: &LabeledDataset, method: Method, config: &BatConfig) -> Result<TrainReport> {
    train_with_hook(dataset, method, config, None)
}

/// Runs ERM, PGD adversarial training, or BAT.
///
/// Per mini-batch: PGD examples (skipped for ERM), poisoning scores and
/// weights (BAT only), discrimination loss over the typical members (BAT with
/// `beta > 0`), then one SGD step on the reweighted cross-entropy plus
/// `beta` times the discrimination loss. The sample order is reshuffled every
/// epoch from the run seed.
pub fn train_with_hook(
    dataset: &LabeledDataset,
    method: Method,
    config: &BatConfig,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySplit("training set has no samples".into()));
    }
    if dataset.num_classes < 2 {
        return Err(Error::Config("training needs at least two classes".into()));
    }
    let mem = match (method, dataset.mem.as_ref()) {
        (Method::Bat, None) => {
            return Err(Error::Config(
                "BAT needs per-sample memorization values; run estimate-mem first".into(),
            ))
        }
        (_, m) => m,
    };

    let mut model = MlpModel::init(
        dataset.dim,
        &config.hidden_dims,
        dataset.num_classes,
        seeding::derive_seed(config.seed, &[STREAM_INIT]),
    )?;
    let mut state = SgdState::new(&model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut records = Vec::new();
    let mut attack_calls = 0;

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut seeding::rng(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut weight_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut dl_sum = 0.0;
        let mut dl_batches = 0usize;

        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = dataset.batch(idx)?;
            let inputs = if method == Method::Erm {
                x
            } else {
                attack_calls += 1;
                let seed = seeding::derive_seed(config.seed, &[STREAM_ATTACK, epoch as u64, b as u64]);
                pgd(&model, &x, &labels, &config.attack, seed)?
            };
            let step = batch_objective(&model, inputs, &labels, idx, mem, method, config)?;
            weight_sum += step.weights.iter().sum::<f64>();
            ce_sum += step.ce * idx.len() as f64;
            if let Some(dl) = step.dl {
                dl_sum += dl;
                dl_batches += 1;
            }
            sgd_update(&mut model, &step.grads, &mut state, &config.optimizer, epoch)?;
        }

        let summary = EpochSummary {
            epoch,
            mean_weight: weight_sum / dataset.len() as f64,
            ce_loss: ce_sum / dataset.len() as f64,
            dl_loss: (dl_batches > 0).then(|| dl_sum / dl_batches as f64),
        };
        if !summary.ce_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if let Some(h) = hook.as_deref_mut() {
            records.extend(h(epoch, &model, &summary)?);
        }
        epochs.push(summary);
    }
    Ok(TrainReport {
        method,
        epochs,
        records,
        model,
        attack_calls,
    })
}

/// Objective value and parameter gradients of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchStep {
    pub total: f64,
    pub ce: f64,
    pub dl: Option<f64>,
    pub weights: Vec<f64>,
    /// One buffer per parameter tensor, in [`MlpModel::params`] order.
    pub grads: Vec<Vec<f64>>,
}

/// Builds the training objective of `method` on already-perturbed inputs.
///
/// `idx` maps batch rows to dataset rows for memorization lookups.
pub fn batch_objective(
    model: &MlpModel,
    inputs: Tensor,
    labels: &[usize],
    idx: &[usize],
    mem: Option<&Vec<f64>>,
    method: Method,
    config: &BatConfig,
) -> Result<BatchStep> {
    let mut tape = Tape::new();
    let xv = tape.constant(inputs);
    let out = model.forward_on(&mut tape, xv, true)?;
    let per_sample = tape.softmax_cross_entropy_per_sample(out.logits, labels)?;

    let weights: Vec<f64> = match (method, mem) {
        (Method::Bat, Some(mem)) => {
            let c = model.num_classes();
            let probs = softmax_rows(tape.value(out.logits).data(), c);
            probs
                .chunks(c)
                .zip(labels)
                .zip(idx)
                .map(|((p, &y), &i)| {
                    let q = poisoning_score(p, y)?;
                    Ok(bat_weight(q, mem[i], argmax(p), y, config.alpha, config.sigma))
                })
                .collect::<Result<_>>()?
        }
        _ => vec![1.0; labels.len()],
    };
    let ce = reweighted_adv_loss(&mut tape, per_sample, &weights)?;

    let mut total = ce;
    let mut dl_value = None;
    if let (Method::Bat, Some(mem)) = (method, mem) {
        if config.beta > 0.0 {
            let typical: Vec<bool> = idx.iter().map(|&i| mem[i] < config.sigma).collect();
            let dl = discrimination_loss(
                &mut tape,
                out.representation,
                labels,
                &typical,
                config.tau,
                config.include_positive_in_denominator,
            )?;
            dl_value = Some(tape.value(dl).item());
            let scaled = tape.scale(dl, config.beta)?;
            total = tape.add(ce, scaled)?;
        }
    }
    tape.backward(total)?;
    let grads = out
        .params
        .iter()
        .flat_map(|&(w, b)| [w, b])
        .map(|p| {
            tape.grad(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(p).len()])
        })
        .collect();
    Ok(BatchStep {
        total: tape.value(total).item(),
        ce: tape.value(ce).item(),
        dl: dl_value,
        weights,
        grads,
    })
}
