//! Subsampled memorization and influence estimates, and the typical/atypical
//! split assignment derived from them.
//!
//! `T` models are trained with ERM on independent Bernoulli(`p`) subsets of the
//! training set. The memorization value of training sample `i` is the accuracy
//! on `i` among models that saw it minus the accuracy among models that did
//! not; the influence of `i` on test sample `j` is the same difference measured
//! on `j`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bat::{train, BatConfig, Method, OptimizerConfig};
use crate::error::{Error, Result};
use crate::metrics::predictions;
use crate::model::MlpModel;
use crate::seeding::{self, STREAM_SUBSET, STREAM_TRIAL};
use crate::synthdata::LabeledDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub trials: usize,
    pub inclusion_rate: f64,
    pub base_seed: u64,
    pub min_trials_per_side: usize,
    /// Worker threads; `1` runs the trials serially.
    pub jobs: usize,
    /// Settings of the ERM runs; attack and BAT fields are ignored.
    pub trainer: BatConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            trials: 40,
            inclusion_rate: 0.7,
            base_seed: 0,
            min_trials_per_side: 5,
            jobs: 1,
            trainer: BatConfig {
                hidden_dims: vec![64, 32],
                epochs: 250,
                batch_size: 16,
                optimizer: OptimizerConfig {
                    learning_rate: 0.03,
                    weight_decay: 0.0,
                    decay_epochs: vec![240],
                    ..OptimizerConfig::default()
                },
                ..BatConfig::default()
            },
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 2 {
            return Err(Error::Config(format!("trials must be >= 2, got {}", self.trials)));
        }
        if !(self.inclusion_rate > 0.0 && self.inclusion_rate < 1.0) {
            return Err(Error::Config(format!(
                "inclusion_rate must lie in (0, 1), got {}",
                self.inclusion_rate
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        self.trainer.validate()
    }
}

/// Inclusion masks and the models trained on them, in trial order.
#[derive(Clone, Debug)]
pub struct SubsetEnsemble {
    pub masks: Vec<Vec<bool>>,
    pub models: Vec<MlpModel>,
}

/// Trains the `T` subset models. Trial `t` draws its mask and its training
/// seed from `(base_seed, t)` alone, so serial and parallel runs agree bit for bit.
pub fn fit_ensemble(train_set: &LabeledDataset, config: &EstimatorConfig) -> Result<SubsetEnsemble> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("memorization needs a non-empty training set".into()));
    }
    let run = |t: usize| run_trial(train_set, config, t as u64);
    let results: Vec<Result<(Vec<bool>, MlpModel)>> = if config.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", config.jobs)))?;
        pool.install(|| (0..config.trials).into_par_iter().map(run).collect())
    } else {
        (0..config.trials).map(run).collect()
    };
    let mut ensemble = SubsetEnsemble {
        masks: Vec::with_capacity(config.trials),
        models: Vec::with_capacity(config.trials),
    };
    for r in results {
        let (mask, model) = r?;
        ensemble.masks.push(mask);
        ensemble.models.push(model);
    }
    Ok(ensemble)
}

fn run_trial(train_set: &LabeledDataset, config: &EstimatorConfig, t: u64) -> Result<(Vec<bool>, MlpModel)> {
    let mut rng = seeding::rng(config.base_seed, &[STREAM_SUBSET, t]);
    let mask: Vec<bool> = (0..train_set.len())
        .map(|_| rng.random_bool(config.inclusion_rate))
        .collect();
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let trainer = BatConfig {
        seed: seeding::derive_seed(config.base_seed, &[STREAM_TRIAL, t]),
        ..config.trainer.clone()
    };
    let model = if idx.is_empty() {
        // an empty subset leaves the model at its initialization
        MlpModel::init(train_set.dim, &trainer.hidden_dims, train_set.num_classes, trainer.seed)?
    } else {
        train(&train_set.subset(&idx), Method::Erm, &trainer)?.model
    };
    Ok((mask, model))
}

impl SubsetEnsemble {
    pub fn trials(&self) -> usize {
        self.masks.len()
    }

    /// `correct[t][k]`: whether model `t` classifies row `k` of `ds` correctly.
    pub fn correctness(&self, ds: &LabeledDataset) -> Result<Vec<Vec<bool>>> {
        self.models
            .iter()
            .map(|m| Ok(predictions(m, ds)?.iter().zip(&ds.labels).map(|(p, y)| p == y).collect()))
            .collect()
    }

    pub fn memorization(&self, train_set: &LabeledDataset, config: &EstimatorConfig) -> Result<MemEstimate> {
        let correct = self.correctness(train_set)?;
        let mut est = memorization_from_trials(&self.masks, &correct, config.min_trials_per_side)?;
        est.trials = self.trials();
        est.inclusion_rate = config.inclusion_rate;
        est.base_seed = config.base_seed;
        Ok(est)
    }

    pub fn influence(&self, test_set: &LabeledDataset, config: &EstimatorConfig) -> Result<InfluenceTable> {
        let correct = self.correctness(test_set)?;
        influence_from_trials(&self.masks, &correct, config.min_trials_per_side, INFLUENCE_FLOOR)
    }

    /// Fraction of the ensemble that classifies each test sample correctly.
    pub fn predictability(&self, test_set: &LabeledDataset) -> Result<Vec<f64>> {
        let correct = self.correctness(test_set)?;
        Ok(predictability(&correct, test_set.len()))
    }
}

/// Trains the ensemble and returns the memorization estimate.
pub fn estimate_memorization(train_set: &LabeledDataset, config: &EstimatorConfig) -> Result<MemEstimate> {
    fit_ensemble(train_set, config)?.memorization(train_set, config)
}

/// Influence of every training sample on every test sample, from an existing ensemble.
pub fn estimate_influence(
    ensemble: &SubsetEnsemble,
    test_set: &LabeledDataset,
    config: &EstimatorConfig,
) -> Result<InfluenceTable> {
    ensemble.influence(test_set, config)
}

/// Per-sample memorization values with their trial counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MemEstimate {
    pub mem: Vec<f64>,
    pub included_trials: Vec<usize>,
    pub excluded_trials: Vec<usize>,
    pub low_confidence: Vec<bool>,
    pub trials: usize,
    pub inclusion_rate: f64,
    pub base_seed: u64,
}

impl MemEstimate {
    pub fn len(&self) -> usize {
        self.mem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mem.is_empty()
    }
}

fn check_trials(masks: &[Vec<bool>], correct: &[Vec<bool>], n_mask: usize) -> Result<()> {
    if masks.len() != correct.len() {
        return Err(Error::dim(
            "memorization",
            format!("{} masks for {} correctness rows", masks.len(), correct.len()),
        ));
    }
    if let Some(m) = masks.iter().find(|m| m.len() != n_mask) {
        return Err(Error::dim("memorization", format!("mask of length {} for {n_mask} samples", m.len())));
    }
    Ok(())
}

/// Difference of two accuracy rates, or `None` when either side has fewer than `min` trials.
fn rate_difference(inc_hits: usize, inc: usize, exc_hits: usize, exc: usize, min: usize) -> Option<f64> {
    (inc >= min.max(1) && exc >= min.max(1)).then(|| inc_hits as f64 / inc as f64 - exc_hits as f64 / exc as f64)
}

/// Memorization values from inclusion masks and per-trial correctness on the
/// training set itself. Samples with fewer than `min_per_side` trials on
/// either side get `mem = 0` and the low-confidence flag.
pub fn memorization_from_trials(masks: &[Vec<bool>], correct: &[Vec<bool>], min_per_side: usize) -> Result<MemEstimate> {
    let n = masks.first().map_or(0, Vec::len);
    check_trials(masks, correct, n)?;
    if correct.iter().any(|c| c.len() != n) {
        return Err(Error::dim("memorization", "correctness rows must match the mask length"));
    }
    let mut est = MemEstimate {
        mem: vec![0.0; n],
        included_trials: vec![0; n],
        excluded_trials: vec![0; n],
        low_confidence: vec![false; n],
        trials: masks.len(),
        inclusion_rate: f64::NAN,
        base_seed: 0,
    };
    for i in 0..n {
        let (mut inc, mut inc_hits, mut exc, mut exc_hits) = (0, 0, 0, 0);
        for (mask, c) in masks.iter().zip(correct) {
            if mask[i] {
                inc += 1;
                inc_hits += c[i] as usize;
            } else {
                exc += 1;
                exc_hits += c[i] as usize;
            }
        }
        est.included_trials[i] = inc;
        est.excluded_trials[i] = exc;
        match rate_difference(inc_hits, inc, exc_hits, exc, min_per_side) {
            Some(m) => est.mem[i] = m,
            None => est.low_confidence[i] = true,
        }
    }
    Ok(est)
}

/// Influence entries with `|infl|` at or below this are not stored.
pub const INFLUENCE_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub train_index: usize,
    pub test_index: usize,
    pub infl: f64,
}

/// Sparse train-by-test influence values, sorted by `(train_index, test_index)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InfluenceTable {
    pub entries: Vec<InfluenceEntry>,
}

impl InfluenceTable {
    pub fn get(&self, train_index: usize, test_index: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.train_index, e.test_index).cmp(&(train_index, test_index)))
            .map_or(0.0, |k| self.entries[k].infl)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries: Vec<InfluenceEntry> = read_json(path)?;
        entries.sort_by_key(|e| (e.train_index, e.test_index));
        Ok(InfluenceTable { entries })
    }
}

/// Influence values from inclusion masks over the training set and per-trial
/// correctness on the test set. Training samples without enough trials on
/// both sides contribute no entries.
pub fn influence_from_trials(
    masks: &[Vec<bool>],
    test_correct: &[Vec<bool>],
    min_per_side: usize,
    floor: f64,
) -> Result<InfluenceTable> {
    let n = masks.first().map_or(0, Vec::len);
    check_trials(masks, test_correct, n)?;
    let m = test_correct.first().map_or(0, Vec::len);
    if test_correct.iter().any(|c| c.len() != m) {
        return Err(Error::dim("influence", "ragged test correctness rows"));
    }
    let total_hits: Vec<usize> = (0..m).map(|j| test_correct.iter().filter(|c| c[j]).count()).collect();
    let mut entries = Vec::new();
    let mut inc_hits = vec![0usize; m];
    for i in 0..n {
        let inc = masks.iter().filter(|mask| mask[i]).count();
        let exc = masks.len() - inc;
        if inc < min_per_side.max(1) || exc < min_per_side.max(1) {
            continue;
        }
        inc_hits.iter_mut().for_each(|h| *h = 0);
        for (mask, c) in masks.iter().zip(test_correct) {
            if mask[i] {
                for (h, &ok) in inc_hits.iter_mut().zip(c) {
                    *h += ok as usize;
                }
            }
        }
        for j in 0..m {
            let infl = inc_hits[j] as f64 / inc as f64 - (total_hits[j] - inc_hits[j]) as f64 / exc as f64;
            if infl.abs() > floor {
                entries.push(InfluenceEntry {
                    train_index: i,
                    test_index: j,
                    infl,
                });
            }
        }
    }
    Ok(InfluenceTable { entries })
}

/// Per-sample fraction of trials with a correct prediction.
pub fn predictability(correct: &[Vec<bool>], len: usize) -> Vec<f64> {
    if correct.is_empty() {
        return vec![0.0; len];
    }
    (0..len)
        .map(|j| correct.iter().filter(|c| c[j]).count() as f64 / correct.len() as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Training samples with `mem > sigma_atypical` are atypical.
    pub sigma_atypical: f64,
    /// Training samples with `mem < sigma_typical` are typical.
    pub sigma_typical: f64,
    /// Test samples influenced above this by an atypical sample are atypical.
    pub influence_atypical: f64,
    /// Test samples influenced above this by an atypical sample are not typical.
    pub influence_typical: f64,
    /// Test samples predicted correctly less often than this are not typical.
    pub predictability_floor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            sigma_atypical: 0.15,
            sigma_typical: 0.02,
            influence_atypical: 0.15,
            influence_typical: 0.02,
            predictability_floor: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_typical: Vec<usize>,
    pub train_atypical: Vec<usize>,
    pub test_typical: Vec<usize>,
    pub test_atypical: Vec<usize>,
    /// Training samples left out of both training splits.
    pub low_confidence: Vec<usize>,
    pub thresholds: Thresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

impl SplitAssignment {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn partition_splits(
    mem: &MemEstimate,
    infl: &InfluenceTable,
    predictability: &[f64],
    thresholds: &Thresholds,
) -> Result<SplitAssignment> {
    if !(thresholds.sigma_typical < thresholds.sigma_atypical) {
        return Err(Error::Config(format!(
            "typical threshold {} must be below atypical threshold {}",
            thresholds.sigma_typical, thresholds.sigma_atypical
        )));
    }
    let mut out = SplitAssignment {
        train_typical: Vec::new(),
        train_atypical: Vec::new(),
        test_typical: Vec::new(),
        test_atypical: Vec::new(),
        low_confidence: Vec::new(),
        thresholds: *thresholds,
        run_id: None,
    };
    for i in 0..mem.len() {
        if mem.low_confidence[i] {
            out.low_confidence.push(i);
        } else if mem.mem[i] > thresholds.sigma_atypical {
            out.train_atypical.push(i);
        } else if mem.mem[i] < thresholds.sigma_typical {
            out.train_typical.push(i);
        }
    }
    let atypical: BTreeSet<usize> = out.train_atypical.iter().copied().collect();
    let mut strong = BTreeSet::new();
    let mut touched = BTreeSet::new();
    for e in infl.entries.iter().filter(|e| atypical.contains(&e.train_index)) {
        if e.test_index >= predictability.len() {
            return Err(Error::Index(format!(
                "influence entry for test sample {} but only {} predictability values",
                e.test_index,
                predictability.len()
            )));
        }
        if e.infl > thresholds.influence_atypical {
            strong.insert(e.test_index);
        }
        if e.infl > thresholds.influence_typical {
            touched.insert(e.test_index);
        }
    }
    out.test_atypical = strong.into_iter().collect();
    out.test_typical = (0..predictability.len())
        .filter(|j| !touched.contains(j) && predictability[*j] >= thresholds.predictability_floor)
        .collect();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemSampleRecord {
    pub index: usize,
    pub mem: f64,
    pub included_trials: usize,
    pub excluded_trials: usize,
    pub low_confidence: bool,
}

/// On-disk memorization file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemFile {
    pub trials: usize,
    pub inclusion_rate: f64,
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub samples: Vec<MemSampleRecord>,
}

impl MemFile {
    pub fn from_estimate(est: &MemEstimate, run_id: Option<String>) -> Self {
        MemFile {
            trials: est.trials,
            inclusion_rate: est.inclusion_rate,
            base_seed: est.base_seed,
            run_id,
            samples: (0..est.len())
                .map(|i| MemSampleRecord {
                    index: i,
                    mem: est.mem[i],
                    included_trials: est.included_trials[i],
                    excluded_trials: est.excluded_trials[i],
                    low_confidence: est.low_confidence[i],
                })
                .collect(),
        }
    }

    pub fn to_estimate(&self) -> Result<MemEstimate> {
        let n = self.samples.len();
        let mut est = MemEstimate {
            mem: vec![0.0; n],
            included_trials: vec![0; n],
            excluded_trials: vec![0; n],
            low_confidence: vec![false; n],
            trials: self.trials,
            inclusion_rate: self.inclusion_rate,
            base_seed: self.base_seed,
        };
        let mut seen = vec![false; n];
        for s in &self.samples {
            if s.index >= n || seen[s.index] {
                return Err(Error::Parse {
                    context: "memorization file".into(),
                    detail: format!("sample index {} is out of range or repeated", s.index),
                });
            }
            seen[s.index] = true;
            est.mem[s.index] = s.mem;
            est.included_trials[s.index] = s.included_trials;
            est.excluded_trials[s.index] = s.excluded_trials;
            est.low_confidence[s.index] = s.low_confidence;
        }
        Ok(est)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        detail: e.to_string(),
    })
}
