//! Flat `key = value` run configuration with a closed schema.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Every key must appear in [`SCHEMA`]. Command-line overrides are applied
//! after the file, so a flag always wins.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::attack::AttackConfig;
use crate::bat::{BatConfig, Method, OptimizerConfig};
use crate::error::{Error, Result};
use crate::memorization::{EstimatorConfig, Thresholds};
use crate::synthdata::BenchmarkProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueType {
    Integer,
    Real,
    Bool,
    Text,
    /// Comma-separated non-negative integers, possibly empty.
    IntegerList,
    Choice(&'static [&'static str]),
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueType::Integer => f.write_str("a non-negative integer"),
            ValueType::Real => f.write_str("a real number"),
            ValueType::Bool => f.write_str("true or false"),
            ValueType::Text => f.write_str("text"),
            ValueType::IntegerList => f.write_str("a comma-separated list of non-negative integers"),
            ValueType::Choice(opts) => write!(f, "one of {}", opts.join(", ")),
        }
    }
}

pub struct KeySpec {
    pub key: &'static str,
    pub ty: ValueType,
    pub required: bool,
    pub help: &'static str,
}

const fn key(key: &'static str, ty: ValueType, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        ty,
        required: false,
        help,
    }
}

const METHODS: &[&str] = &["erm", "pgd-at", "bat"];
const PROFILES: &[&str] = &["small", "medium"];

pub const SCHEMA: &[KeySpec] = &[
    KeySpec {
        key: "seed",
        ty: ValueType::Integer,
        required: true,
        help: "base seed of every random stream in the run",
    },
    key("out_dir", ValueType::Text, "directory for all artifacts (BAT_LAB_OUT overrides)"),
    key("profile", ValueType::Choice(PROFILES), "synthetic benchmark profile"),
    key("poisoning_fraction", ValueType::Real, "fraction of poisoning samples kept, in [0, 1]"),
    key("method", ValueType::Choice(METHODS), "training method"),
    key("alpha", ValueType::Real, "reweighting sharpness"),
    key("beta", ValueType::Real, "discrimination loss weight"),
    key("sigma", ValueType::Real, "memorization threshold used by BAT"),
    key("tau", ValueType::Real, "discrimination loss temperature"),
    key("include_positive_in_denominator", ValueType::Bool, "add the positive pair to the softmax denominator"),
    key("epsilon", ValueType::Real, "l-inf attack radius"),
    key("train_attack_steps", ValueType::Integer, "PGD steps during training"),
    key("train_step_size", ValueType::Real, "PGD step size during training (default epsilon/4)"),
    key("train_random_init", ValueType::Bool, "random start for the training attack"),
    key("eval_attack_steps", ValueType::Integer, "PGD steps during evaluation"),
    key("eval_step_size", ValueType::Real, "PGD step size during evaluation (default epsilon/4)"),
    key("eval_random_init", ValueType::Bool, "random start for the evaluation attack"),
    key("hidden_dims", ValueType::IntegerList, "hidden layer widths"),
    key("epochs", ValueType::Integer, "training epochs"),
    key("batch_size", ValueType::Integer, "mini-batch size"),
    key("learning_rate", ValueType::Real, "initial learning rate"),
    key("momentum", ValueType::Real, "SGD momentum"),
    key("weight_decay", ValueType::Real, "L2 weight decay"),
    key("lr_decay_factor", ValueType::Real, "learning-rate multiplier at each decay epoch"),
    key("decay_epochs", ValueType::IntegerList, "epochs at which the learning rate decays"),
    key("trials", ValueType::Integer, "subset models trained by estimate-mem"),
    key("inclusion_rate", ValueType::Real, "probability that a sample enters a subset"),
    key("min_trials_per_side", ValueType::Integer, "trials needed on each side for a confident estimate"),
    key("jobs", ValueType::Integer, "worker threads for estimate-mem"),
    key("mem_hidden_dims", ValueType::IntegerList, "hidden widths of the subset models"),
    key("mem_epochs", ValueType::Integer, "epochs of each subset model"),
    key("mem_batch_size", ValueType::Integer, "mini-batch size of the subset models"),
    key("mem_learning_rate", ValueType::Real, "learning rate of the subset models"),
    key("mem_weight_decay", ValueType::Real, "weight decay of the subset models"),
    key("mem_decay_epochs", ValueType::IntegerList, "learning-rate decay epochs of the subset models"),
    key("sigma_atypical", ValueType::Real, "training samples above this memorization value are atypical"),
    key("sigma_typical", ValueType::Real, "training samples below this memorization value are typical"),
    key("influence_atypical", ValueType::Real, "influence above which a test sample is atypical"),
    key("influence_typical", ValueType::Real, "influence above which a test sample is not typical"),
    key("predictability_floor", ValueType::Real, "test samples predicted less often than this are not typical"),
    key("pair_budget", ValueType::Integer, "cross-class pairs sampled for the cosine distance"),
];

pub fn spec_of(name: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|k| k.key == name)
}

/// Schema key closest to `name` by edit distance.
pub fn nearest_key(name: &str) -> &'static str {
    SCHEMA
        .iter()
        .map(|k| (strsim::damerau_levenshtein(name, k.key), k.key))
        .min()
        .map_or("seed", |(_, k)| k)
}

/// Raw, schema-checked values in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{source}:{}: expected `key = value`, found {line:?}",
                n + 1
            )))?;
            raw.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{source}:{}: {}", n + 1, strip(e))))?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Checks `key` and `value` against the schema and stores the value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec_of(key).ok_or_else(|| {
            Error::Config(format!("unknown key `{key}` (did you mean `{}`?)", nearest_key(key)))
        })?;
        check_value(spec, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn missing_required(&self) -> Vec<&'static str> {
        SCHEMA
            .iter()
            .filter(|k| k.required && !self.values.contains_key(k.key))
            .map(|k| k.key)
            .collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn check_value(spec: &KeySpec, value: &str) -> Result<()> {
    let ok = match spec.ty {
        ValueType::Integer => value.parse::<u64>().is_ok(),
        ValueType::Real => value.parse::<f64>().is_ok_and(f64::is_finite),
        ValueType::Bool => matches!(value, "true" | "false"),
        ValueType::Text => !value.is_empty(),
        ValueType::IntegerList => parse_list(value).is_some(),
        ValueType::Choice(opts) => opts.contains(&value),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "key `{}` expects {}, got {value:?}",
            spec.key, spec.ty
        )))
    }
}

fn parse_list(value: &str) -> Option<Vec<usize>> {
    if value.trim().is_empty() {
        return Some(Vec::new());
    }
    value.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// Every knob of one run, after defaults, file values, and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub profile: BenchmarkProfile,
    pub poisoning_fraction: f64,
    pub method: Method,
    pub training: BatConfig,
    pub eval_attack: AttackConfig,
    pub estimator: EstimatorConfig,
    pub thresholds: Thresholds,
    pub pair_budget: usize,
    raw: RawConfig,
}

impl RunConfig {
    /// Loads `path` (if any), applies `overrides` in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut raw = match path {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::default(),
        };
        for (k, v) in overrides {
            raw.set(k, v)?;
        }
        Self::from_raw(raw)
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let missing = raw.missing_required();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing required key(s): {}", missing.join(", "))));
        }
        let int = |k: &str, d: u64| raw.get(k).map_or(d, |v| v.parse().unwrap_or(d));
        let real = |k: &str, d: f64| raw.get(k).map_or(d, |v| v.parse().unwrap_or(d));
        let flag = |k: &str, d: bool| raw.get(k).map_or(d, |v| v == "true");
        let list = |k: &str, d: &[usize]| raw.get(k).and_then(parse_list).unwrap_or_else(|| d.to_vec());

        let bat = BatConfig::default();
        let est = EstimatorConfig::default();
        let thr = Thresholds::default();
        let seed = int("seed", 0);
        let epsilon = real("epsilon", bat.attack.epsilon);
        let train_attack = AttackConfig {
            epsilon,
            step_size: real("train_step_size", epsilon / 4.0),
            steps: int("train_attack_steps", bat.attack.steps as u64) as usize,
            random_init: flag("train_random_init", bat.attack.random_init),
            ..bat.attack.clone()
        };
        let eval_default = AttackConfig::evaluation(epsilon);
        let eval_attack = AttackConfig {
            step_size: real("eval_step_size", eval_default.step_size),
            steps: int("eval_attack_steps", eval_default.steps as u64) as usize,
            random_init: flag("eval_random_init", eval_default.random_init),
            ..eval_default
        };
        let training = BatConfig {
            alpha: real("alpha", bat.alpha),
            beta: real("beta", bat.beta),
            sigma: real("sigma", bat.sigma),
            tau: real("tau", bat.tau),
            include_positive_in_denominator: flag("include_positive_in_denominator", bat.include_positive_in_denominator),
            attack: train_attack,
            optimizer: OptimizerConfig {
                learning_rate: real("learning_rate", bat.optimizer.learning_rate),
                momentum: real("momentum", bat.optimizer.momentum),
                weight_decay: real("weight_decay", bat.optimizer.weight_decay),
                lr_decay_factor: real("lr_decay_factor", bat.optimizer.lr_decay_factor),
                decay_epochs: list("decay_epochs", &bat.optimizer.decay_epochs),
            },
            hidden_dims: list("hidden_dims", &bat.hidden_dims),
            epochs: int("epochs", bat.epochs as u64) as usize,
            batch_size: int("batch_size", bat.batch_size as u64) as usize,
            seed,
        };
        let mem_trainer = BatConfig {
            hidden_dims: list("mem_hidden_dims", &est.trainer.hidden_dims),
            epochs: int("mem_epochs", est.trainer.epochs as u64) as usize,
            batch_size: int("mem_batch_size", est.trainer.batch_size as u64) as usize,
            optimizer: OptimizerConfig {
                learning_rate: real("mem_learning_rate", est.trainer.optimizer.learning_rate),
                weight_decay: real("mem_weight_decay", est.trainer.optimizer.weight_decay),
                decay_epochs: list("mem_decay_epochs", &est.trainer.optimizer.decay_epochs),
                ..est.trainer.optimizer.clone()
            },
            ..est.trainer.clone()
        };
        let estimator = EstimatorConfig {
            trials: int("trials", est.trials as u64) as usize,
            inclusion_rate: real("inclusion_rate", est.inclusion_rate),
            base_seed: seed,
            min_trials_per_side: int("min_trials_per_side", est.min_trials_per_side as u64) as usize,
            jobs: int("jobs", est.jobs as u64) as usize,
            trainer: mem_trainer,
        };
        let thresholds = Thresholds {
            sigma_atypical: real("sigma_atypical", thr.sigma_atypical),
            sigma_typical: real("sigma_typical", thr.sigma_typical),
            influence_atypical: real("influence_atypical", thr.influence_atypical),
            influence_typical: real("influence_typical", thr.influence_typical),
            predictability_floor: real("predictability_floor", thr.predictability_floor),
        };
        let cfg = RunConfig {
            seed,
            out_dir: PathBuf::from(raw.get("out_dir").unwrap_or("runs")),
            profile: raw.get("profile").map_or(Ok(BenchmarkProfile::Small), str::parse).map_err(Error::Config)?,
            poisoning_fraction: real("poisoning_fraction", 1.0),
            method: raw.get("method").map_or(Ok(Method::Bat), str::parse).map_err(Error::Config)?,
            training,
            eval_attack,
            estimator,
            thresholds,
            pair_budget: int("pair_budget", 10_000) as usize,
            raw,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.poisoning_fraction) {
            return Err(Error::Config(format!(
                "poisoning_fraction must lie in [0, 1], got {}",
                self.poisoning_fraction
            )));
        }
        if self.pair_budget == 0 {
            return Err(Error::Config("pair_budget must be positive".into()));
        }
        if self.thresholds.sigma_typical >= self.thresholds.sigma_atypical {
            return Err(Error::Config("sigma_typical must be below sigma_atypical".into()));
        }
        self.training.validate()?;
        self.eval_attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.estimator.validate()
    }

    /// The explicitly given keys, as they were set.
    pub fn raw(&self) -> &RawConfig {
        &self.raw
    }

    /// Every schema key with its effective value, in schema order.
    pub fn effective(&self) -> Vec<(&'static str, String)> {
        let t = &self.training;
        let e = &self.estimator;
        let th = &self.thresholds;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        SCHEMA
            .iter()
            .map(|k| {
                let v = match k.key {
                    "seed" => self.seed.to_string(),
                    "out_dir" => self.out_dir.display().to_string(),
                    "profile" => self.profile.to_string(),
                    "poisoning_fraction" => self.poisoning_fraction.to_string(),
                    "method" => self.method.to_string(),
                    "alpha" => t.alpha.to_string(),
                    "beta" => t.beta.to_string(),
                    "sigma" => t.sigma.to_string(),
                    "tau" => t.tau.to_string(),
                    "include_positive_in_denominator" => t.include_positive_in_denominator.to_string(),
                    "epsilon" => t.attack.epsilon.to_string(),
                    "train_attack_steps" => t.attack.steps.to_string(),
                    "train_step_size" => t.attack.step_size.to_string(),
                    "train_random_init" => t.attack.random_init.to_string(),
                    "eval_attack_steps" => self.eval_attack.steps.to_string(),
                    "eval_step_size" => self.eval_attack.step_size.to_string(),
                    "eval_random_init" => self.eval_attack.random_init.to_string(),
                    "hidden_dims" => list(&t.hidden_dims),
                    "epochs" => t.epochs.to_string(),
                    "batch_size" => t.batch_size.to_string(),
                    "learning_rate" => t.optimizer.learning_rate.to_string(),
                    "momentum" => t.optimizer.momentum.to_string(),
                    "weight_decay" => t.optimizer.weight_decay.to_string(),
                    "lr_decay_factor" => t.optimizer.lr_decay_factor.to_string(),
                    "decay_epochs" => list(&t.optimizer.decay_epochs),
                    "trials" => e.trials.to_string(),
                    "inclusion_rate" => e.inclusion_rate.to_string(),
                    "min_trials_per_side" => e.min_trials_per_side.to_string(),
                    "jobs" => e.jobs.to_string(),
                    "mem_hidden_dims" => list(&e.trainer.hidden_dims),
                    "mem_epochs" => e.trainer.epochs.to_string(),
                    "mem_batch_size" => e.trainer.batch_size.to_string(),
                    "mem_learning_rate" => e.trainer.optimizer.learning_rate.to_string(),
                    "mem_weight_decay" => e.trainer.optimizer.weight_decay.to_string(),
                    "mem_decay_epochs" => list(&e.trainer.optimizer.decay_epochs),
                    "sigma_atypical" => th.sigma_atypical.to_string(),
                    "sigma_typical" => th.sigma_typical.to_string(),
                    "influence_atypical" => th.influence_atypical.to_string(),
                    "influence_typical" => th.influence_typical.to_string(),
                    "predictability_floor" => th.predictability_floor.to_string(),
                    "pair_budget" => self.pair_budget.to_string(),
                    other => unreachable!("schema key {other} has no effective value"),
                };
                (k.key, v)
            })
            .collect()
    }

    /// Effective configuration in the file format; loading it reproduces `self`.
    pub fn to_text(&self) -> String {
        self.effective()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn over(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn from_text(text: &str, o: &[(&str, &str)]) -> Result<RunConfig> {
        let mut raw = RawConfig::parse(text, "test.cfg")?;
        for (k, v) in over(o) {
            raw.set(&k, &v)?;
        }
        RunConfig::from_raw(raw)
    }

    #[test]
    fn flag_overrides_file() {
        let c = from_text("seed = 1\nalpha = 1\n", &[("alpha", "2")]).unwrap();
        assert_eq!(c.training.alpha, 2.0);
        assert_eq!(c.raw().get("alpha"), Some("2"));
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = from_text("seed = 1\nalhpa = 1\n", &[]).unwrap_err().to_string();
        assert!(e.contains("alhpa") && e.contains("`alpha`"), "{e}");
        assert!(e.contains("test.cfg:2"), "{e}");
    }

    #[test]
    fn missing_seed_listed() {
        let e = from_text("alpha = 1\n", &[]).unwrap_err().to_string();
        assert!(e.contains("missing required key(s): seed"), "{e}");
    }

    #[test]
    fn type_mismatch_names_expected_type() {
        let e = from_text("seed = 1\nepochs = many\n", &[]).unwrap_err().to_string();
        assert!(e.contains("non-negative integer"), "{e}");
        let e = from_text("seed = 1\nmethod = trades\n", &[]).unwrap_err().to_string();
        assert!(e.contains("erm, pgd-at, bat"), "{e}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = from_text("# recipe\n\nseed = 7   # trailing\nhidden_dims = 8, 4\ndecay_epochs =\n", &[]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.training.hidden_dims, vec![8, 4]);
        assert!(c.training.optimizer.decay_epochs.is_empty());
    }

    #[test]
    fn step_sizes_follow_epsilon() {
        let c = from_text("seed = 1\nepsilon = 0.08\n", &[]).unwrap();
        assert_eq!(c.training.attack.step_size, 0.02);
        assert_eq!(c.eval_attack.step_size, 0.02);
        assert_eq!(c.eval_attack.steps, 20);
        assert!(!c.eval_attack.random_init);
    }

    #[test]
    fn effective_text_round_trips() {
        let c = from_text("seed = 3\nmethod = pgd-at\nbeta = 0.5\nmem_epochs = 12\n", &[]).unwrap();
        let back = RunConfig::from_raw(RawConfig::parse(&c.to_text(), "echo").unwrap()).unwrap();
        assert_eq!(back.effective(), c.effective());
        assert_eq!(back.training, c.training);
        assert_eq!(back.estimator, c.estimator);
    }

    #[test]
    fn every_schema_key_has_an_effective_value() {
        let c = from_text("seed = 0\n", &[]).unwrap();
        assert_eq!(c.effective().len(), SCHEMA.len());
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(from_text("seed = 1\npoisoning_fraction = 1.5\n", &[]).is_err());
        assert!(from_text("seed = 1\ntau = 0\n", &[]).is_err());
        assert!(from_text("seed = 1\nsigma_typical = 0.5\n", &[]).is_err());
    }
}
