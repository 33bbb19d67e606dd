//! The staged pipeline behind the command line: gen-data, estimate-mem,
//! train, eval, and report. Every stage reads its inputs from the output
//! directory, writes its artifacts next to them, and leaves a manifest that
//! echoes the full effective configuration and the sha256 of every input and
//! output file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bat::{train_with_hook, EpochSummary, Method};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::memorization::{self, fit_ensemble, partition_splits, MemFile, SplitAssignment};
use crate::metrics::{evaluate_epoch, read_metrics_csv, save_metrics_csv, EvalOptions, EvalSplit, MetricsRecord};
use crate::model::MlpModel;
use crate::seeding::{self, STREAM_ATTACK};
use crate::synthdata::{load_dataset, save_dataset, BenchmarkProfile, LabeledDataset, Split, SubPopSpec};

pub const ENV_OUT: &str = "BAT_LAB_OUT";
pub const MANIFEST_FORMAT: &str = "bat-lab/manifest-v1";

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Spec(_) | Error::Parse { .. } => 2,
        Error::MissingPrerequisite { .. } => 3,
        _ => 4,
    }
}

/// Artifact locations under one output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    /// `BAT_LAB_OUT` wins over the configured directory.
    pub fn resolve(config: &RunConfig) -> Self {
        let root = std::env::var_os(ENV_OUT)
            .map(PathBuf::from)
            .unwrap_or_else(|| config.out_dir.clone());
        Paths { root }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train_csv(&self) -> PathBuf {
        self.data_dir().join("train.csv")
    }
    pub fn test_csv(&self) -> PathBuf {
        self.data_dir().join("test.csv")
    }
    pub fn dataset_sidecar(&self) -> PathBuf {
        self.data_dir().join("dataset.json")
    }
    pub fn mem_dir(&self) -> PathBuf {
        self.root.join("mem")
    }
    pub fn mem_json(&self) -> PathBuf {
        self.mem_dir().join("mem.json")
    }
    pub fn influence_json(&self) -> PathBuf {
        self.mem_dir().join("influence.json")
    }
    pub fn splits_json(&self) -> PathBuf {
        self.mem_dir().join("splits.json")
    }
    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
}

/// Directory name of a training run: method, and for BAT its two weights.
pub fn run_name(config: &RunConfig) -> String {
    match config.method {
        Method::Bat => format!("bat_a{}_b{}", config.training.alpha, config.training.beta),
        m => m.as_str().to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub stage: String,
    pub version: String,
    pub run_id: String,
    /// Effective configuration, every schema key.
    pub config: BTreeMap<String, String>,
    /// sha256 of the test set the stage saw; `report` groups on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(stage: &str, config: &RunConfig, inputs: BTreeMap<String, String>) -> Self {
        let cfg: BTreeMap<String, String> = config
            .effective()
            .into_iter()
            // where files land and how many threads ran do not change results
            .filter(|(k, _)| !matches!(*k, "out_dir" | "jobs"))
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        for (k, v) in cfg.iter().chain(&inputs) {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        Manifest {
            format: MANIFEST_FORMAT.into(),
            stage: stage.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            run_id: hex::encode(h.finalize())[..16].to_string(),
            config: cfg,
            dataset_hash: None,
            inputs,
            outputs: BTreeMap::new(),
        }
    }

    fn record_output(&mut self, root: &Path, path: &Path) -> Result<()> {
        let key = path.strip_prefix(root).unwrap_or(path).display().to_string();
        self.outputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        memorization::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        memorization::read_json(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn hashed_inputs(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| {
            let key = f.strip_prefix(root).unwrap_or(f).display().to_string();
            Ok((key, sha256_file(f)?))
        })
        .collect()
}

/// Sidecar written next to the dataset CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub profile: BenchmarkProfile,
    pub seed: u64,
    pub poisoning_fraction: f64,
    pub dim: usize,
    pub num_classes: usize,
    pub train_sha256: String,
    pub test_sha256: String,
    pub run_id: String,
    pub specs: Vec<SubPopSpec>,
}

/// Train and test sets as written by gen-data, with the class count restored.
pub fn load_data(paths: &Paths) -> Result<(LabeledDataset, LabeledDataset, DatasetSidecar)> {
    for p in [paths.train_csv(), paths.test_csv(), paths.dataset_sidecar()] {
        require(&p, "gen-data")?;
    }
    let side: DatasetSidecar = memorization::read_json(&paths.dataset_sidecar())?;
    let mut train = load_dataset(&paths.train_csv(), Split::Train)?;
    let mut test = load_dataset(&paths.test_csv(), Split::Test)?;
    train.num_classes = side.num_classes;
    test.num_classes = side.num_classes;
    Ok((train, test, side))
}

pub fn gen_data(config: &RunConfig) -> Result<Manifest> {
    let paths = Paths::resolve(config);
    create_dir(&paths.data_dir())?;
    let mut manifest = Manifest::new("gen-data", config, BTreeMap::new());
    let bench = config.profile.layout().generate(config.poisoning_fraction, config.seed)?;
    save_dataset(&bench.train, &paths.train_csv())?;
    save_dataset(&bench.test, &paths.test_csv())?;
    let side = DatasetSidecar {
        profile: config.profile,
        seed: config.seed,
        poisoning_fraction: config.poisoning_fraction,
        dim: bench.dim,
        num_classes: bench.train.num_classes,
        train_sha256: sha256_file(&paths.train_csv())?,
        test_sha256: sha256_file(&paths.test_csv())?,
        run_id: manifest.run_id.clone(),
        specs: bench.specs,
    };
    memorization::write_json(&paths.dataset_sidecar(), &side)?;
    manifest.dataset_hash = Some(side.test_sha256.clone());
    for p in [paths.train_csv(), paths.test_csv(), paths.dataset_sidecar()] {
        manifest.record_output(&paths.root, &p)?;
    }
    manifest.save(&paths.data_dir().join("manifest.json"))?;
    log::info!(
        "gen-data: {} train / {} test samples in {}",
        bench.train.len(),
        bench.test.len(),
        paths.data_dir().display()
    );
    Ok(manifest)
}

pub fn estimate_mem(config: &RunConfig) -> Result<Manifest> {
    let paths = Paths::resolve(config);
    let (train, test, side) = load_data(&paths)?;
    create_dir(&paths.mem_dir())?;
    let inputs = hashed_inputs(&paths.root, &[paths.train_csv(), paths.test_csv()])?;
    let mut manifest = Manifest::new("estimate-mem", config, inputs);
    manifest.dataset_hash = Some(side.test_sha256);

    let est_cfg = &config.estimator;
    log::info!(
        "estimate-mem: {} subset models on {} threads",
        est_cfg.trials,
        est_cfg.jobs
    );
    let ensemble = fit_ensemble(&train, est_cfg)?;
    let mem = ensemble.memorization(&train, est_cfg)?;
    let infl = ensemble.influence(&test, est_cfg)?;
    let pred = ensemble.predictability(&test)?;
    let mut splits = partition_splits(&mem, &infl, &pred, &config.thresholds)?;
    splits.run_id = Some(manifest.run_id.clone());

    MemFile::from_estimate(&mem, Some(manifest.run_id.clone())).save(&paths.mem_json())?;
    infl.save(&paths.influence_json())?;
    splits.save(&paths.splits_json())?;
    for p in [paths.mem_json(), paths.influence_json(), paths.splits_json()] {
        manifest.record_output(&paths.root, &p)?;
    }
    manifest.save(&paths.mem_dir().join("manifest.json"))?;
    log::info!(
        "estimate-mem: train typical {} / atypical {}, test typical {} / atypical {}",
        splits.train_typical.len(),
        splits.train_atypical.len(),
        splits.test_typical.len(),
        splits.test_atypical.len()
    );
    Ok(manifest)
}

/// Test splits `all`, plus `typical` and `atypical` when estimate-mem has run.
pub fn eval_splits(paths: &Paths, test: &LabeledDataset) -> Result<Vec<EvalSplit>> {
    let mut out = vec![EvalSplit::new("all", test.clone())];
    if paths.splits_json().exists() {
        let s = SplitAssignment::load(&paths.splits_json())?;
        let bound = |idx: &[usize]| {
            idx.iter()
                .find(|&&i| i >= test.len())
                .map_or(Ok(()), |i| Err(Error::Index(format!("split refers to test sample {i} of {}", test.len()))))
        };
        bound(&s.test_typical)?;
        bound(&s.test_atypical)?;
        out.push(EvalSplit::new("atypical", test.subset(&s.test_atypical)));
        out.push(EvalSplit::new("typical", test.subset(&s.test_typical)));
    } else {
        log::warn!("no split assignment found; evaluating on the full test set only");
    }
    Ok(out)
}

fn eval_options(config: &RunConfig, salt: u64) -> EvalOptions {
    EvalOptions {
        attack: config.eval_attack.clone(),
        pair_budget: config.pair_budget,
        seed: seeding::derive_seed(config.seed, &[STREAM_ATTACK, u64::MAX, salt]),
    }
}

pub fn train(config: &RunConfig) -> Result<Manifest> {
    let paths = Paths::resolve(config);
    let (mut train, test, side) = load_data(&paths)?;
    let mut input_files = vec![paths.train_csv(), paths.test_csv()];
    if config.method == Method::Bat {
        require(&paths.mem_json(), "estimate-mem")?;
    }
    if paths.mem_json().exists() {
        let est = MemFile::load(&paths.mem_json())?.to_estimate()?;
        train = train.with_mem(est.mem)?;
        input_files.push(paths.mem_json());
    }
    if paths.splits_json().exists() {
        input_files.push(paths.splits_json());
    }
    let splits = eval_splits(&paths, &test)?;
    let mut manifest = Manifest::new("train", config, hashed_inputs(&paths.root, &input_files)?);
    manifest.dataset_hash = Some(side.test_sha256);

    let dir = paths.run_dir(&run_name(config));
    create_dir(&dir)?;
    let opts = eval_options(config, 0);
    let mut hook = |epoch: usize, model: &MlpModel, summary: &EpochSummary| -> Result<Vec<MetricsRecord>> {
        let mut recs = evaluate_epoch(model, &splits, &opts, epoch)?;
        recs.push(summary.to_record("train"));
        Ok(recs)
    };
    let report = train_with_hook(&train, config.method, &config.training, Some(&mut hook))?;
    let mut records = report.records;
    sort_records(&mut records);

    let model_path = dir.join("model.json");
    let metrics_path = dir.join("train_metrics.csv");
    report.model.save(&model_path, Some(&manifest.run_id))?;
    save_metrics_csv(&records, &metrics_path)?;
    manifest.record_output(&paths.root, &model_path)?;
    manifest.record_output(&paths.root, &metrics_path)?;
    manifest.save(&dir.join("manifest.json"))?;
    log::info!("train: {} epochs of {} written to {}", config.training.epochs, config.method, dir.display());
    Ok(manifest)
}

/// Row order of the metrics table: epoch, then split name.
pub fn sort_records(records: &mut [MetricsRecord]) {
    records.sort_by(|a, b| a.epoch.cmp(&b.epoch).then_with(|| a.split.cmp(&b.split)));
}

/// Evaluates a checkpoint (by default the configured run's final model).
pub fn eval(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Manifest> {
    let paths = Paths::resolve(config);
    let (_, test, side) = load_data(&paths)?;
    let dir = paths.run_dir(&run_name(config));
    let ck = checkpoint.map_or_else(|| dir.join("model.json"), Path::to_path_buf);
    require(&ck, "train")?;
    let model = MlpModel::load(&ck)?;
    let mut input_files = vec![paths.test_csv(), ck.clone()];
    if paths.splits_json().exists() {
        input_files.push(paths.splits_json());
    }
    let splits = eval_splits(&paths, &test)?;
    let mut manifest = Manifest::new("eval", config, hashed_inputs(&paths.root, &input_files)?);
    manifest.dataset_hash = Some(side.test_sha256);

    let epoch = config.training.epochs.saturating_sub(1);
    let mut records = evaluate_epoch(&model, &splits, &eval_options(config, 1), epoch)?;
    sort_records(&mut records);
    create_dir(&dir)?;
    let out = dir.join("eval_metrics.csv");
    save_metrics_csv(&records, &out)?;
    manifest.record_output(&paths.root, &out)?;
    manifest.save(&dir.join("eval_manifest.json"))?;
    Ok(manifest)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub alpha: String,
    pub beta: String,
    pub poisoning_fraction: String,
    pub dataset_hash: String,
    /// Clean and adversarial accuracy on all, typical, atypical.
    pub cells: [Option<f64>; 6],
}

/// Collects the final-epoch records of several runs into one table.
///
/// Each entry of `run_dirs` is a run directory holding `manifest.json` and
/// `eval_metrics.csv` (falling back to the last epoch of `train_metrics.csv`).
/// Runs evaluated on different test sets are refused.
pub fn report(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let mpath = dir.join("manifest.json");
        require(&mpath, "train")?;
        let m = Manifest::load(&mpath)?;
        let eval_csv = dir.join("eval_metrics.csv");
        let csv = if eval_csv.exists() { eval_csv } else { dir.join("train_metrics.csv") };
        require(&csv, "train")?;
        let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
        let records = read_metrics_csv(&text, &csv.display().to_string())?;
        let last = records.iter().map(|r| r.epoch).max().unwrap_or(0);
        let pick = |split: &str| records.iter().find(|r| r.epoch == last && r.split == split);
        let mut cells = [None; 6];
        for (k, split) in ["all", "typical", "atypical"].iter().enumerate() {
            if let Some(r) = pick(split) {
                cells[2 * k] = r.clean_acc;
                cells[2 * k + 1] = r.adv_acc;
            }
        }
        let get = |k: &str| m.config.get(k).cloned().unwrap_or_default();
        let bat_only = |k: &str| if get("method") == "bat" { get(k) } else { "-".into() };
        rows.push(ReportRow {
            run: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
            method: get("method"),
            alpha: bat_only("alpha"),
            beta: bat_only("beta"),
            poisoning_fraction: get("poisoning_fraction"),
            dataset_hash: m.dataset_hash.clone().unwrap_or_default(),
            cells,
        });
    }
    if let Some(bad) = rows.iter().find(|r| r.dataset_hash != rows[0].dataset_hash) {
        return Err(Error::Config(format!(
            "runs `{}` and `{}` were evaluated on different test sets",
            rows[0].run, bad.run
        )));
    }
    rows.sort_by(|a, b| {
        (&a.method, &a.alpha, &a.beta, &a.poisoning_fraction, &a.run)
            .cmp(&(&b.method, &b.alpha, &b.beta, &b.poisoning_fraction, &b.run))
    });
    Ok(rows)
}

/// Fixed-width text table with All/Typical/Atypical × Clean/Adv columns (percent).
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:<7} {:>5} {:>5} {:>6} | {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7}",
        "run", "method", "alpha", "beta", "poison", "All", "", "Typical", "", "Atyp.", ""
    );
    let _ = writeln!(
        s,
        "{:<18} {:<7} {:>5} {:>5} {:>6} | {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7}",
        "", "", "", "", "", "Clean", "Adv", "Clean", "Adv", "Clean", "Adv"
    );
    for r in rows {
        let c: Vec<String> = r
            .cells
            .iter()
            .map(|v| v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x)))
            .collect();
        let _ = writeln!(
            s,
            "{:<18} {:<7} {:>5} {:>5} {:>6} | {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7}",
            r.run, r.method, r.alpha, r.beta, r.poisoning_fraction, c[0], c[1], c[2], c[3], c[4], c[5]
        );
    }
    s
}
