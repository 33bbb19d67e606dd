//! Synthetic sub-population benchmark.
//!
//! Each class owns one dense main blob. Rare sub-populations come in two
//! flavors: benign atypical singletons placed away from every main blob, and
//! poisoning atypicals that carry their own (correct) label but sit inside
//! another class's main blob.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, STREAM_DATA, STREAM_LAYOUT};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubPopKind {
    Main,
    AtypicalBenign,
    AtypicalPoisoning,
}

impl SubPopKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SubPopKind::Main => "main",
            SubPopKind::AtypicalBenign => "atypical_benign",
            SubPopKind::AtypicalPoisoning => "atypical_poisoning",
        }
    }
}

impl fmt::Display for SubPopKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubPopKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "main" => Ok(SubPopKind::Main),
            "atypical_benign" => Ok(SubPopKind::AtypicalBenign),
            "atypical_poisoning" => Ok(SubPopKind::AtypicalPoisoning),
            other => Err(format!("unknown kind {other:?}")),
        }
    }
}

/// One Gaussian blob of the generating mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPopSpec {
    pub class_id: usize,
    pub center: Vec<f64>,
    /// Per-dimension standard deviation.
    pub spread: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub kind: SubPopKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poison_target_class: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Feature rows in `[0,1]^dim` with labels and ground-truth annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub dim: usize,
    pub num_classes: usize,
    /// Row-major `[len × dim]`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub subpop_id: Vec<usize>,
    pub kind: Vec<SubPopKind>,
    /// Per-sample memorization values, attached after estimation.
    pub mem: Option<Vec<f64>>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features and labels of the given rows as a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::EmptySplit("batch with no rows".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::matrix(idx.len(), self.dim, data)?, labels))
    }

    pub fn all(&self) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        LabeledDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subpop_id: idx.iter().map(|&i| self.subpop_id[i]).collect(),
            kind: idx.iter().map(|&i| self.kind[i]).collect(),
            mem: self.mem.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
            split: self.split,
        }
    }

    pub fn indices_of_kind(&self, kind: SubPopKind) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.kind[i] == kind).collect()
    }

    pub fn with_mem(mut self, mem: Vec<f64>) -> Result<Self> {
        if mem.len() != self.len() {
            return Err(Error::dim(
                "with_mem",
                format!("{} memorization values for {} samples", mem.len(), self.len()),
            ));
        }
        self.mem = Some(mem);
        Ok(self)
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Checks the structural invariants of a blob list before sampling.
pub fn validate_specs(specs: &[SubPopSpec], dim: usize) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Spec("no sub-populations given".into()));
    }
    if dim == 0 {
        return Err(Error::Spec("dimension must be positive".into()));
    }
    let num_classes = specs.iter().map(|s| s.class_id).max().unwrap_or(0) + 1;
    let mut mains: Vec<Option<usize>> = vec![None; num_classes];
    for (k, s) in specs.iter().enumerate() {
        if s.center.len() != dim {
            return Err(Error::Spec(format!("blob {k}: center has {} coordinates, expected {dim}", s.center.len())));
        }
        if s.center.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Spec(format!("blob {k}: center outside [0,1]^{dim}")));
        }
        if !(s.spread >= 0.0) || !s.spread.is_finite() {
            return Err(Error::Spec(format!("blob {k}: spread must be a finite non-negative number")));
        }
        if s.kind == SubPopKind::Main {
            if let Some(prev) = mains[s.class_id] {
                return Err(Error::Spec(format!("class {}: main blobs {prev} and {k}", s.class_id)));
            }
            mains[s.class_id] = Some(k);
        }
        if s.kind != SubPopKind::AtypicalPoisoning && s.poison_target_class.is_some() {
            return Err(Error::Spec(format!("blob {k}: only poisoning blobs take a target class")));
        }
    }
    for (a, ma) in mains.iter().enumerate() {
        for (b, mb) in mains.iter().enumerate().skip(a + 1) {
            if let (Some(ia), Some(ib)) = (ma, mb) {
                let (sa, sb) = (&specs[*ia], &specs[*ib]);
                let gap = linf(&sa.center, &sb.center);
                let need = 6.0 * sa.spread.max(sb.spread);
                if gap < need {
                    return Err(Error::Spec(format!(
                        "main blobs of classes {a} and {b} are {gap:.4} apart in l-inf, need >= {need:.4}"
                    )));
                }
            }
        }
    }
    for (k, s) in specs.iter().enumerate() {
        if s.kind != SubPopKind::AtypicalPoisoning {
            continue;
        }
        let target = s
            .poison_target_class
            .ok_or_else(|| Error::Spec(format!("blob {k}: poisoning blob without target class")))?;
        if target == s.class_id {
            return Err(Error::Spec(format!("blob {k}: poisoning target equals its own class")));
        }
        let main = mains
            .get(target)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Spec(format!("blob {k}: target class {target} has no main blob")))?;
        let m = &specs[main];
        let d = linf(&s.center, &m.center);
        if d > 2.0 * s.spread + 1e-12 {
            return Err(Error::Spec(format!(
                "blob {k}: center is {d:.4} (l-inf) from class {target}'s main center, must be within 2 x spread = {:.4}",
                2.0 * s.spread
            )));
        }
    }
    Ok(())
}

/// Draws every blob from an axis-aligned Gaussian, clipped to `[0,1]^dim`.
///
/// Each blob's train and test samples come from their own seeded streams, so
/// changing one blob's counts leaves every other sample unchanged.
pub fn generate_dataset(specs: &[SubPopSpec], dim: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    validate_specs(specs, dim)?;
    let num_classes = specs.iter().map(|s| s.class_id).max().unwrap_or(0) + 1;
    let empty = |split| LabeledDataset {
        dim,
        num_classes,
        features: Vec::new(),
        labels: Vec::new(),
        subpop_id: Vec::new(),
        kind: Vec::new(),
        mem: None,
        split,
    };
    let mut train = empty(Split::Train);
    let mut test = empty(Split::Test);
    for (k, spec) in specs.iter().enumerate() {
        for (split_tag, count, out) in [(0u64, spec.train_count, &mut train), (1, spec.test_count, &mut test)] {
            let mut rng = seeding::rng(seed, &[STREAM_DATA, k as u64, split_tag]);
            for _ in 0..count {
                for c in &spec.center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out.features.push((c + spec.spread * z).clamp(0.0, 1.0));
                }
                out.labels.push(spec.class_id);
                out.subpop_id.push(k);
                out.kind.push(spec.kind);
            }
        }
    }
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkProfile {
    Small,
    Medium,
}

impl FromStr for BenchmarkProfile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "small" => Ok(BenchmarkProfile::Small),
            "medium" => Ok(BenchmarkProfile::Medium),
            other => Err(format!("unknown profile {other:?} (expected small or medium)")),
        }
    }
}

impl fmt::Display for BenchmarkProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchmarkProfile::Small => "small",
            BenchmarkProfile::Medium => "medium",
        })
    }
}

/// Geometry and counts of the default benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkLayout {
    pub num_classes: usize,
    pub dim: usize,
    /// Standard deviation of the main blobs.
    pub main_spread: f64,
    /// Main centers are `0.5 ± main_offset` per coordinate.
    pub main_offset: f64,
    pub main_train: usize,
    pub main_test: usize,
    pub benign_per_class: usize,
    /// Test samples per benign blob cycle through `1..=benign_test_max`.
    pub benign_test_max: usize,
    pub atypical_spread: f64,
    /// Poisoning blobs per class at 100%; each holds one training sample.
    pub poison_per_class: usize,
    /// Training samples per poisoning blob.
    pub poison_train: usize,
    pub poison_test: usize,
    /// Standard deviation of the poisoning blobs.
    pub poison_spread: f64,
    /// Per-coordinate offset of a poisoning center from its target's main
    /// center, in units of `poison_spread`; at most 2.
    pub poison_radius: f64,
    /// Offset a poisoning center towards its own class on the coordinates
    /// where the two main centers differ, instead of in a random direction.
    pub poison_toward_own: bool,
}

impl BenchmarkProfile {
    pub fn layout(self) -> BenchmarkLayout {
        let small = BenchmarkLayout {
            num_classes: 4,
            dim: 16,
            main_spread: 0.02,
            main_offset: 0.08,
            main_train: 200,
            main_test: 100,
            benign_per_class: 6,
            benign_test_max: 3,
            atypical_spread: 0.015,
            poison_per_class: 5,
            poison_train: 1,
            poison_test: 2,
            poison_spread: 0.03,
            poison_radius: 2.0,
            poison_toward_own: false,
        };
        match self {
            BenchmarkProfile::Small => small,
            BenchmarkProfile::Medium => BenchmarkLayout {
                main_train: small.main_train * 4,
                main_test: small.main_test * 4,
                benign_per_class: small.benign_per_class * 4,
                poison_per_class: small.poison_per_class * 4,
                ..small
            },
        }
    }
}

/// A generated benchmark together with everything needed to regenerate it.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub specs: Vec<SubPopSpec>,
    pub dim: usize,
    pub seed: u64,
    pub poisoning_fraction: f64,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl BenchmarkLayout {
    /// Blob list at full poisoning.
    pub fn specs(&self, seed: u64) -> Result<Vec<SubPopSpec>> {
        let mut rng = seeding::rng(seed, &[STREAM_LAYOUT]);
        let (c, d) = (self.num_classes, self.dim);
        if c < 2 {
            return Err(Error::Spec("benchmark needs at least two classes".into()));
        }

        // sign patterns around the cube center, pairwise differing in >= d/4 coordinates
        let min_diff = (d / 4).max(1);
        let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(c);
        let mut attempts = 0;
        while patterns.len() < c {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Spec("could not place main blobs".into()));
            }
            let p: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let ok = patterns
                .iter()
                .all(|q| q.iter().zip(&p).filter(|(a, b)| a != b).count() >= min_diff);
            if ok {
                patterns.push(p);
            }
        }
        let mains: Vec<Vec<f64>> = patterns
            .iter()
            .map(|p| p.iter().map(|s| 0.5 + s * self.main_offset).collect())
            .collect();

        let mut specs: Vec<SubPopSpec> = mains
            .iter()
            .enumerate()
            .map(|(class_id, center)| SubPopSpec {
                class_id,
                center: center.clone(),
                spread: self.main_spread,
                train_count: self.main_train,
                test_count: self.main_test,
                kind: SubPopKind::Main,
                poison_target_class: None,
            })
            .collect();

        // benign singletons: far from every main blob, and nearer to some other
        // class's main center than to their own
        let mut atypical_centers: Vec<Vec<f64>> = Vec::new();
        for class_id in 0..c {
            for b in 0..self.benign_per_class {
                let mut attempts = 0;
                let center = loop {
                    attempts += 1;
                    if attempts > 100_000 {
                        return Err(Error::Spec("could not place benign atypical blob".into()));
                    }
                    let cand: Vec<f64> = (0..d).map(|_| rng.random_range(0.15..0.85)).collect();
                    let dists: Vec<f64> = mains.iter().map(|m| l2(&cand, m)).collect();
                    let nearest = (0..c).min_by(|&i, &j| dists[i].total_cmp(&dists[j])).unwrap_or(0);
                    let far = mains.iter().all(|m| linf(&cand, m) >= 0.2);
                    let apart = atypical_centers.iter().all(|a| linf(&cand, a) >= 0.15);
                    if nearest != class_id && far && apart {
                        break cand;
                    }
                };
                atypical_centers.push(center.clone());
                specs.push(SubPopSpec {
                    class_id,
                    center,
                    spread: self.atypical_spread,
                    train_count: 1,
                    test_count: 1 + b % self.benign_test_max.max(1),
                    kind: SubPopKind::AtypicalBenign,
                    poison_target_class: None,
                });
            }
        }

        // poisoning singletons on the rim of another class's main blob
        for class_id in 0..c {
            for p in 0..self.poison_per_class {
                let target = (class_id + 1 + p % (c - 1)) % c;
                let r = self.poison_radius * self.poison_spread;
                let center: Vec<f64> = mains[target]
                    .iter()
                    .zip(&mains[class_id])
                    .map(|(m, own)| {
                        let random = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        let s = if self.poison_toward_own && own != m { (own - m).signum() } else { random };
                        (m + s * r).clamp(0.0, 1.0)
                    })
                    .collect();
                specs.push(SubPopSpec {
                    class_id,
                    center,
                    spread: self.poison_spread,
                    train_count: self.poison_train,
                    test_count: self.poison_test,
                    kind: SubPopKind::AtypicalPoisoning,
                    poison_target_class: Some(target),
                });
            }
        }
        Ok(specs)
    }

    /// Benchmark with only a fraction of the poisoning training samples kept.
    ///
    /// The kept poisoning blobs are chosen by a seeded shuffle; test sets and
    /// all other training samples are identical across fractions.
    pub fn generate(&self, poisoning_fraction: f64, seed: u64) -> Result<Benchmark> {
        if !(0.0..=1.0).contains(&poisoning_fraction) {
            return Err(Error::Spec(format!("poisoning fraction {poisoning_fraction} outside [0, 1]")));
        }
        let mut specs = self.specs(seed)?;
        let mut poison: Vec<usize> = (0..specs.len())
            .filter(|&k| specs[k].kind == SubPopKind::AtypicalPoisoning)
            .collect();
        let keep = (poisoning_fraction * poison.len() as f64).round() as usize;
        poison.shuffle(&mut seeding::rng(seed, &[STREAM_LAYOUT, 1]));
        for &k in &poison[keep..] {
            specs[k].train_count = 0;
        }
        let (train, test) = generate_dataset(&specs, self.dim, seed)?;
        Ok(Benchmark {
            specs,
            dim: self.dim,
            seed,
            poisoning_fraction,
            train,
            test,
        })
    }
}

pub fn default_benchmark(profile: BenchmarkProfile, poisoning_fraction: f64, seed: u64) -> Result<Benchmark> {
    profile.layout().generate(poisoning_fraction, seed)
}

/// Writes the dataset as CSV: `feature_0..feature_{d-1},label,subpop_id,kind`.
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (0..ds.dim).map(|i| format!("feature_{i}")).collect();
    header.extend(["label", "subpop_id", "kind"].map(String::from));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        rec.push(ds.subpop_id[i].to_string());
        rec.push(ds.kind[i].to_string());
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            context: path.display().to_string(),
            detail: format!("{other:?}"),
        },
    }
}

/// Reads a dataset CSV written by [`save_dataset`], validating every field.
pub fn load_dataset(path: &Path, split: Split) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, &path.display().to_string(), split)
}

pub fn read_dataset(reader: impl std::io::Read, source: &str, split: Split) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_reader(reader);
    let perr = |context: String, detail: String| Error::Parse { context, detail };
    let headers = r
        .headers()
        .map_err(|e| perr(format!("{source}: header"), e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| perr(format!("{source}: header"), format!("missing column `{name}`")))
    };
    let (label_col, subpop_col, kind_col) = (col("label")?, col("subpop_id")?, col("kind")?);
    let mut feature_cols = Vec::new();
    while let Some(p) = headers.iter().position(|h| h == format!("feature_{}", feature_cols.len())) {
        feature_cols.push(p);
    }
    if feature_cols.is_empty() {
        return Err(perr(format!("{source}: header"), "missing column `feature_0`".into()));
    }
    let dim = feature_cols.len();
    let mut ds = LabeledDataset {
        dim,
        num_classes: 0,
        features: Vec::new(),
        labels: Vec::new(),
        subpop_id: Vec::new(),
        kind: Vec::new(),
        mem: None,
        split,
    };
    for (row_no, rec) in r.records().enumerate() {
        let line = row_no + 2;
        let rec = rec.map_err(|e| perr(format!("{source}: line {line}"), e.to_string()))?;
        let field = |c: usize| {
            rec.get(c)
                .ok_or_else(|| perr(format!("{source}: line {line}"), format!("missing field `{}`", &headers[c])))
        };
        for (f, &c) in feature_cols.iter().enumerate() {
            let ctx = || format!("{source}: line {line}, column feature_{f}");
            let v: f64 = field(c)?.trim().parse().map_err(|e| perr(ctx(), format!("{e}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(perr(ctx(), format!("value {v} outside [0, 1]")));
            }
            ds.features.push(v);
        }
        let int = |c: usize, name: &str| -> Result<usize> {
            field(c)?
                .trim()
                .parse()
                .map_err(|e| perr(format!("{source}: line {line}, column {name}"), format!("{e}")))
        };
        ds.labels.push(int(label_col, "label")?);
        ds.subpop_id.push(int(subpop_col, "subpop_id")?);
        let kind = field(kind_col)?
            .trim()
            .parse()
            .map_err(|e| perr(format!("{source}: line {line}, column kind"), e))?;
        ds.kind.push(kind);
    }
    ds.num_classes = ds.labels.iter().max().map_or(0, |m| m + 1);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(class_id: usize, center: Vec<f64>, train: usize, kind: SubPopKind) -> SubPopSpec {
        SubPopSpec {
            class_id,
            center,
            spread: 0.02,
            train_count: train,
            test_count: 3,
            kind,
            poison_target_class: None,
        }
    }

    #[test]
    fn single_blob_counts() {
        let (train, test) = generate_dataset(&[blob(0, vec![0.5, 0.5], 10, SubPopKind::Main)], 2, 1).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 3);
        assert!(train.labels.iter().all(|&y| y == 0));
    }

    #[test]
    fn features_are_clipped() {
        let mut b = blob(0, vec![0.05, 0.95], 500, SubPopKind::Main);
        b.spread = 0.1;
        let (train, _) = generate_dataset(&[b], 2, 3).unwrap();
        assert!(train.features.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(train.features.iter().any(|&v| v == 0.0));
    }

    #[test]
    fn separation_is_enforced_before_sampling() {
        let specs = [
            blob(0, vec![0.5, 0.5], 5, SubPopKind::Main),
            blob(1, vec![0.6, 0.5], 5, SubPopKind::Main),
        ];
        assert!(matches!(generate_dataset(&specs, 2, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn poisoning_must_sit_near_target() {
        let mut p = blob(0, vec![0.8, 0.2], 1, SubPopKind::AtypicalPoisoning);
        p.poison_target_class = Some(1);
        let specs = vec![
            blob(0, vec![0.2, 0.2], 5, SubPopKind::Main),
            blob(1, vec![0.8, 0.8], 5, SubPopKind::Main),
            p.clone(),
        ];
        assert!(matches!(generate_dataset(&specs, 2, 0), Err(Error::Spec(_))));
        let mut ok = specs;
        ok[2].center = vec![0.81, 0.79];
        generate_dataset(&ok, 2, 0).unwrap();
        ok[2].poison_target_class = Some(0);
        assert!(generate_dataset(&ok, 2, 0).is_err());
    }

    #[test]
    fn poisoning_samples_are_nearer_their_target() {
        let bm = default_benchmark(BenchmarkProfile::Small, 1.0, 5).unwrap();
        let main_center = |c: usize| {
            bm.specs
                .iter()
                .find(|s| s.kind == SubPopKind::Main && s.class_id == c)
                .unwrap()
                .center
                .clone()
        };
        let mut seen = 0;
        for ds in [&bm.train, &bm.test] {
            for i in ds.indices_of_kind(SubPopKind::AtypicalPoisoning) {
                let spec = &bm.specs[ds.subpop_id[i]];
                let own = l2(ds.row(i), &main_center(spec.class_id));
                let target = l2(ds.row(i), &main_center(spec.poison_target_class.unwrap()));
                assert!(target < own);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn benchmark_fractions() {
        let zero = default_benchmark(BenchmarkProfile::Small, 0.0, 9).unwrap();
        assert!(zero.train.indices_of_kind(SubPopKind::AtypicalPoisoning).is_empty());
        let full = default_benchmark(BenchmarkProfile::Small, 1.0, 9).unwrap();
        let fifth = default_benchmark(BenchmarkProfile::Small, 0.2, 9).unwrap();
        let n_full = full.train.indices_of_kind(SubPopKind::AtypicalPoisoning).len();
        let n_fifth = fifth.train.indices_of_kind(SubPopKind::AtypicalPoisoning).len();
        assert!(n_fifth > 0);
        assert_eq!(n_full, 5 * n_fifth);
        // everything except poisoning training rows is shared
        assert_eq!(zero.test, full.test);
        let main_zero = zero.train.subset(&zero.train.indices_of_kind(SubPopKind::Main));
        let main_full = full.train.subset(&full.train.indices_of_kind(SubPopKind::Main));
        assert_eq!(main_zero, main_full);
    }

    #[test]
    fn benchmark_is_deterministic() {
        let a = default_benchmark(BenchmarkProfile::Small, 0.2, 4).unwrap();
        let b = default_benchmark(BenchmarkProfile::Small, 0.2, 4).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.specs, b.specs);
    }

    #[test]
    fn small_profile_shape() {
        let bm = default_benchmark(BenchmarkProfile::Small, 1.0, 1).unwrap();
        assert_eq!(bm.train.num_classes, 4);
        assert_eq!(bm.train.dim, 16);
        assert_eq!(bm.train.indices_of_kind(SubPopKind::Main).len(), 800);
        assert_eq!(bm.train.indices_of_kind(SubPopKind::AtypicalBenign).len(), 24);
        validate_specs(&bm.specs, bm.dim).unwrap();
    }

    #[test]
    fn csv_round_trip() {
        let bm = default_benchmark(BenchmarkProfile::Small, 0.2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        save_dataset(&bm.train, &path).unwrap();
        let back = load_dataset(&path, Split::Train).unwrap();
        assert_eq!(back, bm.train);
    }

    #[test]
    fn missing_label_column_is_named() {
        let text = "feature_0,feature_1,subpop_id,kind\n0.1,0.2,0,main\n";
        let err = read_dataset(text.as_bytes(), "mem", Split::Train).unwrap_err();
        assert!(err.to_string().contains("`label`"), "{err}");
    }

    #[test]
    fn out_of_range_feature_is_rejected() {
        let text = "feature_0,feature_1,label,subpop_id,kind\n0.1,1.2,0,0,main\n";
        let err = read_dataset(text.as_bytes(), "mem", Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("feature_1") && msg.contains("1.2"), "{msg}");
    }

    #[test]
    fn malformed_number_reports_position() {
        let text = "feature_0,label,subpop_id,kind\n0.1,0,0,main\nabc,0,0,main\n";
        let err = read_dataset(text.as_bytes(), "x.csv", Split::Test).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
