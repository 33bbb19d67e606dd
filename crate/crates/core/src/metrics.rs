//! Clean and adversarial accuracy, class-wise cosine distance of
//! representations, and the per-epoch metrics table.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::attack::{pgd, AttackConfig};
use crate::error::{Error, Result};
use crate::model::{argmax, MlpModel};
use crate::seeding::{self, STREAM_ATTACK, STREAM_PAIRS};
use crate::synthdata::LabeledDataset;
use crate::tensor::Tensor;

/// Rows evaluated per forward/attack call.
const EVAL_CHUNK: usize = 256;

/// One row of the metrics table. `None` marks a value that is undefined for
/// the split and is written as an empty field.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub clean_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    pub cosine_distance: Option<f64>,
    pub mean_cos_similarity: Option<f64>,
    pub mean_weight: Option<f64>,
    pub ce_loss: Option<f64>,
    pub dl_loss: Option<f64>,
}

impl MetricsRecord {
    pub fn empty(epoch: usize, split: impl Into<String>) -> Self {
        MetricsRecord {
            epoch,
            split: split.into(),
            clean_acc: None,
            adv_acc: None,
            cosine_distance: None,
            mean_cos_similarity: None,
            mean_weight: None,
            ce_loss: None,
            dl_loss: None,
        }
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

fn nonempty(ds: &LabeledDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptySplit(format!("{what} on a split with no samples")));
    }
    Ok(())
}

fn count_correct(model: &MlpModel, x: &Tensor, labels: &[usize]) -> Result<usize> {
    let pred = model.predict(x)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count())
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn clean_accuracy(model: &MlpModel, ds: &LabeledDataset) -> Result<f64> {
    nonempty(ds, "clean accuracy")?;
    let mut correct = 0;
    for idx in chunks(ds.len()) {
        let (x, y) = ds.batch(&idx)?;
        correct += count_correct(model, &x, &y)?;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy on PGD-perturbed inputs. `seed` only matters with random starts.
pub fn adv_accuracy(model: &MlpModel, ds: &LabeledDataset, attack: &AttackConfig, seed: u64) -> Result<f64> {
    nonempty(ds, "adversarial accuracy")?;
    let mut correct = 0;
    for (c, idx) in chunks(ds.len()).enumerate() {
        let (x, y) = ds.batch(&idx)?;
        let adv = pgd(model, &x, &y, attack, seeding::derive_seed(seed, &[STREAM_ATTACK, c as u64]))?;
        correct += count_correct(model, &adv, &y)?;
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineStats {
    /// `1 - mean_similarity`.
    pub distance: f64,
    pub mean_similarity: f64,
    pub pairs: usize,
    /// Pairs skipped because one representation was the zero vector.
    pub skipped_zero: usize,
}

/// Mean cosine similarity of pen-ultimate representations over cross-class
/// pairs, reported together with the distance `1 - similarity`.
///
/// All cross-class pairs are used when there are at most `pair_budget` of
/// them; otherwise `pair_budget` pairs are drawn uniformly with replacement.
pub fn classwise_cosine_distance(
    model: &MlpModel,
    ds: &LabeledDataset,
    pair_budget: usize,
    seed: u64,
) -> Result<CosineStats> {
    nonempty(ds, "cosine distance")?;
    let mut reps: Vec<Vec<f64>> = Vec::with_capacity(ds.len());
    for idx in chunks(ds.len()) {
        let (x, _) = ds.batch(&idx)?;
        let r = model.forward(&x)?.representation;
        reps.extend(r.data().chunks(model.representation_dim()).map(<[f64]>::to_vec));
    }
    let norms: Vec<f64> = reps.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let labels = &ds.labels;
    let n = ds.len();

    let mut per_class = vec![0usize; ds.num_classes.max(labels.iter().max().map_or(0, |m| m + 1))];
    for &y in labels {
        per_class[y] += 1;
    }
    let same: usize = per_class.iter().map(|c| c * c.saturating_sub(1) / 2).sum();
    let cross_total = n * (n - 1) / 2 - same;
    if cross_total == 0 {
        return Err(Error::Contract("cosine distance needs at least two classes".into()));
    }

    let mut sum = 0.0;
    let mut pairs = 0usize;
    let mut skipped_zero = 0usize;
    let mut visit = |i: usize, j: usize| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            skipped_zero += 1;
            return;
        }
        let dot: f64 = reps[i].iter().zip(&reps[j]).map(|(a, b)| a * b).sum();
        sum += dot / (norms[i] * norms[j]);
        pairs += 1;
    };
    if cross_total <= pair_budget {
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] != labels[j] {
                    visit(i, j);
                }
            }
        }
    } else {
        let mut rng = seeding::rng(seed, &[STREAM_PAIRS]);
        let mut drawn = 0;
        while drawn < pair_budget {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if labels[i] != labels[j] {
                visit(i, j);
                drawn += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Contract(format!(
            "no cross-class pair with non-zero representations ({skipped_zero} skipped)"
        )));
    }
    let mean_similarity = sum / pairs as f64;
    Ok(CosineStats {
        distance: 1.0 - mean_similarity,
        mean_similarity,
        pairs,
        skipped_zero,
    })
}

/// A named evaluation split.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub name: String,
    pub data: LabeledDataset,
    /// Whether to report the cosine distance of representations on this split.
    pub cosine: bool,
}

impl EvalSplit {
    /// Cosine distance is reported only for the split named `typical`.
    pub fn new(name: impl Into<String>, data: LabeledDataset) -> Self {
        let name = name.into();
        let cosine = name == "typical";
        EvalSplit { name, data, cosine }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub attack: AttackConfig,
    pub pair_budget: usize,
    pub seed: u64,
}

/// One record per split; an empty split yields a record with empty fields.
pub fn evaluate_epoch(
    model: &MlpModel,
    splits: &[EvalSplit],
    opts: &EvalOptions,
    epoch: usize,
) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::with_capacity(splits.len());
    for split in splits {
        let mut rec = MetricsRecord::empty(epoch, split.name.clone());
        if split.data.is_empty() {
            log::warn!("epoch {epoch}: split `{}` is empty, leaving its metrics blank", split.name);
            out.push(rec);
            continue;
        }
        rec.clean_acc = Some(clean_accuracy(model, &split.data)?);
        rec.adv_acc = Some(adv_accuracy(model, &split.data, &opts.attack, opts.seed)?);
        if split.cosine {
            match classwise_cosine_distance(model, &split.data, opts.pair_budget, opts.seed) {
                Ok(c) => {
                    rec.cosine_distance = Some(c.distance);
                    rec.mean_cos_similarity = Some(c.mean_similarity);
                }
                Err(e) => log::warn!("epoch {epoch}: no cosine distance on `{}`: {e}", split.name),
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub const METRICS_HEADER: &str =
    "epoch,split,clean_acc,adv_acc,cosine_distance,mean_cos_similarity,mean_weight,ce_loss,dl_loss";

/// `%g`-style formatting with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    let sci = format!("{v:.5e}");
    // rounding can bump the exponent (9.999996 -> 1.00000e1)
    let exp = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        trim_zeros(&s)
    } else {
        let (mant, e) = sci.split_once('e').unwrap_or((&sci, "0"));
        let e: i32 = e.parse().unwrap_or(0);
        let sign = if e < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), e.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_sig6).unwrap_or_default()
}

/// Rows sorted by epoch, then split name.
pub fn write_metrics_csv(records: &[MetricsRecord], mut w: impl Write) -> std::io::Result<()> {
    let mut rows: Vec<&MetricsRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.epoch.cmp(&b.epoch).then_with(|| a.split.cmp(&b.split)));
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.split,
            opt(r.clean_acc),
            opt(r.adv_acc),
            opt(r.cosine_distance),
            opt(r.mean_cos_similarity),
            opt(r.mean_weight),
            opt(r.ce_loss),
            opt(r.dl_loss)
        )?;
    }
    Ok(())
}

pub fn save_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(records, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses a metrics CSV back into records (values carry six significant digits).
pub fn read_metrics_csv(text: &str, source: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                context: source.into(),
                detail: "missing or unexpected metrics header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{source}: line {}", n + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                context: ctx(),
                detail: format!("expected 9 fields, got {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|e| Error::Parse {
                context: ctx(),
                detail: format!("{e}"),
            })
        };
        out.push(MetricsRecord {
            epoch: f[0].parse().map_err(|e| Error::Parse {
                context: ctx(),
                detail: format!("epoch: {e}"),
            })?,
            split: f[1].to_string(),
            clean_acc: num(f[2])?,
            adv_acc: num(f[3])?,
            cosine_distance: num(f[4])?,
            mean_cos_similarity: num(f[5])?,
            mean_weight: num(f[6])?,
            ce_loss: num(f[7])?,
            dl_loss: num(f[8])?,
        });
    }
    Ok(out)
}

/// Argmax prediction for every sample.
pub fn predictions(model: &MlpModel, ds: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for idx in chunks(ds.len()) {
        let (x, _) = ds.batch(&idx)?;
        let logits = model.forward(&x)?.logits;
        out.extend(logits.data().chunks(model.num_classes()).map(argmax));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use crate::synthdata::{Split, SubPopKind};

    fn dataset(rows: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> LabeledDataset {
        let dim = rows[0].len();
        let n = labels.len();
        LabeledDataset {
            dim,
            num_classes: classes,
            features: rows.concat(),
            labels,
            subpop_id: vec![0; n],
            kind: vec![SubPopKind::Main; n],
            mem: None,
            split: Split::Test,
        }
    }

    fn linear(classes: usize, dim: usize, w: Vec<f64>, b: Vec<f64>) -> MlpModel {
        MlpModel::from_layers(vec![Layer {
            weights: Tensor::matrix(classes, dim, w).unwrap(),
            bias: Tensor::vector(b).unwrap(),
        }])
        .unwrap()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        // one-hot inputs mapped through identity weights
        let rows: Vec<Vec<f64>> = (0..8).map(|i| (0..4).map(|c| if c == i % 4 { 1.0 } else { 0.0 }).collect()).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let ds = dataset(rows, labels, 4);
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
        let perfect = linear(4, 4, eye, vec![0.0; 4]);
        assert_eq!(clean_accuracy(&perfect, &ds).unwrap(), 1.0);
        let constant = linear(4, 4, vec![0.0; 16], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(clean_accuracy(&constant, &ds).unwrap(), 0.25);
    }

    #[test]
    fn empty_split_is_an_error() {
        let ds = dataset(vec![vec![0.5]], vec![0], 2).subset(&[]);
        let m = linear(2, 1, vec![1.0, -1.0], vec![0.0, 0.0]);
        assert!(matches!(clean_accuracy(&m, &ds), Err(Error::EmptySplit(_))));
        assert!(matches!(adv_accuracy(&m, &ds, &AttackConfig::evaluation(0.1), 0), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn zero_radius_attack_matches_clean() {
        let m = MlpModel::init(3, &[5], 3, 8).unwrap();
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37) % 1.0, (i as f64 * 0.11) % 1.0, 0.5]).collect();
        let labels = (0..30).map(|i| i % 3).collect();
        let ds = dataset(rows, labels, 3);
        let mut cfg = AttackConfig::evaluation(0.0);
        cfg.step_size = 0.01;
        assert_eq!(adv_accuracy(&m, &ds, &cfg, 1).unwrap(), clean_accuracy(&m, &ds).unwrap());
    }

    fn rep_model(dim: usize) -> MlpModel {
        // linear model: representations are the inputs themselves
        linear(2, dim, vec![0.0; 2 * dim], vec![0.0, 0.0])
    }

    #[test]
    fn cosine_closed_forms() {
        let m = rep_model(2);
        let same = dataset(vec![vec![0.3, 0.4]; 4], vec![0, 0, 1, 1], 2);
        let c = classwise_cosine_distance(&m, &same, 100, 0).unwrap();
        assert!(c.distance.abs() < 1e-15);

        let ortho = dataset(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 0, 1], 2);
        let c = classwise_cosine_distance(&m, &ortho, 100, 0).unwrap();
        assert_eq!(c.distance, 1.0);
        assert_eq!(c.pairs, 2);
    }

    #[test]
    fn cosine_anti_parallel() {
        // representations outside [0,1] need a hidden layer-free model fed directly
        let m = linear(2, 2, vec![0.0; 4], vec![0.0; 2]);
        let ds = LabeledDataset {
            features: vec![1.0, 0.0, -1.0, 0.0],
            ..dataset(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![0, 1], 2)
        };
        let c = classwise_cosine_distance(&m, &ds, 10, 0).unwrap();
        assert_eq!(c.distance, 2.0);
    }

    #[test]
    fn cosine_skips_zero_vectors_and_needs_two_classes() {
        let m = rep_model(2);
        let ds = dataset(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]], vec![0, 1, 0], 2);
        let c = classwise_cosine_distance(&m, &ds, 10, 0).unwrap();
        assert_eq!((c.pairs, c.skipped_zero), (1, 1));
        let one_class = dataset(vec![vec![1.0, 0.0], vec![0.5, 0.5]], vec![0, 0], 2);
        assert!(classwise_cosine_distance(&m, &one_class, 10, 0).is_err());
    }

    #[test]
    fn cosine_sampling_is_seeded() {
        let m = MlpModel::init(2, &[6], 2, 3).unwrap();
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![(i as f64 * 0.13) % 1.0, (i as f64 * 0.29) % 1.0]).collect();
        let ds = dataset(rows, (0..60).map(|i| i % 2).collect(), 2);
        let a = classwise_cosine_distance(&m, &ds, 50, 4).unwrap();
        let b = classwise_cosine_distance(&m, &ds, 50, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs + a.skipped_zero, 50);
        assert!((0.0..=1.0).contains(&a.distance));
    }

    #[test]
    fn evaluate_epoch_cardinality_and_blank_split() {
        let m = MlpModel::init(2, &[4], 2, 0).unwrap();
        let ds = dataset(vec![vec![0.2, 0.3], vec![0.7, 0.1], vec![0.4, 0.9]], vec![0, 1, 1], 2);
        let splits = vec![
            EvalSplit::new("all", ds.clone()),
            EvalSplit::new("typical", ds.clone()),
            EvalSplit::new("atypical", ds.subset(&[])),
        ];
        let opts = EvalOptions {
            attack: AttackConfig::evaluation(0.05),
            pair_budget: 100,
            seed: 0,
        };
        let recs = evaluate_epoch(&m, &splits, &opts, 3).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs[0].cosine_distance.is_none());
        assert!(recs[2].clean_acc.is_none());
        for r in &recs[..2] {
            let (c, a) = (r.clean_acc.unwrap(), r.adv_acc.unwrap());
            assert!((0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&a));
        }
        assert_eq!(recs, evaluate_epoch(&m, &splits, &opts, 3).unwrap());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.0001), "0.0001");
        assert_eq!(format_sig6(0.00001234), "1.234e-05");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(9.9999996), "10");
    }

    #[test]
    fn csv_rows_are_sorted_and_blank_when_undefined() {
        let mut a = MetricsRecord::empty(1, "typical");
        a.clean_acc = Some(0.5);
        let b = MetricsRecord::empty(0, "atypical");
        let c = MetricsRecord::empty(1, "all");
        let mut buf = Vec::new();
        write_metrics_csv(&[a.clone(), b.clone(), c.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,atypical,,,,,,,");
        assert_eq!(lines[2], "1,all,,,,,,,");
        assert_eq!(lines[3], "1,typical,0.5,,,,,,");
        let back = read_metrics_csv(&text, "t").unwrap();
        assert_eq!(back, vec![b, c, a]);
    }
}
