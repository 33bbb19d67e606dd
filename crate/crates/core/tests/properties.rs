use proptest::prelude::*;

use bat_lab::attack::{pgd, AttackConfig};
use bat_lab::bat::{bat_weight, poisoning_score};
use bat_lab::config::{RawConfig, RunConfig};
use bat_lab::memorization::{memorization_from_trials, partition_splits, predictability, InfluenceTable, Thresholds};
use bat_lab::metrics::{adv_accuracy, classwise_cosine_distance, clean_accuracy};
use bat_lab::model::MlpModel;
use bat_lab::synthdata::{LabeledDataset, Split, SubPopKind};
use bat_lab::tensor::{softmax_rows, Tensor};

fn dataset(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> LabeledDataset {
    let n = labels.len();
    LabeledDataset {
        dim,
        num_classes: classes,
        features,
        labels,
        subpop_id: vec![0; n],
        kind: vec![SubPopKind::Main; n],
        mem: None,
        split: Split::Test,
    }
}

fn labelled(dim: usize, classes: usize) -> impl Strategy<Value = LabeledDataset> {
    (2usize..12).prop_flat_map(move |n| {
        (
            prop::collection::vec(0.0f64..1.0, n * dim),
            prop::collection::vec(0..classes, n),
        )
            .prop_map(move |(f, l)| dataset(dim, classes, f, l))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgd_stays_in_box_and_bounds(
        seed in any::<u64>(),
        eps in 0.0f64..0.5,
        steps in 0usize..8,
        frac in 0.01f64..1.5,
        random_init in any::<bool>(),
        x in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let model = MlpModel::init(3, &[5], 3, seed).unwrap();
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: frac * eps.max(1e-3),
            steps,
            random_init,
            clamp_min: 0.0,
            clamp_max: 1.0,
        };
        let xt = Tensor::matrix(2, 3, x.clone()).unwrap();
        let adv = pgd(&model, &xt, &[0, 2], &cfg, seed).unwrap();
        for (a, b) in adv.data().iter().zip(&x) {
            prop_assert!((a - b).abs() <= eps + 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn zero_radius_adv_accuracy_is_clean_accuracy(seed in any::<u64>(), ds in labelled(4, 3)) {
        let model = MlpModel::init(4, &[6], 3, seed).unwrap();
        let clean = clean_accuracy(&model, &ds).unwrap();
        prop_assert_eq!(adv_accuracy(&model, &ds, &AttackConfig::evaluation(0.0), seed).unwrap(), clean);
        prop_assert!((0.0..=1.0).contains(&clean));
    }

    #[test]
    fn relu_cosine_distance_in_unit_interval(seed in any::<u64>(), ds in labelled(4, 3)) {
        let model = MlpModel::init(4, &[8], 3, seed).unwrap();
        if let Ok(c) = classwise_cosine_distance(&model, &ds, 500, seed) {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c.distance));
            prop_assert!((c.distance + c.mean_similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(z in prop::collection::vec(-50.0f64..50.0, 12)) {
        let p = softmax_rows(&z, 4);
        for row in p.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn weights_lie_in_unit_interval_and_spare_typical(
        z in prop::collection::vec(-5.0f64..5.0, 4),
        y in 0usize..4,
        mem in -1.0f64..1.0,
        alpha in 0.0f64..10.0,
        sigma in 0.0f64..1.0,
    ) {
        let p = softmax_rows(&z, 4);
        let q = poisoning_score(&p, y).unwrap();
        prop_assert!((0.0..=1.0).contains(&q));
        let pred = (0..4).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        let w = bat_weight(q, mem, pred, y, alpha, sigma);
        prop_assert!(w > 0.0 && w <= 1.0);
        if mem <= sigma {
            prop_assert_eq!(w, 1.0);
        }
    }

    #[test]
    fn mean_weight_non_increasing_in_alpha(
        qs in prop::collection::vec(0.0f64..1.0, 1..10),
        mems in prop::collection::vec(0.0f64..1.0, 10),
        a in 0.0f64..5.0,
        extra in 0.0f64..5.0,
    ) {
        let mean = |alpha: f64| -> f64 {
            qs.iter().zip(&mems).map(|(&q, &m)| bat_weight(q, m, 1, 0, alpha, 0.15)).sum::<f64>() / qs.len() as f64
        };
        prop_assert!(mean(a + extra) <= mean(a) + 1e-15);
    }

    #[test]
    fn memorization_range_and_counts(
        masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 7), 2..12),
        correct_seed in prop::collection::vec(prop::collection::vec(any::<bool>(), 7), 12),
        min in 0usize..4,
    ) {
        let t = masks.len();
        let correct = &correct_seed[..t];
        let est = memorization_from_trials(&masks, correct, min).unwrap();
        for i in 0..7 {
            prop_assert_eq!(est.included_trials[i] + est.excluded_trials[i], t);
            prop_assert!((-1.0..=1.0).contains(&est.mem[i]));
            if est.low_confidence[i] {
                prop_assert_eq!(est.mem[i], 0.0);
            }
        }
        let pred = predictability(correct, 7);
        prop_assert!(pred.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn training_splits_are_disjoint(
        mem in prop::collection::vec(-1.0f64..1.0, 1..30),
        pred in prop::collection::vec(0.0f64..1.0, 5),
    ) {
        let est = memorization_from_trials(&[vec![true; mem.len()], vec![false; mem.len()]], &[vec![true; mem.len()], vec![true; mem.len()]], 1).unwrap();
        let est = bat_lab::memorization::MemEstimate { mem: mem.clone(), ..est };
        let s = partition_splits(&est, &InfluenceTable::default(), &pred, &Thresholds::default()).unwrap();
        prop_assert!(s.train_typical.iter().all(|i| !s.train_atypical.contains(i)));
        prop_assert!(s.train_atypical.iter().all(|&i| mem[i] > 0.15));
        prop_assert!(s.train_typical.iter().all(|&i| mem[i] < 0.02));
    }

    #[test]
    fn config_overrides_win_and_round_trip(
        alpha in 0.0f64..4.0,
        beta in 0.0f64..1.0,
        file_alpha in 0.0f64..4.0,
        epochs in 1usize..500,
    ) {
        let mut raw = RawConfig::parse(&format!("seed = 9\nalpha = {file_alpha}\n"), "prop").unwrap();
        raw.set("alpha", &alpha.to_string()).unwrap();
        raw.set("beta", &beta.to_string()).unwrap();
        raw.set("epochs", &epochs.to_string()).unwrap();
        let cfg = RunConfig::from_raw(raw).unwrap();
        prop_assert_eq!(cfg.training.alpha, alpha);
        let back = RunConfig::from_raw(RawConfig::parse(&cfg.to_text(), "echo").unwrap()).unwrap();
        prop_assert_eq!(back.effective(), cfg.effective());
    }
}
