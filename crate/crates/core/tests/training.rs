use bat_lab::bat::{batch_objective, sgd_update, train, BatConfig, Method, OptimizerConfig, SgdState};
use bat_lab::memorization::{estimate_memorization, EstimatorConfig};
use bat_lab::model::MlpModel;
use bat_lab::synthdata::{default_benchmark, BenchmarkProfile, LabeledDataset};
use bat_lab::Error;

fn small_data() -> LabeledDataset {
    let b = default_benchmark(BenchmarkProfile::Small, 1.0, 21).unwrap();
    let idx: Vec<usize> = (0..b.train.len()).step_by(9).collect();
    b.train.subset(&idx)
}

fn quick() -> BatConfig {
    BatConfig {
        hidden_dims: vec![12, 6],
        epochs: 3,
        batch_size: 16,
        seed: 5,
        ..BatConfig::default()
    }
}

#[test]
fn erm_never_attacks() {
    let d = small_data();
    let r = train(&d, Method::Erm, &quick()).unwrap();
    assert_eq!(r.attack_calls, 0);
    let r = train(&d, Method::PgdAt, &quick()).unwrap();
    assert_eq!(r.attack_calls, 3 * d.len().div_ceil(16));
}

#[test]
fn same_seed_same_report() {
    let d = small_data();
    let mem: Vec<f64> = (0..d.len()).map(|i| (i % 5) as f64 / 4.0).collect();
    let d = d.with_mem(mem).unwrap();
    let a = train(&d, Method::Bat, &quick()).unwrap();
    let b = train(&d, Method::Bat, &quick()).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.model, b.model);
    assert!(a.epochs.iter().all(|e| e.dl_loss.is_some() && e.mean_weight <= 1.0));
}

#[test]
fn bat_without_mem_is_a_config_error() {
    match train(&small_data(), Method::Bat, &quick()) {
        Err(Error::Config(m)) => assert!(m.contains("run estimate-mem first"), "{m}"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn small_step_does_not_increase_batch_objective() {
    let d = small_data();
    let mem: Vec<f64> = (0..d.len()).map(|i| if i % 4 == 0 { 0.6 } else { 0.0 }).collect();
    let d = d.with_mem(mem).unwrap();
    let idx: Vec<usize> = (0..24).collect();
    let (x, y) = d.batch(&idx).unwrap();
    let cfg = BatConfig {
        optimizer: OptimizerConfig {
            learning_rate: 1e-4,
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        },
        ..quick()
    };
    let mut model = MlpModel::init(d.dim, &cfg.hidden_dims, d.num_classes, 3).unwrap();
    let before = batch_objective(&model, x.clone(), &y, &idx, d.mem.as_ref(), Method::Bat, &cfg).unwrap();
    let mut st = SgdState::new(&model);
    sgd_update(&mut model, &before.grads, &mut st, &cfg.optimizer, 0).unwrap();
    let after = batch_objective(&model, x, &y, &idx, d.mem.as_ref(), Method::Bat, &cfg).unwrap();
    assert!(after.total <= before.total, "{} -> {}", before.total, after.total);
}

#[test]
fn parallel_estimate_matches_serial() {
    let d = small_data();
    let serial = EstimatorConfig {
        trials: 6,
        min_trials_per_side: 1,
        base_seed: 8,
        trainer: BatConfig {
            epochs: 4,
            hidden_dims: vec![8],
            ..EstimatorConfig::default().trainer
        },
        ..EstimatorConfig::default()
    };
    let parallel = EstimatorConfig { jobs: 3, ..serial.clone() };
    let a = estimate_memorization(&d, &serial).unwrap();
    let b = estimate_memorization(&d, &parallel).unwrap();
    assert_eq!(a, b);
    assert!(a.included_trials.iter().zip(&a.excluded_trials).all(|(i, e)| i + e == 6));
}
