//! Subsampled memorization estimates on the small benchmark, summarized by
//! ground-truth sub-population kind. Uses fewer trials than the default to
//! finish quickly.

use bat_lab::bat::BatConfig;
use bat_lab::memorization::{fit_ensemble, partition_splits, EstimatorConfig, Thresholds};
use bat_lab::synthdata::{default_benchmark, BenchmarkProfile, SubPopKind};

fn main() -> bat_lab::Result<()> {
    let bench = default_benchmark(BenchmarkProfile::Small, 1.0, 0)?;
    let defaults = EstimatorConfig::default();
    let cfg = EstimatorConfig {
        trials: 16,
        min_trials_per_side: 3,
        trainer: BatConfig {
            epochs: 120,
            optimizer: bat_lab::bat::OptimizerConfig {
                decay_epochs: vec![110],
                ..defaults.trainer.optimizer.clone()
            },
            ..defaults.trainer.clone()
        },
        ..defaults
    };
    let ens = fit_ensemble(&bench.train, &cfg)?;
    let mem = ens.memorization(&bench.train, &cfg)?;
    for kind in [SubPopKind::Main, SubPopKind::AtypicalBenign, SubPopKind::AtypicalPoisoning] {
        let idx = bench.train.indices_of_kind(kind);
        let mean = idx.iter().map(|&i| mem.mem[i]).sum::<f64>() / idx.len() as f64;
        let high = idx.iter().filter(|&&i| mem.mem[i] > 0.15).count();
        println!("{:<18} n={:<4} mean mem {mean:.3}  above 0.15: {high}", kind.as_str(), idx.len());
    }

    let infl = ens.influence(&bench.test, &cfg)?;
    let pred = ens.predictability(&bench.test)?;
    let s = partition_splits(&mem, &infl, &pred, &Thresholds::default())?;
    println!(
        "splits: train typical {} atypical {}, test typical {} atypical {}, low confidence {}",
        s.train_typical.len(),
        s.train_atypical.len(),
        s.test_typical.len(),
        s.test_atypical.len(),
        s.low_confidence.len()
    );
    Ok(())
}
