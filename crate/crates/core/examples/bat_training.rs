//! PGD-AT next to BAT on the poisoned small benchmark.
//!
//! Memorization values here are the ground-truth kinds (1 for atypical, 0
//! for main) so the example skips the estimator; the CLI uses estimates.

use bat_lab::attack::AttackConfig;
use bat_lab::bat::{train, BatConfig, Method};
use bat_lab::metrics::{adv_accuracy, classwise_cosine_distance, clean_accuracy};
use bat_lab::synthdata::{default_benchmark, BenchmarkProfile, SubPopKind};

fn main() -> bat_lab::Result<()> {
    let bench = default_benchmark(BenchmarkProfile::Small, 1.0, 0)?;
    let mem = bench.train.kind.iter().map(|&k| if k == SubPopKind::Main { 0.0 } else { 1.0 }).collect();
    let train_set = bench.train.clone().with_mem(mem)?;
    let main_test = bench.test.subset(&bench.test.indices_of_kind(SubPopKind::Main));
    let eval = AttackConfig::evaluation(0.05);

    let base = BatConfig {
        epochs: 40,
        include_positive_in_denominator: true,
        ..BatConfig::default()
    };
    for (name, method, cfg) in [
        ("PGD-AT", Method::PgdAt, base.clone()),
        ("BAT a=1 b=0.2", Method::Bat, base.clone()),
        ("BAT a=2 b=0.2", Method::Bat, BatConfig { alpha: 2.0, ..base.clone() }),
    ] {
        let r = train(&train_set, method, &cfg)?;
        let last = r.epochs.last().expect("at least one epoch");
        println!(
            "{name:<14} main-blob test: clean {:.3} adv {:.3} cosine distance {:.3} | mean weight {:.3}",
            clean_accuracy(&r.model, &main_test)?,
            adv_accuracy(&r.model, &main_test, &eval, 0)?,
            classwise_cosine_distance(&r.model, &main_test, 10_000, 0)?.distance,
            last.mean_weight
        );
    }
    Ok(())
}
