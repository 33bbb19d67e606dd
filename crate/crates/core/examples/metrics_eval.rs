//! Per-epoch evaluation records written as the metrics CSV.

use bat_lab::attack::AttackConfig;
use bat_lab::bat::{train_with_hook, BatConfig, EpochHook, Method};
use bat_lab::metrics::{evaluate_epoch, write_metrics_csv, EvalOptions, EvalSplit};
use bat_lab::synthdata::{default_benchmark, BenchmarkProfile, SubPopKind};

fn main() -> bat_lab::Result<()> {
    let bench = default_benchmark(BenchmarkProfile::Small, 1.0, 0)?;
    let main_idx = bench.test.indices_of_kind(SubPopKind::Main);
    let other: Vec<usize> = (0..bench.test.len()).filter(|i| !main_idx.contains(i)).collect();
    let splits = vec![
        EvalSplit::new("all", bench.test.clone()),
        EvalSplit::new("atypical", bench.test.subset(&other)),
        EvalSplit::new("typical", bench.test.subset(&main_idx)),
    ];
    let opts = EvalOptions {
        attack: AttackConfig::evaluation(0.05),
        pair_budget: 10_000,
        seed: 0,
    };
    let cfg = BatConfig {
        epochs: 10,
        ..BatConfig::default()
    };
    let mut hook = |epoch, model: &_, summary: &bat_lab::bat::EpochSummary| {
        let mut recs = if epoch % 3 == 0 { evaluate_epoch(model, &splits, &opts, epoch)? } else { Vec::new() };
        recs.push(summary.to_record("train"));
        Ok(recs)
    };
    let report = train_with_hook(&bench.train, Method::PgdAt, &cfg, Some(&mut hook as &mut EpochHook))?;
    write_metrics_csv(&report.records, std::io::stdout().lock()).map_err(|e| bat_lab::Error::Config(e.to_string()))?;
    Ok(())
}
