//! Plain ERM training of an MLP on the small benchmark.

use bat_lab::bat::{train, BatConfig, Method};
use bat_lab::metrics::clean_accuracy;
use bat_lab::synthdata::{default_benchmark, BenchmarkProfile};

fn main() -> bat_lab::Result<()> {
    let bench = default_benchmark(BenchmarkProfile::Small, 1.0, 0)?;
    let cfg = BatConfig {
        epochs: 30,
        ..BatConfig::default()
    };
    let report = train(&bench.train, Method::Erm, &cfg)?;
    for e in report.epochs.iter().step_by(5) {
        println!("epoch {:>3}  loss {:.4}", e.epoch, e.ce_loss);
    }
    println!("train accuracy {:.3}", clean_accuracy(&report.model, &bench.train)?);
    println!("test accuracy  {:.3}", clean_accuracy(&report.model, &bench.test)?);
    Ok(())
}
