//! Generates the small benchmark and prints how each split is composed.

use std::collections::BTreeMap;

use bat_lab::synthdata::{default_benchmark, save_dataset, BenchmarkProfile};

fn main() -> bat_lab::Result<()> {
    let bench = default_benchmark(BenchmarkProfile::Small, 1.0, 0)?;
    println!("{} blobs in {} dimensions", bench.specs.len(), bench.dim);
    for (name, ds) in [("train", &bench.train), ("test", &bench.test)] {
        let mut counts = BTreeMap::new();
        for k in &ds.kind {
            *counts.entry(k.as_str()).or_insert(0usize) += 1;
        }
        println!("{name}: {} samples, {counts:?}", ds.len());
    }

    let lean = default_benchmark(BenchmarkProfile::Small, 0.2, 0)?;
    println!("with 20% poisoning kept: {} train samples, identical test set: {}", lean.train.len(), lean.test == bench.test);

    let dir = std::env::temp_dir().join("bat-lab-example");
    std::fs::create_dir_all(&dir).map_err(|e| bat_lab::Error::Config(e.to_string()))?;
    save_dataset(&bench.train, &dir.join("train.csv"))?;
    println!("wrote {}", dir.join("train.csv").display());
    Ok(())
}
