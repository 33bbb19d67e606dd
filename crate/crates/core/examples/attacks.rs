//! FGSM and PGD against an ERM model and a PGD-trained one.

use bat_lab::attack::{fgsm, pgd, AttackConfig};
use bat_lab::bat::{train, BatConfig, Method};
use bat_lab::metrics::{adv_accuracy, clean_accuracy};
use bat_lab::synthdata::{default_benchmark, BenchmarkProfile};

fn main() -> bat_lab::Result<()> {
    let bench = default_benchmark(BenchmarkProfile::Small, 1.0, 0)?;
    let cfg = BatConfig {
        epochs: 30,
        ..BatConfig::default()
    };
    let eval = AttackConfig::evaluation(0.05);

    for method in [Method::Erm, Method::PgdAt] {
        let model = train(&bench.train, method, &cfg)?.model;
        println!(
            "{method:>6}: clean {:.3}  PGD-20 {:.3}",
            clean_accuracy(&model, &bench.test)?,
            adv_accuracy(&model, &bench.test, &eval, 1)?
        );
    }

    let model = train(&bench.train, Method::Erm, &cfg)?.model;
    let (x, y) = bench.test.batch(&[0, 1, 2])?;
    let one = fgsm(&model, &x, &y, &AttackConfig::evaluation(0.05))?;
    let many = pgd(&model, &x, &y, &eval, 1)?;
    let linf = |a: &[f64]| a.iter().zip(x.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    println!("l-inf size of the perturbation: FGSM {:.4}, PGD {:.4}", linf(one.data()), linf(many.data()));
    Ok(())
}
