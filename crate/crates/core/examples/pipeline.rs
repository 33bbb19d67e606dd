//! The command-line stages driven from code, ending with the comparison table.

use bat_lab::config::{RawConfig, RunConfig};
use bat_lab::pipeline;

fn main() -> bat_lab::Result<()> {
    let out = std::env::temp_dir().join("bat-lab-pipeline-example");
    let text = format!(
        "seed = 7\nout_dir = {}\nepochs = 20\ntrials = 12\nmin_trials_per_side = 3\nmem_epochs = 80\nmem_decay_epochs = 70\ninclude_positive_in_denominator = true\n",
        out.display()
    );
    let base = RawConfig::parse(&text, "example")?;
    let with = |method: &str| -> bat_lab::Result<RunConfig> {
        let mut raw = base.clone();
        raw.set("method", method)?;
        RunConfig::from_raw(raw)
    };

    pipeline::gen_data(&with("erm")?)?;
    pipeline::estimate_mem(&with("erm")?)?;
    let mut dirs = Vec::new();
    for method in ["erm", "pgd-at", "bat"] {
        let cfg = with(method)?;
        pipeline::train(&cfg)?;
        pipeline::eval(&cfg, None)?;
        dirs.push(pipeline::Paths::resolve(&cfg).run_dir(&pipeline::run_name(&cfg)));
    }
    print!("{}", pipeline::format_report(&pipeline::report(&dirs)?));
    Ok(())
}
