use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bat_lab::config::RunConfig;
use bat_lab::pipeline::{self, exit_code};
use bat_lab::Error;

#[derive(Parser)]
#[command(name = "bat-lab", version, about = "Adversarial training lab on a synthetic long-tail benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test CSVs and their spec sidecar.
    GenData(Common),
    /// Estimate memorization, influence, and the typical/atypical splits.
    EstimateMem(Common),
    /// Train a model with ERM, PGD-AT, or BAT.
    Train(Common),
    /// Evaluate a checkpoint on the test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: the configured run's model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare finished runs in one table.
    Report {
        /// Run directories (each holding manifest.json and a metrics CSV).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    poisoning_fraction: Option<String>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Worker threads for estimate-mem.
    #[arg(long)]
    jobs: Option<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut overrides = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("seed", &self.seed),
            ("method", &self.method),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("epochs", &self.epochs),
            ("poisoning_fraction", &self.poisoning_fraction),
            ("profile", &self.profile),
            ("out_dir", &self.out_dir),
            ("jobs", &self.jobs),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                overrides.push((k.to_string(), v.clone()));
            }
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(c) => pipeline::gen_data(&c.load()?).map(drop),
        Command::EstimateMem(c) => pipeline::estimate_mem(&c.load()?).map(drop),
        Command::Train(c) => pipeline::train(&c.load()?).map(drop),
        Command::Eval { common, checkpoint } => pipeline::eval(&common.load()?, checkpoint.as_deref()).map(drop),
        Command::Report { runs } => {
            let rows = pipeline::report(&runs)?;
            print!("{}", pipeline::format_report(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
