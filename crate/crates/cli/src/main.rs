use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unmix::config::{parse_config_with, ExperimentConfig};
use unmix::experiment::{evaluate_dir, generate, run_experiment, REPORT_FILE};
use unmix::models::ModelVariant;
use unmix::Error;

/// Blind source separation with GP-prior variational models.
#[derive(Debug, Parser)]
#[command(name = "unmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write sources and observations only.
    Generate(Common),
    /// Train and evaluate a single model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Model to train.
        #[arg(long, default_value = "half-gp-avae")]
        variant: ModelVariant,
    },
    /// Recompute reports from the checkpoints in an output directory.
    Evaluate {
        /// Output directory of a previous run (one seed).
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: data, every configured model, reports.
    Reproduce(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set training.lambda=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed (overrides `seeds`).
    #[arg(long)]
    seed: Option<u64>,
    /// Train the models of a seed concurrently.
    #[arg(long)]
    parallel: bool,
}

impl Common {
    fn load(&self) -> unmix::Result<ExperimentConfig> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?,
            None => String::new(),
        };
        let mut cfg = parse_config_with(&text, &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        cfg.resolve()
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Usage(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::Io { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> unmix::Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.load()?;
            for dir in generate(&cfg)? {
                println!("{}", dir.display());
            }
        }
        Command::Train { common, variant } => {
            let mut cfg = common.load()?;
            cfg.models = vec![variant];
            let cfg = cfg.resolve()?;
            print_outcomes(&run_experiment(&cfg, common.parallel)?);
        }
        Command::Evaluate { out } => {
            for r in evaluate_dir(&out)? {
                println!("{}\t{:.4}", r.variant, r.average);
            }
            println!("{}", out.join(REPORT_FILE).display());
        }
        Command::Reproduce(common) => {
            let cfg = common.load()?;
            print_outcomes(&run_experiment(&cfg, common.parallel)?);
        }
    }
    Ok(())
}

fn print_outcomes(outcomes: &[unmix::experiment::SeedOutcome]) {
    for o in outcomes {
        for r in &o.reports {
            println!("seed {}\t{}\t{:.4}", o.seed, r.variant, r.average);
        }
        println!("{}", o.dir.join(REPORT_FILE).display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNMIX_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
