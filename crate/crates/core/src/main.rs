use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedddpm::checks;
use fedddpm::harness::{self, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "fedddpm", version, about = "Federated diffusion training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its round log and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a sweep list and write a comparison table.
    Compare {
        /// File listing one config path per line.
        #[arg(long)]
        config: PathBuf,
        /// Single seed override applied to every config.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds; each config runs once per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the backward pass against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the analytic-denoiser checks.
    Oracle {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.or_else(|| cfg.output.dir.clone());
            let result = harness::run_experiment(&cfg, out.as_deref())?;
            print!("{}", result.summary_text());
            Ok(true)
        }
        Command::Compare {
            config,
            seed,
            seeds,
            out,
        } => {
            let cfgs = harness::load_sweep(&config)?;
            let seeds = match seed {
                Some(s) => vec![s],
                None => seeds,
            };
            let (table, results) = harness::compare(&cfgs, &seeds)?;
            print!("{}", table.to_csv());
            if let Some(dir) = out {
                harness::write_comparison_runs(&table, &results, &dir)?;
            }
            Ok(true)
        }
        Command::Gradcheck { trials, seed } => {
            let result = checks::gradient_check(trials, seed)?;
            println!("{}", result.line());
            Ok(result.passed)
        }
        Command::Oracle { seed } => {
            let results = checks::oracle_suite(seed)?;
            for r in &results {
                println!("{}", r.line());
            }
            Ok(results.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
