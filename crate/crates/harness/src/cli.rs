//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{resolve, Algorithm, ConfigPatch, Experiment, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::runner::{run_experiment, write_outputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
/// Failures that are neither configuration errors nor divergence (I/O, oracle failures).
pub const EXIT_FAILURE: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "pbrl", about = "Penalty-based bilevel RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Random Stackelberg Markov games.
    Stackelberg(Flags),
    /// Incentive design over a zero-sum lower level.
    Incentive(Flags),
    /// Reward shaping on a sparse chain.
    Shaping(Flags),
    /// Tabular preference-based reward learning.
    Preference(Flags),
}

#[derive(Args, Debug)]
struct Flags {
    #[arg(long, value_enum)]
    algo: Option<Algorithm>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    outer_iters: Option<usize>,
    #[arg(long)]
    inner_iters: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    env_size: Option<usize>,
    /// Published hyperparameters for the Stackelberg and incentive experiments.
    #[arg(long = "paper-defaults")]
    published_defaults: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file whose keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Flags {
    fn patch(&self) -> ConfigPatch {
        ConfigPatch {
            algorithm: self.algo,
            lambda: self.lambda,
            alpha: self.alpha,
            outer_iters: self.outer_iters,
            inner_iters: self.inner_iters,
            seeds: self.seeds.clone(),
            env_size: self.env_size,
            out: self.out.clone(),
            published_defaults: self.published_defaults.then_some(true),
            ..ConfigPatch::default()
        }
    }
}

fn split(cmd: &Command) -> (Experiment, &Flags) {
    match cmd {
        Command::Stackelberg(f) => (Experiment::Stackelberg, f),
        Command::Incentive(f) => (Experiment::Incentive, f),
        Command::Shaping(f) => (Experiment::Shaping, f),
        Command::Preference(f) => (Experiment::Preference, f),
    }
}

/// Resolves the configuration a command line describes.
pub fn config_from_args<I, T>(args: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| HarnessError::Config(e.to_string()))?;
    let (experiment, flags) = split(&cli.command);
    let file = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
            Some(ConfigPatch::from_toml(&text)?)
        }
        None => None,
    };
    let mut cfg = resolve(experiment, &flags.patch(), file.as_ref())?;
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from("runs").join(experiment.to_string()));
    }
    Ok(cfg)
}

fn exit_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Config(_) | HarnessError::Validation(_) => EXIT_CONFIG,
        HarnessError::Core(pbrl_core::PbrlError::Config(_) | pbrl_core::PbrlError::Validation(_)) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Runs the CLI and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if args.iter().skip(1).any(|a| a == "--help" || a == "-h" || a == "help") {
        let _ = Cli::try_parse_from(&args).map_err(|e| e.print());
        return EXIT_OK;
    }
    let cfg = match config_from_args(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return exit_code(&e);
        }
    };
    let result = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return exit_code(&e);
        }
    };
    let out = cfg.out.clone().unwrap_or_default();
    if let Err(e) = write_outputs(&result, &out) {
        eprintln!("{e}");
        return exit_code(&e);
    }
    let s = &result.summary;
    println!("{} / {} (config {})", s.experiment, s.algorithm, &s.config_hash[..12]);
    for p in &s.per_seed {
        println!("  seed {:>4}: {:?} {} {:.6} gap {:.3e}", p.seed, p.status, s.metric_name, p.final_metric.0, p.final_follower_gap.0);
    }
    println!(
        "  final {}: {:.6} +- {:.6}; follower gap {:.3e}",
        s.metric_name, s.final_metric.mean.0, s.final_metric.std.0, s.final_follower_gap.mean.0
    );
    println!("  wrote {}", out.display());
    let failed = !s.failed.is_empty();
    if result.any_diverged() {
        EXIT_DIVERGED
    } else if failed {
        EXIT_FAILURE
    } else {
        EXIT_OK
    }
}
