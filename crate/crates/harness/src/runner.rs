//! Batch execution over seeds and the on-disk layout of a run directory.
//!
//! ```text
//! <out>/config.toml              resolved configuration
//! <out>/summary.json             cross-seed summary
//! <out>/traces/seed_<s>.trace    one trace per seed
//! <out>/plot_<metric>.csv        plot data for `metric` and `follower_gap`
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiments::{run_seed, RunOutcome, RunStatus};
use crate::persist::{save_trace, TraceMeta};
use crate::plot::emit_plot_data;
use crate::summary::{save_summary, summarize_outcomes, Summary, CURVE_METRICS};
use crate::num::Num;

/// Environment variable bounding the worker pool.
pub const THREADS_VAR: &str = "PBRL_THREADS";

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub outcomes: Vec<RunOutcome>,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn any_diverged(&self) -> bool {
        self.outcomes.iter().any(|o| matches!(o.status, RunStatus::Diverged { .. }))
    }
}

/// Worker count from `PBRL_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Validates, then runs every seed on a bounded pool; results come back in seed-list order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<RunOutcome> = pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect());
    let summary = summarize_outcomes(cfg, &outcomes);
    Ok(ExperimentResult { config: cfg.clone(), config_hash: cfg.hash(), outcomes, summary })
}

pub fn trace_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("traces").join(format!("seed_{seed}.trace"))
}

/// Writes all artifacts of `result` under `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("traces"))?;
    fs::write(dir.join("config.toml"), result.config.to_toml())?;
    for o in &result.outcomes {
        if let Some(t) = &o.trace {
            let meta = TraceMeta { config_hash: result.config_hash.clone(), status: o.status.clone(), baseline: o.baseline.map(Num) };
            save_trace(&trace_path(dir, o.seed), t, &meta)?;
        }
    }
    save_summary(&dir.join("summary.json"), &result.summary)?;
    let done: Vec<_> = result
        .outcomes
        .iter()
        .filter(|o| o.status == RunStatus::Completed)
        .filter_map(|o| o.trace.clone())
        .collect();
    if !done.is_empty() {
        for m in CURVE_METRICS {
            emit_plot_data(&done, m, &dir.join(format!("plot_{m}.csv")))?;
        }
    }
    Ok(())
}
