//! Cross-seed summary written next to the traces.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{format_err, Result};
use crate::experiments::{RunOutcome, RunStatus};
use crate::num::{nums, Num};
use crate::plot::{mean_std, plot_data};

pub const SUMMARY_FORMAT: &str = "pbrl-summary v1";

/// Metrics summarized per iteration.
pub const CURVE_METRICS: [&str; 2] = ["metric", "follower_gap"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Num,
    pub std: Num,
}

impl Stat {
    fn of(v: &[f64]) -> Stat {
        if v.is_empty() {
            return Stat { mean: Num(f64::NAN), std: Num(f64::NAN) };
        }
        let (m, s) = mean_std(v);
        Stat { mean: Num(m), std: Num(s) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub status: RunStatus,
    pub final_metric: Num,
    pub final_follower_gap: Num,
    pub final_f: Num,
    pub env_steps: u64,
    pub baseline: Option<Num>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub metric: String,
    pub env_steps: Vec<u64>,
    pub mean: Vec<Num>,
    pub std: Vec<Num>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub config_hash: String,
    pub experiment: String,
    pub algorithm: String,
    pub metric_name: String,
    pub per_seed: Vec<SeedSummary>,
    /// Over completed runs only.
    pub final_metric: Stat,
    pub final_follower_gap: Stat,
    pub diverged: Vec<u64>,
    pub failed: Vec<u64>,
    pub curves: Vec<Curve>,
}

pub fn summarize_outcomes(cfg: &ExperimentConfig, outcomes: &[RunOutcome]) -> Summary {
    let nan = Num(f64::NAN);
    let per_seed = outcomes
        .iter()
        .map(|o| {
            let (m, g, f, e) = match &o.trace {
                Some(t) => {
                    let p = &t.final_point;
                    (Num(p.metric), Num(p.follower_gap), Num(p.f), p.env_steps)
                }
                None => (nan, nan, nan, 0),
            };
            SeedSummary {
                seed: o.seed,
                status: o.status.clone(),
                final_metric: m,
                final_follower_gap: g,
                final_f: f,
                env_steps: e,
                baseline: o.baseline.map(Num),
            }
        })
        .collect();
    let done: Vec<_> =
        outcomes.iter().filter(|o| o.status == RunStatus::Completed).filter_map(|o| o.trace.clone()).collect();
    let finals = |g: fn(&pbrl_core::pbrl::EvalPoint) -> f64| done.iter().map(|t| g(&t.final_point)).collect::<Vec<_>>();
    let curves = CURVE_METRICS
        .iter()
        .filter_map(|m| {
            let d = plot_data(&done, m).ok()?;
            Some(Curve { metric: m.to_string(), env_steps: d.env_steps, mean: nums(&d.mean), std: nums(&d.std) })
        })
        .collect();
    let seeds_with = |want: fn(&RunStatus) -> bool| outcomes.iter().filter(|o| want(&o.status)).map(|o| o.seed).collect();
    Summary {
        format: SUMMARY_FORMAT.to_string(),
        config_hash: cfg.hash(),
        experiment: cfg.experiment.to_string(),
        algorithm: cfg.algorithm.to_string(),
        metric_name: outcomes
            .iter()
            .find_map(|o| o.trace.as_ref().map(|t| t.metric_name.clone()))
            .unwrap_or_default(),
        per_seed,
        final_metric: Stat::of(&finals(|p| p.metric)),
        final_follower_gap: Stat::of(&finals(|p| p.follower_gap)),
        diverged: seeds_with(|s| matches!(s, RunStatus::Diverged { .. })),
        failed: seeds_with(|s| matches!(s, RunStatus::Failed { .. })),
        curves,
    }
}

pub fn save_summary(path: &Path, s: &Summary) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(s)?)?;
    Ok(())
}

pub fn load_summary(path: &Path) -> Result<Summary> {
    let s: Summary = serde_json::from_str(&fs::read_to_string(path)?)?;
    if s.format != SUMMARY_FORMAT {
        return format_err(format!("unsupported summary format {:?}", s.format));
    }
    Ok(s)
}
