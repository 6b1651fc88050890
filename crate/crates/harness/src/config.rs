//! Experiment configuration: defaults, overrides and validation.

use std::fmt;
use std::path::PathBuf;

use clap::ValueEnum;
use pbrl_core::oracle::OracleSpec;
use pbrl_core::pbrl::{GradientMode, YParam};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Stackelberg,
    Incentive,
    Shaping,
    Preference,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::Stackelberg => "stackelberg",
            Experiment::Incentive => "incentive",
            Experiment::Shaping => "shaping",
            Experiment::Preference => "preference",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[value(name = "pbrl_value")]
    PbrlValue,
    #[value(name = "pbrl_bellman")]
    PbrlBellman,
    #[value(name = "pbrl_ni")]
    PbrlNi,
    #[value(name = "independent_pg")]
    IndependentPg,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Algorithm::PbrlValue => "pbrl_value",
            Algorithm::PbrlBellman => "pbrl_bellman",
            Algorithm::PbrlNi => "pbrl_ni",
            Algorithm::IndependentPg => "independent_pg",
        };
        f.write_str(s)
    }
}

/// Inner oracle family; step size and budget come from `inner_eta` and `inner_iters`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    SoftmaxPg,
    ProjectedPg,
    Pmd,
    Tight,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub alpha: f64,
    /// Total outer iterations `K` (split evenly over chunks for preference runs).
    pub outer_iters: usize,
    pub oracle: OracleKind,
    /// Inner oracle iterations `T`.
    pub inner_iters: usize,
    pub inner_eta: f64,
    pub traj_len: usize,
    pub batch: usize,
    pub gamma: f64,
    pub tau: f64,
    /// Number of states of the generated environment.
    pub env_size: usize,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub gradient: GradientMode,
    pub y_param: YParam,
    pub warm_start: bool,
    pub track_exact: bool,
    /// Preference runs: segment length.
    pub segment_len: usize,
    /// Preference runs: pairs collected under the initial policy.
    pub initial_pairs: usize,
    /// Preference runs: pairs added after each chunk.
    pub pairs_per_chunk: usize,
    /// Preference runs: most recent pairs kept.
    pub buffer: usize,
    /// Preference runs: number of collect-then-optimize rounds.
    pub chunks: usize,
    /// Output directory; not part of the config hash.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for an experiment.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            algorithm: Algorithm::PbrlValue,
            lambda: 2.0,
            alpha: 0.1,
            outer_iters: 1000,
            oracle: OracleKind::SoftmaxPg,
            inner_iters: 1,
            inner_eta: 0.1,
            traj_len: 5,
            batch: 16,
            gamma: 0.5,
            tau: 1.0,
            env_size: 20,
            seeds: (0..10).collect(),
            master_seed: 0,
            gradient: GradientMode::Exact,
            y_param: YParam::Simplex,
            warm_start: true,
            track_exact: false,
            segment_len: 3,
            initial_pairs: 500,
            pairs_per_chunk: 100,
            buffer: 500,
            chunks: 10,
            out: None,
        };
        match experiment {
            Experiment::Stackelberg => base,
            Experiment::Incentive => ExperimentConfig {
                algorithm: Algorithm::PbrlNi,
                lambda: 4.0,
                outer_iters: 500,
                batch: 24,
                env_size: 10,
                seeds: (0..5).collect(),
                ..base
            },
            Experiment::Shaping => ExperimentConfig {
                outer_iters: 200,
                gamma: 0.9,
                tau: 0.0,
                env_size: 6,
                seeds: (0..5).collect(),
                ..base
            },
            Experiment::Preference => ExperimentConfig {
                alpha: 0.01,
                env_size: 5,
                seeds: (0..5).collect(),
                ..base
            },
        }
    }

    /// Published hyperparameters for the Stackelberg and incentive experiments.
    ///
    /// Shaping and preference runs have no published settings and are left unchanged.
    pub fn apply_published_defaults(&mut self) {
        match (self.experiment, self.algorithm) {
            (Experiment::Stackelberg, Algorithm::PbrlBellman) => {
                self.lambda = 7.0;
                self.alpha = 0.1;
                self.inner_iters = 10;
                self.traj_len = 5;
                self.batch = 16;
            }
            (Experiment::Stackelberg, _) => {
                self.lambda = 2.0;
                self.alpha = 0.1;
                self.inner_iters = 1;
                self.traj_len = 5;
                self.batch = 16;
            }
            (Experiment::Incentive, _) => {
                self.lambda = 4.0;
                self.alpha = 0.1;
                self.traj_len = 5;
                self.batch = 24;
            }
            _ => {}
        }
    }

    pub fn oracle_spec(&self) -> OracleSpec {
        match self.oracle {
            OracleKind::SoftmaxPg => OracleSpec::SoftmaxPg { eta: self.inner_eta, iters: self.inner_iters },
            OracleKind::ProjectedPg => OracleSpec::ProjectedPg { eta: self.inner_eta, iters: self.inner_iters },
            OracleKind::Pmd => OracleSpec::Pmd { eta: self.inner_eta, iters: self.inner_iters, tol: 0.0 },
            OracleKind::Tight => OracleSpec::Tight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use Algorithm::*;
        use Experiment::*;
        let ok = matches!(
            (self.experiment, self.algorithm),
            (Stackelberg, PbrlValue | PbrlBellman | IndependentPg)
                | (Incentive, PbrlNi)
                | (Shaping | Preference, PbrlValue | PbrlBellman)
        );
        if !ok {
            return config_err(format!("algorithm {} is not available for the {} experiment", self.algorithm, self.experiment));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config_err(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return config_err(format!("alpha must be finite and nonnegative, got {}", self.alpha));
        }
        if !(self.inner_eta >= 0.0 && self.inner_eta.is_finite()) {
            return config_err("inner_eta must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.gamma) || !(self.tau >= 0.0 && self.tau.is_finite()) {
            return config_err("gamma must lie in [0, 1) and tau must be finite and nonnegative");
        }
        if self.traj_len == 0 || self.batch == 0 {
            return config_err("traj_len and batch must be at least 1");
        }
        let min_size = if self.experiment == Shaping { 2 } else { 1 };
        if self.env_size < min_size {
            return config_err(format!("env_size must be at least {min_size}"));
        }
        if self.seeds.is_empty() {
            return config_err("at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return config_err("seeds must be distinct");
        }
        if self.algorithm == PbrlBellman && self.tau <= 0.0 {
            return config_err("the Bellman penalty requires tau > 0");
        }
        if self.algorithm == PbrlNi && self.tau <= 0.0 {
            return config_err("the Nikaido-Isoda gradient requires tau > 0");
        }
        if self.algorithm == PbrlBellman && self.gradient == GradientMode::MonteCarlo {
            return config_err("sampled gradients are available for the value penalty only");
        }
        if self.oracle == OracleKind::Pmd && self.tau <= 0.0 {
            return config_err("the PMD oracle requires tau > 0");
        }
        if self.experiment == Preference {
            if self.chunks == 0 || self.outer_iters % self.chunks != 0 {
                return config_err("outer_iters must be a multiple of chunks");
            }
            if self.segment_len == 0 || self.initial_pairs == 0 || self.buffer == 0 {
                return config_err("segment_len, initial_pairs and buffer must be positive");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (the output directory excluded).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn apply(&mut self, patch: &ConfigPatch) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &patch.$f { self.$f = v.clone(); } )* };
        }
        set!(
            algorithm, lambda, alpha, outer_iters, oracle, inner_iters, inner_eta, traj_len, batch, gamma, tau, env_size,
            seeds, master_seed, gradient, y_param, warm_start, track_exact, segment_len, initial_pairs, pairs_per_chunk,
            buffer, chunks
        );
        if let Some(out) = &patch.out {
            self.out = Some(out.clone());
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Partial overrides, from flags or a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub algorithm: Option<Algorithm>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub outer_iters: Option<usize>,
    pub oracle: Option<OracleKind>,
    pub inner_iters: Option<usize>,
    pub inner_eta: Option<f64>,
    pub traj_len: Option<usize>,
    pub batch: Option<usize>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub env_size: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub master_seed: Option<u64>,
    pub gradient: Option<GradientMode>,
    pub y_param: Option<YParam>,
    pub warm_start: Option<bool>,
    pub track_exact: Option<bool>,
    pub segment_len: Option<usize>,
    pub initial_pairs: Option<usize>,
    pub pairs_per_chunk: Option<usize>,
    pub buffer: Option<usize>,
    pub chunks: Option<usize>,
    pub out: Option<PathBuf>,
    pub published_defaults: Option<bool>,
}

impl ConfigPatch {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).or_else(|e| config_err(format!("invalid config file: {e}")))
    }
}

/// Defaults, then the published settings if requested, then flags, then the config file.
pub fn resolve(experiment: Experiment, flags: &ConfigPatch, file: Option<&ConfigPatch>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::defaults(experiment);
    let algorithm = file.and_then(|f| f.algorithm).or(flags.algorithm);
    if let Some(a) = algorithm {
        cfg.algorithm = a;
    }
    let published = file.and_then(|f| f.published_defaults).or(flags.published_defaults).unwrap_or(false);
    if published {
        cfg.apply_published_defaults();
    }
    cfg.apply(flags);
    if let Some(f) = file {
        cfg.apply(f);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG stream for one seed, independent of scheduling order.
pub fn derive_seed(master: u64, seed: u64) -> u64 {
    mix(master ^ mix(seed))
}
