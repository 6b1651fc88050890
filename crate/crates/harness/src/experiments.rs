//! One seed of one experiment.

use std::sync::Arc;

use nalgebra::DMatrix;
use pbrl_core::applications::{
    collect_and_label_segments, incentive_problem, preference_upper_objective, reward_shaping_objective, SegmentConfig,
};
use pbrl_core::envgen::{gen_incentive, gen_random_mdp, gen_sparse_chain, gen_sparse_chain_mdp, gen_stackelberg, EnvRecipe};
use pbrl_core::mdp::{OffsetMap, ParamMap, ParamMdp};
use pbrl_core::oracle::{brute_force_optimal, OracleSpec};
use pbrl_core::pbrl::{
    independent_pg_run, initial_state, merge_traces, pbrl_run, pbrl_run_from, pbrl_zs_run, BilevelProblem, PbrlConfig,
    RunTrace, XSet,
};
use pbrl_core::penalty::PenaltyKind;
use pbrl_core::policy::Policy;
use pbrl_core::zerosum::{GameUpperObjective, JointPolicy, ZeroSumBilevelProblem};
use pbrl_core::{PbrlError, Result};
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, Algorithm, Experiment, ExperimentConfig};

/// Preference runs act on a 5-state, 3-action tabular MDP by default; only the state count is configurable.
pub const PREFERENCE_ACTIONS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { iteration: usize },
    Failed { message: String },
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub status: RunStatus,
    /// Present for completed runs and, truncated, for diverged ones.
    pub trace: Option<RunTrace>,
    /// Incentive start line or shaping optimum.
    pub baseline: Option<f64>,
}

/// Loop settings for one seed.
pub fn pbrl_config(cfg: &ExperimentConfig, seed: u64) -> PbrlConfig {
    let penalty = match cfg.algorithm {
        Algorithm::PbrlBellman => PenaltyKind::Bellman,
        Algorithm::PbrlNi => PenaltyKind::NikaidoIsoda,
        _ => PenaltyKind::Value,
    };
    PbrlConfig {
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        outer_iters: cfg.outer_iters,
        oracle: cfg.oracle_spec(),
        warm_start: cfg.warm_start,
        penalty,
        x_set: XSet::Unconstrained,
        y_param: cfg.y_param,
        gradient: cfg.gradient,
        traj_len: cfg.traj_len,
        batch: cfg.batch,
        seed: derive_seed(cfg.master_seed, seed),
        track_gap: true,
        track_exact: cfg.track_exact,
    }
}

pub fn recipe(cfg: &ExperimentConfig, seed: u64) -> EnvRecipe {
    let base = match cfg.experiment {
        Experiment::Stackelberg => EnvRecipe::stackelberg_desk(seed),
        Experiment::Incentive => EnvRecipe::incentive(seed),
        Experiment::Shaping => EnvRecipe::sparse_chain(cfg.env_size, seed),
        Experiment::Preference => EnvRecipe::random_mdp(cfg.env_size, PREFERENCE_ACTIONS, seed),
    };
    EnvRecipe { n_states: cfg.env_size, gamma: cfg.gamma, tau: cfg.tau, ..base }
}

/// Runs one seed; the returned trace carries the experiment seed rather than the derived RNG seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> RunOutcome {
    let result = match cfg.experiment {
        Experiment::Stackelberg => stackelberg(cfg, seed).map(|t| (t, None)),
        Experiment::Incentive => incentive(cfg, seed),
        Experiment::Shaping => shaping(cfg, seed),
        Experiment::Preference => preference(cfg, seed).map(|t| (t, None)),
    };
    let result = result.map(|(t, b)| (RunTrace { seed, ..t }, b));
    match result {
        Ok((trace, baseline)) => RunOutcome { seed, status: RunStatus::Completed, trace: Some(trace), baseline },
        Err(PbrlError::Diverged { iteration, trace, .. }) => {
            let trace = RunTrace { seed, ..*trace };
            RunOutcome { seed, status: RunStatus::Diverged { iteration }, trace: Some(trace), baseline: None }
        }
        Err(e) => RunOutcome { seed, status: RunStatus::Failed { message: e.to_string() }, trace: None, baseline: None },
    }
}

fn stackelberg(cfg: &ExperimentConfig, seed: u64) -> Result<RunTrace> {
    let game = Arc::new(gen_stackelberg(&recipe(cfg, seed))?);
    let pc = pbrl_config(cfg, seed);
    match cfg.algorithm {
        Algorithm::IndependentPg => independent_pg_run(&game, &pc),
        _ => pbrl_run(&BilevelProblem::stackelberg(game), &pc),
    }
}

/// Constant upper level, so the loop only seeks an equilibrium.
struct NoObjective {
    dim_x: usize,
}

impl GameUpperObjective for NoObjective {
    fn evaluate(&self, _x: &[f64], _joint: &JointPolicy) -> Result<f64> {
        Ok(0.0)
    }

    fn grad(&self, _x: &[f64], joint: &JointPolicy) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let z1 = DMatrix::zeros(joint.pi1.n_states(), joint.pi1.n_actions());
        let z2 = DMatrix::zeros(joint.pi2.n_states(), joint.pi2.n_actions());
        Ok((vec![0.0; self.dim_x], z1, z2))
    }
}

/// Designer reward at the equilibrium reached with the incentive held at `x = 0`.
pub fn incentive_start_line(problem: &ZeroSumBilevelProblem) -> Result<f64> {
    let game = &problem.game;
    let seek = ZeroSumBilevelProblem {
        game: game.clone(),
        upper: Arc::new(NoObjective { dim_x: game.dim_x() }),
        x0: vec![0.0; game.dim_x()],
        init: None,
    };
    let cfg = PbrlConfig {
        lambda: 1.0,
        alpha: 0.5,
        outer_iters: 2000,
        oracle: OracleSpec::Tight,
        penalty: PenaltyKind::NikaidoIsoda,
        x_set: XSet::Box { lo: 0.0, hi: 0.0 },
        track_gap: false,
        ..PbrlConfig::default()
    };
    let ne = pbrl_zs_run(&seek, &cfg)?;
    let n = game.n_states;
    let joint = JointPolicy {
        pi1: Policy::direct(DMatrix::from_row_slice(n, game.n1, &ne.final_y[0]))?,
        pi2: Policy::direct(DMatrix::from_row_slice(n, game.n2, &ne.final_y[1]))?,
    };
    Ok(problem.upper.metric(&seek.x0, &joint)?)
}

fn incentive(cfg: &ExperimentConfig, seed: u64) -> Result<(RunTrace, Option<f64>)> {
    let (designer, game) = gen_incentive(&recipe(cfg, seed))?;
    let problem = incentive_problem(&designer, game)?;
    let start = incentive_start_line(&problem)?;
    Ok((pbrl_zs_run(&problem, &pbrl_config(cfg, seed))?, Some(start)))
}

fn shaping(cfg: &ExperimentConfig, seed: u64) -> Result<(RunTrace, Option<f64>)> {
    let r = recipe(cfg, seed);
    let original = gen_sparse_chain_mdp(&r)?;
    let shaped = Arc::new(gen_sparse_chain(&r)?);
    let upper = Arc::new(reward_shaping_objective(&original, &shaped)?);
    let best = if original.tau == 0.0 { Some(original.value_rho(&brute_force_optimal(&original)?.policy_hat)?) } else { None };
    let problem = BilevelProblem { x0: vec![0.0; shaped.dim_x()], mdp: shaped, upper, y0: None };
    Ok((pbrl_run(&problem, &pbrl_config(cfg, seed))?, best))
}

/// Alternates segment collection under the current policy with PBRL chunks on the buffer.
fn preference(cfg: &ExperimentConfig, seed: u64) -> Result<RunTrace> {
    let truth = gen_random_mdp(&recipe(cfg, seed))?;
    let (n, k) = (truth.n_states(), truth.n_actions());
    let map: Arc<dyn ParamMap> = Arc::new(OffsetMap::table(n * k));
    let mdp = Arc::new(ParamMdp::with_reward_map(
        truth.gamma,
        truth.tau,
        truth.regularizer.clone(),
        map.clone(),
        truth.transition.clone(),
        truth.initial_dist.clone(),
    )?);
    let pc = PbrlConfig { outer_iters: cfg.outer_iters / cfg.chunks, ..pbrl_config(cfg, seed) };
    let seg = |n_pairs: usize, round: u64| SegmentConfig {
        segment_len: cfg.segment_len,
        n_pairs,
        seed: derive_seed(pc.seed, round),
    };
    let mut data = collect_and_label_segments(&truth, &truth.reward, &Policy::uniform(n, k), &seg(cfg.initial_pairs, 0))?;
    data.truncate_front(cfg.buffer);
    let mut state = None;
    let mut parts = Vec::with_capacity(cfg.chunks);
    for c in 0..cfg.chunks {
        let mut upper = preference_upper_objective(data.clone(), map.clone(), n, k)?;
        upper.true_reward = Some(truth.reward.clone());
        let problem = BilevelProblem { mdp: mdp.clone(), upper: Arc::new(upper), x0: vec![0.0; n * k], y0: None };
        let st = match state.take() {
            Some(s) => s,
            None => initial_state(&problem, &pc)?,
        };
        let (trace, st) = match pbrl_run_from(&problem, &pc, st) {
            Ok(v) => v,
            Err(PbrlError::Diverged { iteration, value, trace }) => {
                parts.push(*trace);
                let trace = Box::new(merge_traces(parts)?);
                return Err(PbrlError::Diverged { iteration, value, trace });
            }
            Err(e) => return Err(e),
        };
        let pi = Policy::direct(DMatrix::from_row_slice(n, k, &trace.final_y[0]))?;
        parts.push(trace);
        state = Some(st);
        if c + 1 < cfg.chunks && cfg.pairs_per_chunk > 0 {
            let fresh = collect_and_label_segments(&truth, &truth.reward, &pi, &seg(cfg.pairs_per_chunk, c as u64 + 1))?;
            data.ties += fresh.ties;
            data.pairs.extend(fresh.pairs);
            data.truncate_front(cfg.buffer);
        }
    }
    merge_traces(parts)
}
