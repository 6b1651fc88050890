//! The penalized outer loop, its stationarity measure and the independent
//! policy-gradient baseline.
//!
//! Every iteration solves the lower level approximately, forms
//! `∇̂F_λ = ∇f + λ∇̂p` and takes one projected step on `(x, y)` jointly.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::applications::{Payoff, StackelbergGame, UpperObjective};
use crate::error::{validation, PbrlError, Result};
use crate::mdp::{ParamMdp, Structure};
use crate::oracle::{tight_oracle, OracleCertificate, OracleSpec};
use crate::penalty::{
    bellman_penalty_eval, bellman_penalty_grad, value_penalty_eval, value_penalty_grad, GradForm, PenaltyKind,
};
use crate::policy::{mc_policy_gradient_with, project_rows, softmax_chain_gradient, McConfig, ParamKind, Policy, LOG_FLOOR};
use crate::zerosum::{ne_gap, ni_eval, ni_grad, ni_grad_mc, JointPolicy, ZeroSumBilevelProblem};

/// `|F_λ|` beyond which a run is declared diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
/// Increase of `F_λ` between consecutive iterates tolerated before counting a descent violation.
pub const DESCENT_TOL: f64 = 1e-9;
/// Documented environment-step accounting, recorded in every trace.
pub const ENV_STEPS_FORMULA: &str = "per iteration: (oracle_iters * oracle_calls + gradient_estimates) * traj_len * batch";

/// Feasible set for `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XSet {
    Unconstrained,
    Box { lo: f64, hi: f64 },
}

impl XSet {
    fn validate(&self) -> Result<()> {
        match *self {
            XSet::Unconstrained => Ok(()),
            XSet::Box { lo, hi } if lo <= hi => Ok(()),
            XSet::Box { lo, hi } => Err(PbrlError::Config(format!("empty box [{lo}, {hi}]"))),
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        if let XSet::Box { lo, hi } = *self {
            for v in x {
                *v = v.clamp(lo, hi);
            }
        }
    }
}

/// How the lower-level policy is stored and stepped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YParam {
    /// Direct probabilities, projected onto each simplex after a step.
    Simplex,
    /// Softmax logits, stepped without projection.
    Logits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Exact,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PbrlConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub outer_iters: usize,
    pub oracle: OracleSpec,
    pub warm_start: bool,
    pub penalty: PenaltyKind,
    pub x_set: XSet,
    pub y_param: YParam,
    pub gradient: GradientMode,
    /// Rollout length for sampled gradients and for step accounting.
    pub traj_len: usize,
    pub batch: usize,
    pub seed: u64,
    /// Record the lower-level gap against a tight oracle each iteration.
    pub track_gap: bool,
    /// Record the exact gradient mapping and the penalty-gradient error.
    pub track_exact: bool,
}

impl Default for PbrlConfig {
    fn default() -> Self {
        PbrlConfig {
            lambda: 2.0,
            alpha: 0.1,
            outer_iters: 100,
            oracle: OracleSpec::SoftmaxPg { eta: 0.1, iters: 1 },
            warm_start: true,
            penalty: PenaltyKind::Value,
            x_set: XSet::Unconstrained,
            y_param: YParam::Simplex,
            gradient: GradientMode::Exact,
            traj_len: 5,
            batch: 16,
            seed: 0,
            track_gap: true,
            track_exact: false,
        }
    }
}

impl PbrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(PbrlError::Config(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(PbrlError::Config(format!("alpha must be finite and nonnegative, got {}", self.alpha)));
        }
        if self.traj_len == 0 || self.batch == 0 {
            return Err(PbrlError::Config("traj_len and batch must be at least 1".into()));
        }
        self.x_set.validate()
    }

    fn mc(&self) -> McConfig {
        McConfig { traj_len: self.traj_len, batch: self.batch, rng_seed: self.seed }
    }
}

/// One outer iteration, evaluated at `z_k` before the step to `z_{k+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// Cumulative environment steps after this iteration.
    pub env_steps: u64,
    pub f: f64,
    pub p: f64,
    pub f_lambda: f64,
    /// `‖(z_{k+1} − z_k)/α‖²`.
    pub grad_norm_sq: f64,
    /// Exact `‖G_λ(z_k)‖²`, NaN when not tracked.
    pub exact_grad_norm_sq: f64,
    /// `20λ²‖∇̂p − ∇p‖²`, NaN when not tracked.
    pub penalty_grad_err_sq: f64,
    /// Lower-level gap against a tight oracle (NE gap for games), NaN when not tracked.
    pub follower_gap: f64,
    /// Certified suboptimality of the run's own oracle.
    pub oracle_gap: f64,
    pub metric: f64,
    pub wall_time: f64,
}

/// Metrics at the last iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub env_steps: u64,
    pub f: f64,
    /// Penalty at a tight oracle.
    pub p: f64,
    pub f_lambda: f64,
    pub follower_gap: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub avg_grad_norm_sq: f64,
    pub avg_exact_grad_norm_sq: f64,
    pub min_follower_gap: f64,
    pub final_follower_gap: f64,
    pub final_metric: f64,
    pub final_f: f64,
    /// Left side of the oracle-accuracy condition, averaged over iterations.
    pub oracle_error_term: f64,
    /// Averaged movement term on its right side.
    pub movement_term: f64,
    /// Smallest oracle error level under which the condition holds for this run.
    pub eps_needed: f64,
    pub descent_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub algorithm: String,
    pub seed: u64,
    pub metric_name: String,
    pub env_steps_formula: String,
    pub records: Vec<IterationRecord>,
    pub final_point: EvalPoint,
    pub summary: TraceSummary,
    pub final_x: Vec<f64>,
    /// Final direct policies, row-major, one per lower-level player.
    pub final_y: Vec<Vec<f64>>,
}

fn bits_eq(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn records_eq(a: &IterationRecord, b: &IterationRecord) -> bool {
    a.k == b.k
        && a.env_steps == b.env_steps
        && [
            (a.f, b.f),
            (a.p, b.p),
            (a.f_lambda, b.f_lambda),
            (a.grad_norm_sq, b.grad_norm_sq),
            (a.exact_grad_norm_sq, b.exact_grad_norm_sq),
            (a.penalty_grad_err_sq, b.penalty_grad_err_sq),
            (a.follower_gap, b.follower_gap),
            (a.oracle_gap, b.oracle_gap),
            (a.metric, b.metric),
        ]
        .iter()
        .all(|&(u, v)| bits_eq(u, v))
}

impl RunTrace {
    /// Bitwise equality of everything except wall-clock timings.
    pub fn same_results(&self, other: &RunTrace) -> bool {
        let fp = |p: &EvalPoint| [p.f, p.p, p.f_lambda, p.follower_gap, p.metric];
        self.algorithm == other.algorithm
            && self.seed == other.seed
            && self.metric_name == other.metric_name
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| records_eq(a, b))
            && self.final_point.env_steps == other.final_point.env_steps
            && fp(&self.final_point).iter().zip(fp(&other.final_point)).all(|(a, b)| bits_eq(*a, b))
            && self.final_x.len() == other.final_x.len()
            && self.final_x.iter().zip(&other.final_x).all(|(a, b)| bits_eq(*a, *b))
            && self.final_y.len() == other.final_y.len()
            && self
                .final_y
                .iter()
                .zip(&other.final_y)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(u, v)| bits_eq(*u, *v)))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Summary statistics computed from the records and final point alone.
pub fn summarize(records: &[IterationRecord], final_point: &EvalPoint) -> TraceSummary {
    let avg_grad_norm_sq = mean(records.iter().map(|r| r.grad_norm_sq));
    let oracle_error_term = mean(records.iter().map(|r| r.penalty_grad_err_sq));
    let min_follower_gap = records
        .iter()
        .map(|r| r.follower_gap)
        .chain(std::iter::once(final_point.follower_gap))
        .filter(|g| !g.is_nan())
        .fold(f64::NAN, f64::min);
    let descent_violations = records.windows(2).filter(|w| w[1].f_lambda > w[0].f_lambda + DESCENT_TOL).count();
    TraceSummary {
        avg_grad_norm_sq,
        avg_exact_grad_norm_sq: mean(records.iter().map(|r| r.exact_grad_norm_sq)),
        min_follower_gap,
        final_follower_gap: final_point.follower_gap,
        final_metric: final_point.metric,
        final_f: final_point.f,
        oracle_error_term,
        movement_term: avg_grad_norm_sq,
        eps_needed: if oracle_error_term.is_nan() { f64::NAN } else { (oracle_error_term - avg_grad_norm_sq).max(0.0) },
        descent_violations,
    }
}

/// Concatenates consecutive chunks of one run.
pub fn merge_traces(parts: Vec<RunTrace>) -> Result<RunTrace> {
    let mut it = parts.into_iter();
    let mut out = match it.next() {
        Some(t) => t,
        None => return validation("no traces to merge"),
    };
    for next in it {
        out.records.extend(next.records);
        out.final_point = next.final_point;
        out.final_x = next.final_x;
        out.final_y = next.final_y;
    }
    out.summary = summarize(&out.records, &out.final_point);
    Ok(out)
}

/// Iterate, RNG stream and warm starts carried between chunks of a run.
#[derive(Clone, Debug)]
pub struct RunState {
    pub x: Vec<f64>,
    /// One table per lower-level player in the configured parameterization.
    pub y: Vec<DMatrix<f64>>,
    pub k: usize,
    pub env_steps: u64,
    rng: ChaCha8Rng,
    warm: Vec<Option<Policy>>,
}

impl RunState {
    fn new(x: Vec<f64>, y: Vec<DMatrix<f64>>, seed: u64) -> Self {
        let warm = vec![None; y.len()];
        RunState { x, y, k: 0, env_steps: 0, rng: ChaCha8Rng::seed_from_u64(seed), warm }
    }
}

fn table_for(init: Option<&Policy>, n_states: usize, n_actions: usize, param: YParam) -> Result<DMatrix<f64>> {
    let pi = match init {
        Some(p) => {
            if p.n_states() != n_states || p.n_actions() != n_actions {
                return validation("initial policy has the wrong shape");
            }
            p.clone()
        }
        None => Policy::uniform(n_states, n_actions),
    };
    Ok(match (param, pi.kind()) {
        (YParam::Simplex, _) => pi.probs(),
        (YParam::Logits, ParamKind::Softmax) => pi.table().clone(),
        (YParam::Logits, ParamKind::Direct) => pi.table().map(|p| p.max(LOG_FLOOR).ln()),
    })
}

fn policy_of(param: YParam, table: &DMatrix<f64>) -> Result<Policy> {
    match param {
        YParam::Simplex => Policy::direct(table.clone()),
        YParam::Logits => Policy::softmax(table.clone()),
    }
}

/// Loss pieces with gradients in direct policy coordinates.
struct Grads {
    f: f64,
    p: f64,
    fgx: Vec<f64>,
    fgy: Vec<DMatrix<f64>>,
    pgx: Vec<f64>,
    pgy: Vec<DMatrix<f64>>,
}

impl Grads {
    fn combined(&self, lambda: f64) -> (f64, Vec<f64>, Vec<DMatrix<f64>>) {
        let gx = self.fgx.iter().zip(&self.pgx).map(|(a, b)| a + lambda * b).collect();
        let gy = self.fgy.iter().zip(&self.pgy).map(|(a, b)| a + b * lambda).collect();
        (self.f + lambda * self.p, gx, gy)
    }
}

struct Estimate {
    grads: Grads,
    oracle_gap: f64,
    oracle_calls: usize,
    estimates: usize,
}

trait LoopModel {
    fn eval(
        &self,
        x: &[f64],
        pols: &[Policy],
        warm: &mut [Option<Policy>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Estimate>;
    fn exact(&self, x: &[f64], pols: &[Policy]) -> Result<Grads>;
    fn follower_gap(&self, x: &[f64], pols: &[Policy]) -> Result<f64>;
    fn metric(&self, x: &[f64], pols: &[Policy]) -> Result<f64>;
}

/// Chains direct-coordinate policy gradients into the stored parameterization.
fn to_param(param: YParam, tables: &[DMatrix<f64>], gy: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    match param {
        YParam::Simplex => gy.to_vec(),
        YParam::Logits => tables.iter().zip(gy).map(|(t, g)| softmax_chain_gradient(t, g)).collect(),
    }
}

fn step(cfg: &PbrlConfig, x: &[f64], y: &[DMatrix<f64>], gx: &[f64], gy: &[DMatrix<f64>]) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    let mut nx: Vec<f64> = x.iter().zip(gx).map(|(a, g)| a - cfg.alpha * g).collect();
    cfg.x_set.project(&mut nx);
    let mut ny = Vec::with_capacity(y.len());
    for (t, g) in y.iter().zip(gy) {
        let moved = t - g * cfg.alpha;
        ny.push(match cfg.y_param {
            YParam::Simplex => project_rows(&moved)?,
            YParam::Logits => moved,
        });
    }
    Ok((nx, ny))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn movement_sq(cfg: &PbrlConfig, x: &[f64], y: &[DMatrix<f64>], nx: &[f64], ny: &[DMatrix<f64>]) -> f64 {
    if cfg.alpha == 0.0 {
        return 0.0;
    }
    let dy: f64 = y.iter().zip(ny).map(|(a, b)| sq_dist(a.as_slice(), b.as_slice())).sum();
    (sq_dist(x, nx) + dy) / (cfg.alpha * cfg.alpha)
}

fn mapping_sq(cfg: &PbrlConfig, x: &[f64], y: &[DMatrix<f64>], g: &Grads) -> Result<f64> {
    let (_, gx, gy) = g.combined(cfg.lambda);
    let gy = to_param(cfg.y_param, y, &gy);
    let (nx, ny) = step(cfg, x, y, &gx, &gy)?;
    Ok(movement_sq(cfg, x, y, &nx, &ny))
}

fn final_y(cfg: &PbrlConfig, y: &[DMatrix<f64>]) -> Result<Vec<Vec<f64>>> {
    y.iter()
        .map(|t| Ok(policy_of(cfg.y_param, t)?.probs().transpose().as_slice().to_vec()))
        .collect()
}

fn nan_point(env_steps: u64) -> EvalPoint {
    EvalPoint { env_steps, f: f64::NAN, p: f64::NAN, f_lambda: f64::NAN, follower_gap: f64::NAN, metric: f64::NAN }
}

fn run_loop(
    model: &dyn LoopModel,
    cfg: &PbrlConfig,
    mut st: RunState,
    algorithm: &str,
    metric_name: &str,
    oracle_iters: usize,
) -> Result<(RunTrace, RunState)> {
    let mut records = Vec::with_capacity(cfg.outer_iters);
    let per_unit = (cfg.traj_len * cfg.batch) as u64;
    let build = |records: Vec<IterationRecord>, final_point: EvalPoint, st: &RunState| -> Result<RunTrace> {
        let summary = summarize(&records, &final_point);
        Ok(RunTrace {
            algorithm: algorithm.to_string(),
            seed: cfg.seed,
            metric_name: metric_name.to_string(),
            env_steps_formula: ENV_STEPS_FORMULA.to_string(),
            records,
            final_point,
            summary,
            final_x: st.x.clone(),
            final_y: final_y(cfg, &st.y)?,
        })
    };
    for _ in 0..cfg.outer_iters {
        let t0 = Instant::now();
        let pols: Vec<Policy> = st.y.iter().map(|t| policy_of(cfg.y_param, t)).collect::<Result<_>>()?;
        let est = model.eval(&st.x, &pols, &mut st.warm, &mut st.rng)?;
        let (big_f, gx, gy) = est.grads.combined(cfg.lambda);
        let finite = big_f.is_finite() && gx.iter().all(|v| v.is_finite()) && gy.iter().all(|m| m.iter().all(|v| v.is_finite()));
        if !finite || big_f.abs() > DIVERGENCE_THRESHOLD {
            let iteration = st.k;
            let trace = build(records, nan_point(st.env_steps), &st)?;
            return Err(PbrlError::Diverged { iteration, value: big_f, trace: Box::new(trace) });
        }
        let (exact_norm, err_sq) = if cfg.track_exact {
            let ex = model.exact(&st.x, &pols)?;
            let norm = mapping_sq(cfg, &st.x, &st.y, &ex)?;
            let dpx = sq_dist(&est.grads.pgx, &ex.pgx);
            let hat = to_param(cfg.y_param, &st.y, &est.grads.pgy);
            let tru = to_param(cfg.y_param, &st.y, &ex.pgy);
            let dpy: f64 = hat.iter().zip(&tru).map(|(a, b)| sq_dist(a.as_slice(), b.as_slice())).sum();
            (norm, 20.0 * cfg.lambda * cfg.lambda * (dpx + dpy))
        } else {
            (f64::NAN, f64::NAN)
        };
        let gap = if cfg.track_gap { model.follower_gap(&st.x, &pols)? } else { f64::NAN };
        let metric = model.metric(&st.x, &pols)?;
        let gyp = to_param(cfg.y_param, &st.y, &gy);
        let (nx, ny) = step(cfg, &st.x, &st.y, &gx, &gyp)?;
        let grad_norm_sq = movement_sq(cfg, &st.x, &st.y, &nx, &ny);
        st.env_steps += (oracle_iters * est.oracle_calls + est.estimates) as u64 * per_unit;
        records.push(IterationRecord {
            k: st.k,
            env_steps: st.env_steps,
            f: est.grads.f,
            p: est.grads.p,
            f_lambda: big_f,
            grad_norm_sq,
            exact_grad_norm_sq: exact_norm,
            penalty_grad_err_sq: err_sq,
            follower_gap: gap,
            oracle_gap: est.oracle_gap,
            metric,
            wall_time: t0.elapsed().as_secs_f64(),
        });
        st.x = nx;
        st.y = ny;
        st.k += 1;
    }
    let pols: Vec<Policy> = st.y.iter().map(|t| policy_of(cfg.y_param, t)).collect::<Result<_>>()?;
    let ex = model.exact(&st.x, &pols)?;
    let final_point = EvalPoint {
        env_steps: st.env_steps,
        f: ex.f,
        p: ex.p,
        f_lambda: ex.f + cfg.lambda * ex.p,
        follower_gap: model.follower_gap(&st.x, &pols)?,
        metric: model.metric(&st.x, &pols)?,
    };
    let trace = build(records, final_point, &st)?;
    Ok((trace, st))
}

/// A bilevel problem with a single-agent lower level `M_τ(x)`.
#[derive(Clone)]
pub struct BilevelProblem {
    pub mdp: Arc<ParamMdp>,
    pub upper: Arc<dyn UpperObjective>,
    pub x0: Vec<f64>,
    pub y0: Option<Policy>,
}

impl BilevelProblem {
    /// The follower's problem in a Stackelberg game, starting from a uniform leader.
    pub fn stackelberg(game: Arc<StackelbergGame>) -> Self {
        let mdp = Arc::new(game.follower_mdp().clone());
        let x0 = vec![0.0; game.dim_x()];
        BilevelProblem { mdp, upper: Arc::new(crate::applications::StackelbergUpper { game }), x0, y0: None }
    }
}

struct SingleModel<'a> {
    problem: &'a BilevelProblem,
    cfg: &'a PbrlConfig,
    form: GradForm,
}

impl SingleModel<'_> {
    fn penalty_exact(&self, x: &[f64], pi: &Policy, cert: &OracleCertificate) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let mdp = &*self.problem.mdp;
        let (p, (gx, gy)) = match self.cfg.penalty {
            PenaltyKind::Value => (value_penalty_eval(mdp, x, pi, cert)?, value_penalty_grad(mdp, x, pi, cert, self.form)?),
            PenaltyKind::Bellman => {
                (bellman_penalty_eval(mdp, x, pi, cert)?, bellman_penalty_grad(mdp, x, pi, cert, self.form)?)
            }
            PenaltyKind::NikaidoIsoda => {
                return Err(PbrlError::Config("the Nikaido-Isoda penalty needs a zero-sum lower level".into()))
            }
        };
        Ok((p, gx, gy))
    }
}

impl LoopModel for SingleModel<'_> {
    fn eval(&self, x: &[f64], pols: &[Policy], warm: &mut [Option<Policy>], rng: &mut ChaCha8Rng) -> Result<Estimate> {
        let cfg = self.cfg;
        let mdp = &*self.problem.mdp;
        let upper = &*self.problem.upper;
        let pi = pols[0].to_direct();
        let m = mdp.at(x)?;
        let cert = cfg.oracle.solve(&m, if cfg.warm_start { warm[0].as_ref() } else { None })?;
        if cfg.warm_start {
            warm[0] = Some(cert.policy_hat.clone());
        }
        let f = upper.evaluate(x, &pi)?;
        let (grads, extra) = match cfg.gradient {
            GradientMode::Exact => {
                let (fgx, fgy) = upper.grad(x, &pi)?;
                let (p, pgx, pgy) = self.penalty_exact(x, &pi, &cert)?;
                let extra = if cfg.penalty == PenaltyKind::Value { 3 } else { 2 };
                (Grads { f, p, fgx, fgy: vec![fgy], pgx, pgy: vec![pgy] }, extra)
            }
            GradientMode::MonteCarlo => {
                if cfg.penalty != PenaltyKind::Value {
                    return Err(PbrlError::Config("sampled gradients are available for the value penalty only".into()));
                }
                let mc = cfg.mc();
                let (fgx, fgy) = upper.grad_mc(x, &pi, &mc, rng)?;
                let p = value_penalty_eval(mdp, x, &pi, &cert)?;
                let pgy = -mc_policy_gradient_with(&m, &pi, &mc, rng)?;
                let g_hat = mdp.value_gradient_x_mc(x, &cert.policy_hat, &mc, rng)?;
                let g_pi = mdp.value_gradient_x_mc(x, &pi, &mc, rng)?;
                let pgx = g_hat.iter().zip(&g_pi).map(|(a, b)| a - b).collect();
                (Grads { f, p, fgx, fgy: vec![fgy], pgx, pgy: vec![pgy] }, 3)
            }
        };
        Ok(Estimate { grads, oracle_gap: cert.value_gap_bound(&m)?, oracle_calls: 1, estimates: upper.estimates() + extra })
    }

    fn exact(&self, x: &[f64], pols: &[Policy]) -> Result<Grads> {
        let pi = pols[0].to_direct();
        let cert = tight_oracle(&self.problem.mdp.at(x)?)?;
        let f = self.problem.upper.evaluate(x, &pi)?;
        let (fgx, fgy) = self.problem.upper.grad(x, &pi)?;
        let (p, pgx, pgy) = self.penalty_exact(x, &pi, &cert)?;
        Ok(Grads { f, p, fgx, fgy: vec![fgy], pgx, pgy: vec![pgy] })
    }

    fn follower_gap(&self, x: &[f64], pols: &[Policy]) -> Result<f64> {
        let m = self.problem.mdp.at(x)?;
        let cert = tight_oracle(&m)?;
        Ok((m.value_rho(&cert.policy_hat)? - m.value_rho(&pols[0])?).max(0.0))
    }

    fn metric(&self, x: &[f64], pols: &[Policy]) -> Result<f64> {
        self.problem.upper.metric(x, &pols[0].to_direct())
    }
}

fn grad_form(mdp: &ParamMdp) -> Result<GradForm> {
    match mdp.structure() {
        Structure::RewardOnly => Ok(GradForm::RewardOnly),
        Structure::LeaderMarginal => Ok(GradForm::Stackelberg),
        Structure::GeneralTransition => Err(PbrlError::UnsupportedStructure(
            "penalty x-gradients need reward-only or leader-marginal dependence on x".into(),
        )),
    }
}

fn check_single(problem: &BilevelProblem, cfg: &PbrlConfig) -> Result<GradForm> {
    cfg.validate()?;
    let mdp = &problem.mdp;
    mdp.check_x(&problem.x0)?;
    if cfg.penalty == PenaltyKind::NikaidoIsoda {
        return Err(PbrlError::Config("the Nikaido-Isoda penalty needs a zero-sum lower level".into()));
    }
    if cfg.penalty == PenaltyKind::Bellman && mdp.tau() <= 0.0 {
        return Err(PbrlError::Config("the Bellman penalty requires tau > 0".into()));
    }
    grad_form(mdp)
}

/// Starting state for [`pbrl_run_from`].
pub fn initial_state(problem: &BilevelProblem, cfg: &PbrlConfig) -> Result<RunState> {
    check_single(problem, cfg)?;
    let mut x = problem.x0.clone();
    cfg.x_set.project(&mut x);
    let y = table_for(problem.y0.as_ref(), problem.mdp.n_states(), problem.mdp.n_actions(), cfg.y_param)?;
    Ok(RunState::new(x, vec![y], cfg.seed))
}

/// Runs `cfg.outer_iters` iterations from `state`, returning the chunk's trace and the state after it.
pub fn pbrl_run_from(problem: &BilevelProblem, cfg: &PbrlConfig, state: RunState) -> Result<(RunTrace, RunState)> {
    let form = check_single(problem, cfg)?;
    if state.y.len() != 1 {
        return validation("single-agent runs carry exactly one policy table");
    }
    let name = match cfg.penalty {
        PenaltyKind::Value => "pbrl_value",
        _ => "pbrl_bellman",
    };
    let model = SingleModel { problem, cfg, form };
    run_loop(&model, cfg, state, name, problem.upper.metric_name(), cfg.oracle.nominal_iters())
}

/// The penalized projected-gradient loop on a single-agent lower level.
pub fn pbrl_run(problem: &BilevelProblem, cfg: &PbrlConfig) -> Result<RunTrace> {
    let state = initial_state(problem, cfg)?;
    Ok(pbrl_run_from(problem, cfg, state)?.0)
}

/// Exact `‖(z − Proj(z − α∇F_λ(z)))/α‖²` at `z = (x, π)` in the configured parameterization.
pub fn projected_grad_norm(problem: &BilevelProblem, cfg: &PbrlConfig, x: &[f64], pi: &Policy) -> Result<f64> {
    let form = check_single(problem, cfg)?;
    if !(cfg.alpha > 0.0) {
        return Err(PbrlError::Config("the gradient mapping needs alpha > 0".into()));
    }
    let y = table_for(Some(pi), problem.mdp.n_states(), problem.mdp.n_actions(), cfg.y_param)?;
    let pols = [policy_of(cfg.y_param, &y)?];
    let model = SingleModel { problem, cfg, form };
    mapping_sq(cfg, x, &[y], &model.exact(x, &pols)?)
}

struct ZsModel<'a> {
    problem: &'a ZeroSumBilevelProblem,
    cfg: &'a PbrlConfig,
}

impl ZsModel<'_> {
    fn joint(pols: &[Policy]) -> JointPolicy {
        JointPolicy { pi1: pols[0].to_direct(), pi2: pols[1].to_direct() }
    }
}

impl LoopModel for ZsModel<'_> {
    fn eval(&self, x: &[f64], pols: &[Policy], warm: &mut [Option<Policy>], rng: &mut ChaCha8Rng) -> Result<Estimate> {
        let cfg = self.cfg;
        let game = &*self.problem.game;
        let upper = &*self.problem.upper;
        let joint = Self::joint(pols);
        let v1 = game.player1_view(x, &joint.pi2)?;
        let v2 = game.player2_view(x, &joint.pi1)?;
        let pick = |w: &Option<Policy>| if cfg.warm_start { w.clone() } else { None };
        let (w1, w2) = (pick(&warm[0]), pick(&warm[1]));
        let c1 = cfg.oracle.solve(&v1, w1.as_ref())?;
        let c2 = cfg.oracle.solve(&v2, w2.as_ref())?;
        if cfg.warm_start {
            warm[0] = Some(c1.policy_hat.clone());
            warm[1] = Some(c2.policy_hat.clone());
        }
        let f = upper.evaluate(x, &joint)?;
        let p = ni_eval(game, x, &joint, &c1, &c2)?;
        let ((fgx, f1, f2), ng, extra) = match cfg.gradient {
            GradientMode::Exact => (upper.grad(x, &joint)?, ni_grad(game, x, &joint, &c1, &c2)?, 4),
            GradientMode::MonteCarlo => {
                let mc = cfg.mc();
                let fg = upper.grad_mc(x, &joint, &mc, rng)?;
                (fg, ni_grad_mc(game, x, &joint, &c1, &c2, &mc, rng)?, 4)
            }
        };
        let grads = Grads { f, p, fgx, fgy: vec![f1, f2], pgx: ng.grad_x, pgy: vec![ng.grad_pi1, ng.grad_pi2] };
        Ok(Estimate {
            grads,
            oracle_gap: c1.value_gap_bound(&v1)? + c2.value_gap_bound(&v2)?,
            oracle_calls: 2,
            estimates: upper.estimates() + extra,
        })
    }

    fn exact(&self, x: &[f64], pols: &[Policy]) -> Result<Grads> {
        let game = &*self.problem.game;
        let joint = Self::joint(pols);
        let c1 = tight_oracle(&game.player1_view(x, &joint.pi2)?)?;
        let c2 = tight_oracle(&game.player2_view(x, &joint.pi1)?)?;
        let f = self.problem.upper.evaluate(x, &joint)?;
        let (fgx, f1, f2) = self.problem.upper.grad(x, &joint)?;
        let p = ni_eval(game, x, &joint, &c1, &c2)?;
        let ng = ni_grad(game, x, &joint, &c1, &c2)?;
        Ok(Grads { f, p, fgx, fgy: vec![f1, f2], pgx: ng.grad_x, pgy: vec![ng.grad_pi1, ng.grad_pi2] })
    }

    fn follower_gap(&self, x: &[f64], pols: &[Policy]) -> Result<f64> {
        ne_gap(&self.problem.game, x, &Self::joint(pols))
    }

    fn metric(&self, x: &[f64], pols: &[Policy]) -> Result<f64> {
        self.problem.upper.metric(x, &Self::joint(pols))
    }
}

/// The penalized loop with the Nikaido–Isoda penalty on a zero-sum lower level.
pub fn pbrl_zs_run(problem: &ZeroSumBilevelProblem, cfg: &PbrlConfig) -> Result<RunTrace> {
    cfg.validate()?;
    let game = &problem.game;
    if cfg.penalty != PenaltyKind::NikaidoIsoda {
        return Err(PbrlError::Config("zero-sum lower levels use the Nikaido-Isoda penalty".into()));
    }
    if game.tau <= 0.0 {
        return Err(PbrlError::Config("the Nikaido-Isoda gradient requires tau > 0".into()));
    }
    if problem.x0.len() != game.dim_x() {
        return validation("x0 has the wrong length");
    }
    let init = problem.init.as_ref();
    let y1 = table_for(init.map(|j| &j.pi1), game.n_states, game.n1, cfg.y_param)?;
    let y2 = table_for(init.map(|j| &j.pi2), game.n_states, game.n2, cfg.y_param)?;
    let mut x = problem.x0.clone();
    cfg.x_set.project(&mut x);
    let state = RunState::new(x, vec![y1, y2], cfg.seed);
    let model = ZsModel { problem, cfg };
    Ok(run_loop(&model, cfg, state, "pbrl_ni", problem.upper.metric_name(), cfg.oracle.nominal_iters())?.0)
}

struct IndepModel<'a> {
    game: &'a StackelbergGame,
    cfg: &'a PbrlConfig,
}

impl IndepModel<'_> {
    fn chain_x(&self, x: &[f64], g_lead: &DMatrix<f64>) -> Result<Vec<f64>> {
        let gx = softmax_chain_gradient(&self.game.leader_logits(x)?, g_lead);
        Ok(gx.transpose().iter().map(|v| -v).collect())
    }
}

impl LoopModel for IndepModel<'_> {
    fn eval(&self, x: &[f64], pols: &[Policy], _warm: &mut [Option<Policy>], rng: &mut ChaCha8Rng) -> Result<Estimate> {
        let grads = match self.cfg.gradient {
            GradientMode::Exact => self.exact(x, pols)?,
            GradientMode::MonteCarlo => {
                let mc = self.cfg.mc();
                let pi = pols[0].to_direct();
                let lead = self.game.leader_policy(x)?;
                let lv = self.game.leader_view(&pi.probs(), Payoff::Leader)?;
                let fgx = self.chain_x(x, &mc_policy_gradient_with(&lv, &lead, &mc, rng)?)?;
                let fv = self.game.follower_view(x, Payoff::Follower)?;
                let fgy = -mc_policy_gradient_with(&fv, &pi, &mc, rng)?;
                let f = -self.game.value_rho(x, &pi, Payoff::Leader)?;
                let pgx = vec![0.0; fgx.len()];
                let pgy = DMatrix::zeros(fgy.nrows(), fgy.ncols());
                Grads { f, p: 0.0, fgx, fgy: vec![fgy], pgx, pgy: vec![pgy] }
            }
        };
        Ok(Estimate { grads, oracle_gap: 0.0, oracle_calls: 0, estimates: 2 })
    }

    fn exact(&self, x: &[f64], pols: &[Policy]) -> Result<Grads> {
        let pi = pols[0].to_direct();
        let lead = self.game.leader_policy(x)?.to_direct();
        let lv = self.game.leader_view(&pi.probs(), Payoff::Leader)?;
        let fgx = self.chain_x(x, &lv.policy_gradient(&lead)?)?;
        let fgy = -self.game.follower_view(x, Payoff::Follower)?.policy_gradient(&pi)?;
        let f = -self.game.value_rho(x, &pi, Payoff::Leader)?;
        let pgx = vec![0.0; fgx.len()];
        let pgy = DMatrix::zeros(fgy.nrows(), fgy.ncols());
        Ok(Grads { f, p: 0.0, fgx, fgy: vec![fgy], pgx, pgy: vec![pgy] })
    }

    fn follower_gap(&self, x: &[f64], pols: &[Policy]) -> Result<f64> {
        let m = self.game.follower_view(x, Payoff::Follower)?;
        let cert = tight_oracle(&m)?;
        Ok((m.value_rho(&cert.policy_hat)? - m.value_rho(&pols[0])?).max(0.0))
    }

    fn metric(&self, x: &[f64], pols: &[Policy]) -> Result<f64> {
        self.game.value_rho(x, &pols[0], Payoff::Leader)
    }
}

/// Simultaneous myopic ascent: the leader on `V_l` in its logits, the follower on `V_f`.
///
/// Only `alpha`, `outer_iters`, `y_param`, `gradient`, `traj_len`, `batch`,
/// `seed` and `track_gap` are read from `cfg`.
pub fn independent_pg_run(game: &StackelbergGame, cfg: &PbrlConfig) -> Result<RunTrace> {
    cfg.validate()?;
    let cfg = PbrlConfig { lambda: 0.0, x_set: XSet::Unconstrained, track_exact: false, ..*cfg };
    let y = table_for(None, game.n_states, game.n_follower, cfg.y_param)?;
    let state = RunState::new(vec![0.0; game.dim_x()], vec![y], cfg.seed);
    let model = IndepModel { game, cfg: &cfg };
    Ok(run_loop(&model, &cfg, state, "independent_pg", "leader_value", 0)?.0)
}
