//! Policy parameterizations, regularizers, simplex projection and Monte-Carlo
//! policy-gradient estimation.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, PbrlError, Result};
use crate::mdp::TabularMdp;

/// Tolerance on row sums of direct policies.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// `table` is the row-stochastic matrix itself.
    Direct,
    /// `table` holds logits; probabilities are the row-wise softmax.
    Softmax,
}

/// A stationary policy over a tabular state space.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    kind: ParamKind,
    table: DMatrix<f64>,
}

impl Policy {
    pub fn direct(table: DMatrix<f64>) -> Result<Self> {
        check_stochastic(&table)?;
        Ok(Policy { kind: ParamKind::Direct, table })
    }

    pub fn softmax(logits: DMatrix<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return validation("softmax logits must be finite");
        }
        Ok(Policy { kind: ParamKind::Softmax, table: logits })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            kind: ParamKind::Direct,
            table: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut table = DMatrix::zeros(actions.len(), n_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return validation(format!("action {a} out of range in state {s}"));
            }
            table[(s, a)] = 1.0;
        }
        Ok(Policy { kind: ParamKind::Direct, table })
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    /// Raw parameters (probabilities or logits).
    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    pub fn n_states(&self) -> usize {
        self.table.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.table.ncols()
    }

    /// Row-stochastic action probabilities.
    pub fn probs(&self) -> DMatrix<f64> {
        match self.kind {
            ParamKind::Direct => self.table.clone(),
            ParamKind::Softmax => softmax_materialize(&self.table),
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        match self.kind {
            ParamKind::Direct => self.table[(s, a)],
            ParamKind::Softmax => softmax_row(&row_vec(&self.table, s))[a],
        }
    }

    pub fn dist(&self, s: usize) -> Vec<f64> {
        match self.kind {
            ParamKind::Direct => row_vec(&self.table, s),
            ParamKind::Softmax => softmax_row(&row_vec(&self.table, s)),
        }
    }

    /// The same distribution under direct parameterization.
    pub fn to_direct(&self) -> Policy {
        Policy { kind: ParamKind::Direct, table: self.probs() }
    }

    /// Largest per-state total-variation distance to `other`.
    pub fn max_tv(&self, other: &Policy) -> f64 {
        let a = self.probs();
        let b = other.probs();
        (0..a.nrows())
            .map(|s| 0.5 * (0..a.ncols()).map(|j| (a[(s, j)] - b[(s, j)]).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn row_vec(m: &DMatrix<f64>, s: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(s, j)]).collect()
}

pub(crate) fn check_stochastic(table: &DMatrix<f64>) -> Result<()> {
    for s in 0..table.nrows() {
        let mut sum = 0.0;
        for a in 0..table.ncols() {
            let p = table[(s, a)];
            if !p.is_finite() || p < 0.0 {
                return validation(format!("policy entry ({s},{a}) = {p} is not a probability"));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return validation(format!("policy row {s} sums to {sum}"));
        }
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return validation("cannot project an empty vector");
    }
    if v.iter().any(|x| !x.is_finite()) {
        return validation("simplex projection input must be finite");
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // remove the rounding residue so the row sums to one to machine precision
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        for x in &mut out {
            *x /= sum;
        }
    }
    Ok(out)
}

/// Projects every row of `m` onto the simplex.
pub fn project_rows(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for s in 0..m.nrows() {
        let p = project_simplex(&row_vec(m, s))?;
        for (a, v) in p.into_iter().enumerate() {
            out[(s, a)] = v;
        }
    }
    Ok(out)
}

/// Numerically stable softmax of a single row.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `log Σ exp(v)` without overflow.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_materialize(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for s in 0..logits.nrows() {
        for (a, v) in softmax_row(&row_vec(logits, s)).into_iter().enumerate() {
            out[(s, a)] = v;
        }
    }
    out
}

/// Pulls a gradient with respect to probabilities back to the logits: `Jᵀ g` row by row.
pub fn softmax_chain_gradient(logits: &DMatrix<f64>, grad_pi: &DMatrix<f64>) -> DMatrix<f64> {
    let pi = softmax_materialize(logits);
    let mut out = DMatrix::zeros(logits.nrows(), logits.ncols());
    for s in 0..logits.nrows() {
        let inner: f64 = (0..logits.ncols()).map(|a| pi[(s, a)] * grad_pi[(s, a)]).sum();
        for a in 0..logits.ncols() {
            out[(s, a)] = pi[(s, a)] * (grad_pi[(s, a)] - inner);
        }
    }
    out
}

/// Per-state convex regularizer `h_s`.
///
/// Every non-trivial kind is 1-strongly convex on the simplex with respect to the
/// Euclidean norm: the Hessians of the entropy and of the KL divergence are
/// `diag(1/p) ⪰ I` there, and the squared norm has Hessian `I`.
#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    None,
    /// `Σ p log p + log|A|`, shifted to be nonnegative.
    NegEntropy,
    /// `KL(p ‖ reference(s))`.
    KlToReference(DMatrix<f64>),
    /// `½‖p‖²`.
    SquaredL2,
}

impl Regularizer {
    pub fn strong_convexity(&self) -> f64 {
        match self {
            Regularizer::None => 0.0,
            _ => 1.0,
        }
    }

    pub fn check_tau(&self, tau: f64) -> Result<()> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(PbrlError::Config(format!("tau must be finite and nonnegative, got {tau}")));
        }
        if matches!(self, Regularizer::None) && tau > 0.0 {
            return Err(PbrlError::Config("a None regularizer requires tau = 0".into()));
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if let Regularizer::KlToReference(r) = self {
            if r.nrows() != n_states || r.ncols() != n_actions {
                return validation("KL reference policy has the wrong shape");
            }
            check_stochastic(r)?;
        }
        Ok(())
    }

    /// `h_s(p)`.
    pub fn value(&self, s: usize, p: &[f64]) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::NegEntropy => {
                p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.max(LOG_FLOOR).ln()).sum::<f64>()
                    + (p.len() as f64).ln()
            }
            Regularizer::KlToReference(r) => p
                .iter()
                .enumerate()
                .filter(|(_, &q)| q > 0.0)
                .map(|(a, &q)| q * (q.max(LOG_FLOOR).ln() - r[(s, a)].max(LOG_FLOOR).ln()))
                .sum(),
            Regularizer::SquaredL2 => 0.5 * p.iter().map(|q| q * q).sum::<f64>(),
        }
    }

    /// `∇h_s(p)`, taken on the natural extension of `h_s` off the simplex.
    pub fn grad(&self, s: usize, p: &[f64]) -> Vec<f64> {
        match self {
            Regularizer::None => vec![0.0; p.len()],
            Regularizer::NegEntropy => p.iter().map(|&q| q.max(LOG_FLOOR).ln() + 1.0).collect(),
            Regularizer::KlToReference(r) => p
                .iter()
                .enumerate()
                .map(|(a, &q)| q.max(LOG_FLOOR).ln() - r[(s, a)].max(LOG_FLOOR).ln() + 1.0)
                .collect(),
            Regularizer::SquaredL2 => p.to_vec(),
        }
    }
}

/// Returns `(h_s(dist), ∇h_s(dist))`, rejecting a `None` regularizer paired with τ > 0.
pub fn regularizer_value_and_grad(
    reg: &Regularizer,
    tau: f64,
    s: usize,
    dist: &[f64],
) -> Result<(f64, Vec<f64>)> {
    reg.check_tau(tau)?;
    Ok((reg.value(s, dist), reg.grad(s, dist)))
}

/// Settings for the truncated REINFORCE estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub traj_len: usize,
    pub batch: usize,
    pub rng_seed: u64,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.traj_len == 0 || self.batch == 0 {
            return validation("traj_len and batch must be at least 1");
        }
        Ok(())
    }

    /// Environment steps consumed by one estimate.
    pub fn steps(&self) -> u64 {
        (self.traj_len * self.batch) as u64
    }
}

/// One sampled step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// A rollout truncated at a fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub gamma: f64,
}

impl Trajectory {
    pub fn discount(&self, t: usize) -> f64 {
        self.gamma.powi(t as i32)
    }
}

pub(crate) fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `u` above the cumulative sum; take the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Rolls out `len` steps from `s0 ∼ start` under `probs`.
pub fn sample_trajectory(
    mdp: &TabularMdp,
    probs: &DMatrix<f64>,
    len: usize,
    rng: &mut impl Rng,
) -> Trajectory {
    let mut steps = Vec::with_capacity(len);
    let mut s = sample_index(rng, &mdp.initial_dist);
    for _ in 0..len {
        let a = sample_index(rng, &row_vec(probs, s));
        steps.push(Step { state: s, action: a, reward: mdp.reward[(s, a)] });
        s = sample_index(rng, mdp.transition.row(s, a));
    }
    Trajectory { steps, gamma: mdp.gamma }
}

/// Single-trajectory estimate of the direct policy gradient.
///
/// Each step contributes `γ^t [ Q̂_t / π(a_t|s_t) e_{s_t,a_t} − τ ∇h(π(s_t)) ]` where
/// `Q̂_t = r_t + Σ_{t'>t} γ^{t'-t} (r_{t'} − τ h(π(s_{t'})))` is the truncated return.
pub fn trajectory_gradient(mdp: &TabularMdp, probs: &DMatrix<f64>, traj: &Trajectory) -> DMatrix<f64> {
    let n = traj.steps.len();
    let mut g = DMatrix::zeros(probs.nrows(), probs.ncols());
    let reg_cost: Vec<f64> = traj
        .steps
        .iter()
        .map(|st| mdp.tau * mdp.regularizer.value(st.state, &row_vec(probs, st.state)))
        .collect();
    // tail[t] = Σ_{t'≥t} γ^{t'-t} (r_{t'} − τh_{t'})
    let mut tail = vec![0.0; n + 1];
    for t in (0..n).rev() {
        tail[t] = traj.steps[t].reward - reg_cost[t] + traj.gamma * tail[t + 1];
    }
    for (t, st) in traj.steps.iter().enumerate() {
        let w = traj.discount(t);
        if w == 0.0 {
            break;
        }
        let q_hat = st.reward + traj.gamma * tail[t + 1];
        let p = probs[(st.state, st.action)].max(LOG_FLOOR);
        g[(st.state, st.action)] += w * q_hat / p;
        if mdp.tau > 0.0 {
            let dh = mdp.regularizer.grad(st.state, &row_vec(probs, st.state));
            for (a, d) in dh.into_iter().enumerate() {
                g[(st.state, a)] -= w * mdp.tau * d;
            }
        }
    }
    g
}

/// Batch-mean REINFORCE estimate of the direct policy gradient, truncated at `traj_len`.
///
/// The truncation bias is at most `γ^traj_len · V_max / (1−γ)` per entry, with
/// `V_max` bounding the regularized return magnitude.
pub fn mc_policy_gradient(mdp: &TabularMdp, pi: &Policy, cfg: &McConfig) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    mc_policy_gradient_with(mdp, pi, cfg, &mut rng)
}

/// As [`mc_policy_gradient`], drawing from a caller-owned stream.
pub fn mc_policy_gradient_with(
    mdp: &TabularMdp,
    pi: &Policy,
    cfg: &McConfig,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    mdp.check_policy(pi)?;
    let probs = pi.probs();
    let mut g = DMatrix::zeros(probs.nrows(), probs.ncols());
    for _ in 0..cfg.batch {
        let traj = sample_trajectory(mdp, &probs, cfg.traj_len, rng);
        g += trajectory_gradient(mdp, &probs, &traj);
    }
    Ok(g / cfg.batch as f64)
}

/// Batch-mean estimate of the discounted state-action occupancy `Σ_t γ^t 1{s_t=s, a_t=a}`.
pub fn mc_occupancy_with(
    mdp: &TabularMdp,
    pi: &Policy,
    cfg: &McConfig,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let probs = pi.probs();
    let mut occ = DMatrix::zeros(probs.nrows(), probs.ncols());
    for _ in 0..cfg.batch {
        let traj = sample_trajectory(mdp, &probs, cfg.traj_len, rng);
        for (t, st) in traj.steps.iter().enumerate() {
            occ[(st.state, st.action)] += traj.discount(t);
        }
    }
    Ok(occ / cfg.batch as f64)
}
