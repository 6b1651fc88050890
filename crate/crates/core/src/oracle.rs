//! Lower-level solvers returning an approximately optimal policy together with
//! a suboptimality certificate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{validation, PbrlError, Result};
use crate::mdp::TabularMdp;
use crate::policy::{
    logsumexp, project_rows, row_vec, softmax_chain_gradient, softmax_materialize, softmax_row, ParamKind, Policy,
    Regularizer, LOG_FLOOR,
};

/// What `gap_bound` measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapKind {
    /// `max_s ‖π̂(s) − π*(s)‖₁`.
    PolicyDistance,
    /// `V*(ρ) − V^{π̂}(ρ)`.
    ValueSuboptimality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCertificate {
    /// Direct-parameterized approximate optimum.
    pub policy_hat: Policy,
    pub gap_bound: f64,
    pub gap_kind: GapKind,
    pub iterations_used: usize,
    /// Empirical per-iteration contraction of the policy movement, when measured.
    pub contraction: Option<f64>,
    /// Deterministic policies whose value ties the returned one within 1e-9.
    pub near_ties: usize,
}

impl OracleCertificate {
    /// A bound on `V*(ρ) − V^{π̂}(ρ)`, converting a policy-distance certificate
    /// through gradient dominance.
    pub fn value_gap_bound(&self, mdp: &TabularMdp) -> Result<f64> {
        match self.gap_kind {
            GapKind::ValueSuboptimality => Ok(self.gap_bound),
            GapKind::PolicyDistance => mdp.dominance_gap_bound(&self.policy_hat),
        }
    }
}

fn checked_init(mdp: &TabularMdp, init: Option<&Policy>) -> Result<DMatrix<f64>> {
    match init {
        Some(p) => {
            mdp.check_policy(p)?;
            Ok(p.probs())
        }
        None => Ok(Policy::uniform(mdp.n_states(), mdp.n_actions()).table().clone()),
    }
}

fn max_l1_change(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (0..a.nrows())
        .map(|s| (0..a.ncols()).map(|j| (a[(s, j)] - b[(s, j)]).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn dominance_certificate(mdp: &TabularMdp, probs: DMatrix<f64>, iterations_used: usize) -> Result<OracleCertificate> {
    let policy_hat = Policy::direct(probs)?;
    let gap_bound = mdp.dominance_gap_bound(&policy_hat)?;
    Ok(OracleCertificate {
        policy_hat,
        gap_bound,
        gap_kind: GapKind::ValueSuboptimality,
        iterations_used,
        contraction: None,
        near_ties: 0,
    })
}

fn renormalize(mut probs: DMatrix<f64>) -> DMatrix<f64> {
    for s in 0..probs.nrows() {
        let z: f64 = (0..probs.ncols()).map(|a| probs[(s, a)]).sum();
        for a in 0..probs.ncols() {
            probs[(s, a)] /= z;
        }
    }
    probs
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmdConfig {
    pub eta: f64,
    /// Iteration budget `T`.
    pub iters: usize,
    /// Stop once the largest per-state ℓ₁ move falls below this.
    pub tol: f64,
}

/// Policy mirror descent with the regularizer's own Bregman geometry.
///
/// For the entropy and KL regularizers the update is carried on logits,
/// `ξ ← ξ/(1+ητ) + η Q̃/(1+ητ)` with `π ∝ exp ξ` (and `Q̃ = Q + τ log π_ref` for KL);
/// for the squared norm it is `π ← Proj((π + ηQ)/(1+ητ))`.
pub fn pmd_solve(mdp: &TabularMdp, cfg: &PmdConfig, init: Option<&Policy>) -> Result<OracleCertificate> {
    if mdp.tau <= 0.0 || matches!(mdp.regularizer, Regularizer::None) {
        return Err(PbrlError::UnsupportedStructure(
            "policy mirror descent needs tau > 0; use projected_pg_solve or brute_force_optimal".into(),
        ));
    }
    if !(cfg.eta > 0.0) {
        return validation("PMD step size must be positive");
    }
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let mut probs = checked_init(mdp, init)?;
    let shrink = 1.0 / (1.0 + cfg.eta * mdp.tau);
    let mut xi = probs.map(|p| p.max(LOG_FLOOR).ln());
    let mut moves: Vec<f64> = Vec::new();
    let mut used = 0;
    for _ in 0..cfg.iters {
        let q = mdp.q_from_values(&mdp.value(&Policy::direct(probs.clone())?)?);
        let next = match &mdp.regularizer {
            Regularizer::SquaredL2 => project_rows(&((&probs + q * cfg.eta) * shrink))?,
            reg => {
                for s in 0..n {
                    for a in 0..k {
                        let bias = match reg {
                            Regularizer::KlToReference(r) => mdp.tau * r[(s, a)].max(LOG_FLOOR).ln(),
                            _ => 0.0,
                        };
                        xi[(s, a)] = (xi[(s, a)] + cfg.eta * (q[(s, a)] + bias)) * shrink;
                    }
                    let m = (0..k).map(|a| xi[(s, a)]).fold(f64::NEG_INFINITY, f64::max);
                    for a in 0..k {
                        xi[(s, a)] -= m;
                    }
                }
                softmax_materialize(&xi)
            }
        };
        let mv = max_l1_change(&next, &probs);
        probs = next;
        used += 1;
        moves.push(mv);
        if mv < cfg.tol {
            break;
        }
    }
    let contraction = match moves.len() {
        l if l >= 2 && moves[l - 2] > 0.0 => Some(moves[l - 1] / moves[l - 2]),
        _ => None,
    };
    let last = moves.last().copied().unwrap_or(f64::INFINITY);
    let gap_bound = match contraction {
        Some(c) if c < 1.0 => last * c / (1.0 - c),
        _ if last == 0.0 => 0.0,
        _ => f64::INFINITY,
    };
    Ok(OracleCertificate {
        policy_hat: Policy::direct(renormalize(probs))?,
        gap_bound,
        gap_kind: GapKind::PolicyDistance,
        iterations_used: used,
        contraction,
        near_ties: 0,
    })
}

/// Soft Bellman iteration for the entropy-regularized problem:
/// `V(s) ← τ logsumexp(Q(s,·)/τ) − τ log|A|`, returning `softmax(Q/τ)`.
pub fn soft_value_iteration(mdp: &TabularMdp, tol: f64) -> Result<OracleCertificate> {
    if !matches!(mdp.regularizer, Regularizer::NegEntropy) || mdp.tau <= 0.0 {
        return Err(PbrlError::UnsupportedStructure(
            "soft value iteration needs the NegEntropy regularizer with tau > 0".into(),
        ));
    }
    if !(tol > 0.0) {
        return validation("tolerance must be positive");
    }
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let tau = mdp.tau;
    let shift = tau * (k as f64).ln();
    let mut v = vec![0.0; n];
    let mut prev_diff = f64::INFINITY;
    let mut sweeps = 0;
    loop {
        let q = mdp.q_from_values(&v);
        let next: Vec<f64> = (0..n)
            .map(|s| tau * logsumexp(&row_vec(&q, s).iter().map(|x| x / tau).collect::<Vec<_>>()) - shift)
            .collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if diff > mdp.gamma * prev_diff * (1.0 + 1e-9) + 1e-14 {
            log::warn!("soft Bellman sweep {sweeps} expanded: {diff:e} after {prev_diff:e}");
        }
        v = next;
        sweeps += 1;
        prev_diff = diff;
        if mdp.gamma == 0.0 || diff <= tol * (1.0 - mdp.gamma) || sweeps >= 1_000_000 {
            break;
        }
    }
    let q = mdp.q_from_values(&v);
    let mut probs = DMatrix::zeros(n, k);
    for s in 0..n {
        let p = softmax_row(&row_vec(&q, s).iter().map(|x| x / tau).collect::<Vec<_>>());
        for a in 0..k {
            probs[(s, a)] = p[a];
        }
    }
    dominance_certificate(mdp, probs, sweeps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgConfig {
    pub eta: f64,
    pub iters: usize,
}

/// Projected gradient ascent on `V(ρ)` over the product of simplices.
pub fn projected_pg_solve(mdp: &TabularMdp, cfg: &PgConfig, init: Option<&Policy>) -> Result<OracleCertificate> {
    if !(cfg.eta >= 0.0) {
        return validation("step size must be nonnegative");
    }
    let mut probs = checked_init(mdp, init)?;
    for _ in 0..cfg.iters {
        let g = mdp.policy_gradient_probs(&probs);
        probs = project_rows(&(&probs + g * cfg.eta))?;
    }
    dominance_certificate(mdp, probs, cfg.iters)
}

/// Gradient ascent on softmax logits.
pub fn softmax_pg_solve(mdp: &TabularMdp, cfg: &PgConfig, init: Option<&Policy>) -> Result<OracleCertificate> {
    let mut logits = match init {
        Some(p) if p.kind() == ParamKind::Softmax => {
            mdp.check_policy(p)?;
            p.table().clone()
        }
        other => checked_init(mdp, other)?.map(|p| p.max(LOG_FLOOR).ln()),
    };
    for _ in 0..cfg.iters {
        let probs = softmax_materialize(&logits);
        let g = mdp.policy_gradient_probs(&probs);
        logits += softmax_chain_gradient(&logits, &g) * cfg.eta;
    }
    dominance_certificate(mdp, softmax_materialize(&logits), cfg.iters)
}

/// Largest action space size for which enumeration is allowed.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// Exhaustive search over deterministic policies (unregularized problems only).
pub fn brute_force_optimal(mdp: &TabularMdp) -> Result<OracleCertificate> {
    if mdp.tau != 0.0 {
        return Err(PbrlError::UnsupportedStructure("brute force needs tau = 0".into()));
    }
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    if (k as f64).powi(n as i32) > BRUTE_FORCE_LIMIT {
        return Err(PbrlError::UnsupportedStructure(format!("{k}^{n} deterministic policies is too many")));
    }
    let mut actions = vec![0usize; n];
    let mut best = (f64::NEG_INFINITY, actions.clone());
    let mut ties = 0;
    let mut count = 0;
    loop {
        let v = mdp.value_rho(&Policy::deterministic(&actions, k)?)?;
        count += 1;
        if v > best.0 + 1e-9 {
            best = (v, actions.clone());
            ties = 0;
        } else if (v - best.0).abs() <= 1e-9 {
            ties += 1;
        }
        let mut i = 0;
        while i < n {
            actions[i] += 1;
            if actions[i] < k {
                break;
            }
            actions[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
    }
    if ties > 0 {
        log::warn!("{ties} deterministic policies tie the optimum within 1e-9; using the first");
    }
    Ok(OracleCertificate {
        policy_hat: Policy::deterministic(&best.1, k)?,
        gap_bound: 0.0,
        gap_kind: GapKind::ValueSuboptimality,
        iterations_used: count,
        contraction: None,
        near_ties: ties,
    })
}

/// Howard policy iteration for unregularized problems (ties broken towards the lowest action).
pub fn policy_iteration(mdp: &TabularMdp) -> Result<OracleCertificate> {
    if mdp.tau != 0.0 {
        return Err(PbrlError::UnsupportedStructure("policy iteration needs tau = 0".into()));
    }
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let mut actions = vec![0usize; n];
    let mut iters = 0;
    loop {
        let q = mdp.q(&Policy::deterministic(&actions, k)?)?;
        iters += 1;
        let mut changed = false;
        for s in 0..n {
            let cur = q[(s, actions[s])];
            let (best_a, best_q) =
                (0..k).map(|a| (a, q[(s, a)])).fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
            if best_q > cur + 1e-12 * (1.0 + cur.abs()) {
                actions[s] = best_a;
                changed = true;
            }
        }
        if !changed || iters > 10_000 {
            break;
        }
    }
    Ok(OracleCertificate {
        policy_hat: Policy::deterministic(&actions, k)?,
        gap_bound: 0.0,
        gap_kind: GapKind::ValueSuboptimality,
        iterations_used: iters,
        contraction: None,
        near_ties: 0,
    })
}

/// A high-accuracy solver appropriate for the MDP's regularizer.
pub fn tight_oracle(mdp: &TabularMdp) -> Result<OracleCertificate> {
    match (&mdp.regularizer, mdp.tau > 0.0) {
        (Regularizer::NegEntropy, true) => soft_value_iteration(mdp, 1e-12),
        (_, true) => pmd_solve(mdp, &PmdConfig { eta: 10.0 / mdp.tau.max(1e-3), iters: 100_000, tol: 1e-14 }, None),
        (_, false) => policy_iteration(mdp),
    }
}

/// Oracle choice as carried by run configurations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    Pmd { eta: f64, iters: usize, tol: f64 },
    SoftValueIteration { tol: f64 },
    ProjectedPg { eta: f64, iters: usize },
    SoftmaxPg { eta: f64, iters: usize },
    BruteForce,
    PolicyIteration,
    Tight,
}

impl OracleSpec {
    /// Runs the oracle, warm-starting iterative methods from `warm`.
    pub fn solve(&self, mdp: &TabularMdp, warm: Option<&Policy>) -> Result<OracleCertificate> {
        match *self {
            OracleSpec::Pmd { eta, iters, tol } => pmd_solve(mdp, &PmdConfig { eta, iters, tol }, warm),
            OracleSpec::SoftValueIteration { tol } => soft_value_iteration(mdp, tol),
            OracleSpec::ProjectedPg { eta, iters } => projected_pg_solve(mdp, &PgConfig { eta, iters }, warm),
            OracleSpec::SoftmaxPg { eta, iters } => softmax_pg_solve(mdp, &PgConfig { eta, iters }, warm),
            OracleSpec::BruteForce => brute_force_optimal(mdp),
            OracleSpec::PolicyIteration => policy_iteration(mdp),
            OracleSpec::Tight => tight_oracle(mdp),
        }
    }

    /// Budgeted inner iterations, used for environment-step accounting.
    pub fn nominal_iters(&self) -> usize {
        match *self {
            OracleSpec::Pmd { iters, .. } | OracleSpec::ProjectedPg { iters, .. } | OracleSpec::SoftmaxPg { iters, .. } => {
                iters
            }
            _ => 1,
        }
    }
}
