//! Value and Bellman penalties with their gradients.
//!
//! Both gradients are built from the oracle's `π̂` in place of the exact
//! lower-level optimum; with a tight oracle they are the exact gradients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::applications::UpperObjective;
use crate::error::{validation, PbrlError, Result};
use crate::mdp::{ParamMdp, Structure, TabularMdp};
use crate::oracle::OracleCertificate;
use crate::policy::{logsumexp, project_simplex, row_vec, softmax_row, ParamKind, Policy, Regularizer, LOG_FLOOR};

/// Slack added to the oracle certificate before a negative penalty is an error.
pub const NEGATIVE_SLACK: f64 = 1e-8;

/// Euclidean diameter of a product of `n_states` probability simplices.
///
/// Reported as a diagnostic for the feasible-set constant; never used by the solvers.
pub fn simplex_product_diameter(n_states: usize) -> f64 {
    (2.0 * n_states as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Value,
    Bellman,
    NikaidoIsoda,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return validation(format!("penalty constant must be finite and nonnegative, got {lambda}"));
        }
        Ok(PenaltySpec { kind, lambda })
    }
}

/// Which `x`-gradient formula the caller expects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradForm {
    /// Visitation-weighted reward gradients.
    RewardOnly,
    /// Score-function form for a follower facing a softmax leader.
    Stackelberg,
}

#[derive(Clone, Debug)]
pub struct PenaltyEval {
    pub value: f64,
    pub grad_x: Vec<f64>,
    /// Gradient with respect to the direct policy entries.
    pub grad_y: DMatrix<f64>,
    pub oracle_cert: OracleCertificate,
}

fn check_form(mdp: &ParamMdp, form: GradForm) -> Result<()> {
    let ok = matches!(
        (form, mdp.structure()),
        (GradForm::RewardOnly, Structure::RewardOnly) | (GradForm::Stackelberg, Structure::LeaderMarginal)
    );
    if ok {
        Ok(())
    } else {
        Err(PbrlError::UnsupportedStructure(format!(
            "{:?} gradients requested for an MDP with {:?} structure",
            form,
            mdp.structure()
        )))
    }
}

/// Clamps a slightly negative penalty to zero and rejects anything beyond the certificate.
pub(crate) fn clamp_penalty(p: f64, gap: f64) -> Result<f64> {
    if p >= 0.0 {
        Ok(p)
    } else if p >= -(gap + NEGATIVE_SLACK) {
        Ok(0.0)
    } else {
        Err(PbrlError::OracleFailure { value: p, tolerance: gap + NEGATIVE_SLACK })
    }
}

fn value_penalty_at(m: &TabularMdp, pi: &Policy, cert: &OracleCertificate) -> Result<f64> {
    let p = m.value_rho(&cert.policy_hat)? - m.value_rho(pi)?;
    let gap = cert.value_gap_bound(m)?;
    clamp_penalty(p, gap)
}

/// `p(x,y) = V^{π̂}(ρ) − V^{π_y}(ρ)`.
pub fn value_penalty_eval(mdp: &ParamMdp, x: &[f64], pi: &Policy, cert: &OracleCertificate) -> Result<f64> {
    value_penalty_at(&mdp.at(x)?, pi, cert)
}

/// `(−∇_x V^{π}(ρ) + ∇_x V^{π̂}(ρ), −∇_π V^{π}(ρ))`.
pub fn value_penalty_grad(
    mdp: &ParamMdp,
    x: &[f64],
    pi: &Policy,
    cert: &OracleCertificate,
    form: GradForm,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_form(mdp, form)?;
    let m = mdp.at(x)?;
    let direct = pi.to_direct();
    let gy = -m.policy_gradient(&direct)?;
    let g_pi = mdp.value_gradient_x(x, &direct)?;
    let g_hat = mdp.value_gradient_x(x, &cert.policy_hat)?;
    let gx = g_hat.iter().zip(&g_pi).map(|(a, b)| a - b).collect();
    Ok((gx, gy))
}

/// `q_s(x) = −Q^{π̂}(s,·)` for every state.
pub fn bellman_q(m: &TabularMdp, cert: &OracleCertificate) -> Result<DMatrix<f64>> {
    Ok(-m.q(&cert.policy_hat)?)
}

/// Closed-form `min_p ⟨p, q⟩ + τ h_s(p)` and its minimizer.
pub fn per_state_min(reg: &Regularizer, tau: f64, s: usize, q: &[f64]) -> Result<(f64, Vec<f64>)> {
    if tau <= 0.0 {
        return Err(PbrlError::Config("the Bellman penalty requires tau > 0".into()));
    }
    let neg: Vec<f64> = q.iter().map(|v| -v / tau).collect();
    match reg {
        Regularizer::None => Err(PbrlError::Config("the Bellman penalty requires a regularizer".into())),
        Regularizer::NegEntropy => Ok((-tau * logsumexp(&neg) + tau * (q.len() as f64).ln(), softmax_row(&neg))),
        Regularizer::KlToReference(r) => {
            let tilted: Vec<f64> = neg.iter().enumerate().map(|(a, v)| v + r[(s, a)].max(LOG_FLOOR).ln()).collect();
            Ok((-tau * logsumexp(&tilted), softmax_row(&tilted)))
        }
        Regularizer::SquaredL2 => {
            let p = project_simplex(&neg)?;
            let val = p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() + tau * reg.value(s, &p);
            Ok((val, p))
        }
    }
}

/// `g(x,y) = E_ρ[⟨y_s, q_s⟩ + τ h_s(y_s)]`.
pub fn bellman_g(m: &TabularMdp, q: &DMatrix<f64>, probs: &DMatrix<f64>) -> f64 {
    (0..m.n_states())
        .map(|s| {
            let y = row_vec(probs, s);
            let lin: f64 = y.iter().enumerate().map(|(a, p)| p * q[(s, a)]).sum();
            m.initial_dist[s] * (lin + m.tau * m.regularizer.value(s, &y))
        })
        .sum()
}

/// `v(x) = min_y g(x,y)` together with the minimizing policy.
pub fn bellman_v(m: &TabularMdp, q: &DMatrix<f64>) -> Result<(f64, Policy)> {
    let (n, k) = (m.n_states(), m.n_actions());
    let mut total = 0.0;
    let mut arg = DMatrix::zeros(n, k);
    for s in 0..n {
        let (v, p) = per_state_min(&m.regularizer, m.tau, s, &row_vec(q, s))?;
        total += m.initial_dist[s] * v;
        for a in 0..k {
            arg[(s, a)] = p[a];
        }
    }
    Ok((total, Policy::direct(arg)?))
}

fn require_direct(pi: &Policy) -> Result<()> {
    if pi.kind() != ParamKind::Direct {
        return Err(PbrlError::ContractViolation(
            "the Bellman penalty is defined for direct parameterization; materialize the policy first".into(),
        ));
    }
    Ok(())
}

/// `p(x,y) = g(x,y) − v(x)`.
pub fn bellman_penalty_eval(mdp: &ParamMdp, x: &[f64], pi: &Policy, cert: &OracleCertificate) -> Result<f64> {
    require_direct(pi)?;
    let m = mdp.at(x)?;
    m.check_policy(pi)?;
    if m.tau <= 0.0 {
        return Err(PbrlError::Config("the Bellman penalty requires tau > 0".into()));
    }
    let q = bellman_q(&m, cert)?;
    let (v, _) = bellman_v(&m, &q)?;
    clamp_penalty(bellman_g(&m, &q, pi.table()) - v, 0.0)
}

/// `argmin_y g(x, y)` for the oracle's `q`.
pub fn bellman_argmin(mdp: &ParamMdp, x: &[f64], cert: &OracleCertificate) -> Result<Policy> {
    let m = mdp.at(x)?;
    let q = bellman_q(&m, cert)?;
    Ok(bellman_v(&m, &q)?.1)
}

/// `(∇_x Σ ρ(s)(π̂ − y)(a|s) Q^{π̂}(s,a), ρ(s)(q_s + τ∇h_s(y_s)))`.
pub fn bellman_penalty_grad(
    mdp: &ParamMdp,
    x: &[f64],
    pi: &Policy,
    cert: &OracleCertificate,
    form: GradForm,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    require_direct(pi)?;
    check_form(mdp, form)?;
    let m = mdp.at(x)?;
    m.check_policy(pi)?;
    if m.tau <= 0.0 {
        return Err(PbrlError::Config("the Bellman penalty requires tau > 0".into()));
    }
    let (n, k) = (m.n_states(), m.n_actions());
    let q = bellman_q(&m, cert)?;
    let y = pi.table();
    let star = cert.policy_hat.table();
    let mut gy = DMatrix::zeros(n, k);
    for s in 0..n {
        let dh = m.regularizer.grad(s, &row_vec(y, s));
        for a in 0..k {
            gy[(s, a)] = m.initial_dist[s] * (q[(s, a)] + m.tau * dh[a]);
        }
    }
    let w = DMatrix::from_fn(n, k, |s, a| m.initial_dist[s] * (star[(s, a)] - y[(s, a)]));
    let gx = mdp.q_gradient_x(x, &cert.policy_hat, &w)?;
    Ok((gx, gy))
}

/// Penalty value and gradients of the requested single-agent kind.
pub fn penalty_eval(
    kind: PenaltyKind,
    mdp: &ParamMdp,
    x: &[f64],
    pi: &Policy,
    cert: &OracleCertificate,
    form: GradForm,
) -> Result<PenaltyEval> {
    let direct = pi.to_direct();
    let (value, (grad_x, grad_y)) = match kind {
        PenaltyKind::Value => (
            value_penalty_eval(mdp, x, &direct, cert)?,
            value_penalty_grad(mdp, x, &direct, cert, form)?,
        ),
        PenaltyKind::Bellman => (
            bellman_penalty_eval(mdp, x, &direct, cert)?,
            bellman_penalty_grad(mdp, x, &direct, cert, form)?,
        ),
        PenaltyKind::NikaidoIsoda => {
            return Err(PbrlError::Config("the Nikaido-Isoda penalty needs a zero-sum lower level".into()))
        }
    };
    Ok(PenaltyEval { value, grad_x, grad_y, oracle_cert: cert.clone() })
}

/// `F = f + λp` and `∇F = ∇f + λ∇̂p` (policy gradient in direct coordinates).
pub fn penalized_objective(
    upper: &dyn UpperObjective,
    spec: &PenaltySpec,
    mdp: &ParamMdp,
    x: &[f64],
    pi: &Policy,
    cert: &OracleCertificate,
    form: GradForm,
) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
    let direct = pi.to_direct();
    let f = upper.evaluate(x, &direct)?;
    let (mut gx, mut gy) = upper.grad(x, &direct)?;
    if spec.lambda == 0.0 {
        return Ok((f, gx, gy));
    }
    let pe = penalty_eval(spec.kind, mdp, x, &direct, cert, form)?;
    for (g, p) in gx.iter_mut().zip(&pe.grad_x) {
        *g += spec.lambda * p;
    }
    gy += pe.grad_y * spec.lambda;
    Ok((f + spec.lambda * pe.value, gx, gy))
}
