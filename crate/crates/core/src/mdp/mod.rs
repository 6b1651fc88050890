//! Parameterized regularized MDPs and exact tabular evaluation.
//!
//! Values solve `(I − γP^π) V = r^π − τ h^π` directly; visitation and
//! occupancy measures solve the transposed system.

mod maps;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{validation, PbrlError, Result};
use rand::Rng;

use crate::policy::{row_vec, sample_index, McConfig, ParamKind, Policy, Regularizer};

pub use maps::{
    sigmoid, ConstantMap, JointModel, MarginalRewardMap, MarginalTransitionMap, OffsetMap, ParamMap,
    SigmoidIncentiveMap,
};

/// Tolerance on transition and start-distribution sums.
pub const STOCHASTIC_TOL: f64 = 1e-12;

pub(crate) fn check_rows(probs: &[f64], width: usize) -> Result<()> {
    for (i, row) in probs.chunks(width).enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return validation(format!("transition row {i} has a negative or non-finite entry"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return validation(format!("transition row {i} sums to {sum}"));
        }
    }
    Ok(())
}

pub(crate) fn check_start(rho: &[f64], n_states: usize) -> Result<()> {
    if rho.len() != n_states {
        return validation("initial distribution has the wrong length");
    }
    if rho.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return validation("initial distribution must be strictly positive");
    }
    let sum: f64 = rho.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return validation(format!("initial distribution sums to {sum}"));
    }
    Ok(())
}

/// Dense `|S|×|A|×|S|` transition tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Transition {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return validation("state and action counts must be positive");
        }
        if probs.len() != n_states * n_actions * n_states {
            return validation("transition tensor has the wrong length");
        }
        check_rows(&probs, n_states)?;
        Ok(Transition { n_states, n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let o = (s * self.n_actions + a) * self.n_states;
        &self.probs[o..o + self.n_states]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// State-to-state matrix `P^π`.
    pub fn under_policy(&self, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n_states;
        let mut m = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = probs[(s, a)];
                if w == 0.0 {
                    continue;
                }
                for (t, p) in self.row(s, a).iter().enumerate() {
                    m[(s, t)] += w * p;
                }
            }
        }
        m
    }
}

/// Solves `a z = b` by LU with one step of iterative refinement.
pub(crate) fn solve_dense(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let lu = a.clone().lu();
    let rhs = DVector::from_column_slice(b);
    let mut z = lu.solve(&rhs).expect("I - γP is nonsingular for γ < 1");
    let r = &rhs - a * &z;
    if let Some(dz) = lu.solve(&r) {
        z += dz;
    }
    z.iter().cloned().collect()
}

/// An MDP with every tensor instantiated.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub gamma: f64,
    pub tau: f64,
    pub regularizer: Regularizer,
    /// `|S|×|A|`.
    pub reward: DMatrix<f64>,
    pub transition: Transition,
    pub initial_dist: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        gamma: f64,
        tau: f64,
        regularizer: Regularizer,
        reward: DMatrix<f64>,
        transition: Transition,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return validation(format!("gamma must lie in [0, 1), got {gamma}"));
        }
        regularizer.check_tau(tau)?;
        let (n, k) = (transition.n_states(), transition.n_actions());
        regularizer.check_shape(n, k)?;
        if reward.nrows() != n || reward.ncols() != k {
            return validation("reward table shape does not match the transition tensor");
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return validation("rewards must be finite");
        }
        check_start(&initial_dist, n)?;
        Ok(TabularMdp { gamma, tau, regularizer, reward, transition, initial_dist })
    }

    pub fn n_states(&self) -> usize {
        self.transition.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.transition.n_actions()
    }

    pub fn min_start(&self) -> f64 {
        self.initial_dist.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn check_policy(&self, pi: &Policy) -> Result<()> {
        if pi.n_states() != self.n_states() || pi.n_actions() != self.n_actions() {
            return validation(format!(
                "policy shape {}x{} does not match the MDP {}x{}",
                pi.n_states(),
                pi.n_actions(),
                self.n_states(),
                self.n_actions()
            ));
        }
        Ok(())
    }

    /// Per-state regularizer values `h_s(π(s))`.
    pub fn reg_values(&self, probs: &DMatrix<f64>) -> Vec<f64> {
        (0..self.n_states()).map(|s| self.regularizer.value(s, &row_vec(probs, s))).collect()
    }

    fn value_probs(&self, probs: &DMatrix<f64>) -> Vec<f64> {
        let n = self.n_states();
        let h = self.reg_values(probs);
        let b: Vec<f64> = (0..n)
            .map(|s| {
                (0..self.n_actions()).map(|a| probs[(s, a)] * self.reward[(s, a)]).sum::<f64>()
                    - self.tau * h[s]
            })
            .collect();
        let m = DMatrix::identity(n, n) - self.transition.under_policy(probs) * self.gamma;
        solve_dense(&m, &b)
    }

    /// `V^π` for every state.
    pub fn value(&self, pi: &Policy) -> Result<Vec<f64>> {
        self.check_policy(pi)?;
        Ok(self.value_probs(&pi.probs()))
    }

    /// `V^π(ρ)`.
    pub fn value_rho(&self, pi: &Policy) -> Result<f64> {
        Ok(dot(&self.value(pi)?, &self.initial_dist))
    }

    /// `Q(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) V(s')`.
    pub fn q_from_values(&self, v: &[f64]) -> DMatrix<f64> {
        let mut q = self.reward.clone();
        for s in 0..self.n_states() {
            for a in 0..self.n_actions() {
                q[(s, a)] += self.gamma * dot(self.transition.row(s, a), v);
            }
        }
        q
    }

    pub fn q(&self, pi: &Policy) -> Result<DMatrix<f64>> {
        Ok(self.q_from_values(&self.value(pi)?))
    }

    pub fn value_and_q(&self, pi: &Policy) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let v = self.value(pi)?;
        let q = self.q_from_values(&v);
        Ok((v, q))
    }

    /// Solves `(I − γ(P^π)ᵀ) m = w` for an arbitrary (possibly signed) weight `w`.
    pub fn occupancy(&self, probs: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
        let n = self.n_states();
        let m = DMatrix::identity(n, n) - self.transition.under_policy(probs).transpose() * self.gamma;
        solve_dense(&m, w)
    }

    /// Normalized discounted visitation `(1−γ)(I − γ(P^π)ᵀ)⁻¹ start`.
    pub fn visitation(&self, pi: &Policy, start: &[f64]) -> Result<Vec<f64>> {
        self.check_policy(pi)?;
        if start.len() != self.n_states() || start.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return validation("start must be a probability vector over states");
        }
        if (start.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return validation("start must sum to one");
        }
        let m = self.occupancy(&pi.probs(), start);
        Ok(m.into_iter().map(|v| (1.0 - self.gamma) * v).collect())
    }

    /// Direct-parameterization gradient of `V^π(ρ)`:
    /// `(1/(1−γ)) d(s) (Q(s,a) − τ ∂h_s/∂π(a|s))`.
    pub fn policy_gradient(&self, pi: &Policy) -> Result<DMatrix<f64>> {
        if pi.kind() != ParamKind::Direct {
            return Err(PbrlError::ContractViolation(
                "the exact policy gradient is taken with respect to direct parameters; \
                 chain softmax logits with softmax_chain_gradient"
                    .into(),
            ));
        }
        self.check_policy(pi)?;
        Ok(self.policy_gradient_probs(pi.table()))
    }

    pub(crate) fn policy_gradient_probs(&self, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let v = self.value_probs(probs);
        let q = self.q_from_values(&v);
        let m = self.occupancy(probs, &self.initial_dist);
        let mut g = DMatrix::zeros(self.n_states(), self.n_actions());
        for s in 0..self.n_states() {
            let dh = self.regularizer.grad(s, &row_vec(probs, s));
            for a in 0..self.n_actions() {
                g[(s, a)] = m[s] * (q[(s, a)] - self.tau * dh[a]);
            }
        }
        g
    }

    /// `max_s |V(s) − Σ_a π(a|s) Q(s,a) + τ h_s(π(s))|`.
    pub fn bellman_residual(&self, pi: &Policy, v: &[f64], q: &DMatrix<f64>) -> f64 {
        let probs = pi.probs();
        let h = self.reg_values(&probs);
        (0..self.n_states())
            .map(|s| {
                let e: f64 = (0..self.n_actions()).map(|a| probs[(s, a)] * q[(s, a)]).sum();
                (v[s] - e + self.tau * h[s]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `max_{π'} ⟨∇_π V^π(ρ), π' − π⟩`, solved state by state.
    pub fn linearized_improvement(&self, pi: &Policy) -> Result<f64> {
        let probs = pi.probs();
        self.check_policy(pi)?;
        let g = self.policy_gradient_probs(&probs);
        Ok((0..self.n_states())
            .map(|s| {
                let best = (0..self.n_actions()).map(|a| g[(s, a)]).fold(f64::NEG_INFINITY, f64::max);
                let cur: f64 = (0..self.n_actions()).map(|a| g[(s, a)] * probs[(s, a)]).sum();
                best - cur
            })
            .sum())
    }

    /// Upper bound on `V*(ρ) − V^π(ρ)` from gradient dominance:
    /// the linearized improvement divided by `(1−γ) min_s ρ(s)`.
    pub fn dominance_gap_bound(&self, pi: &Policy) -> Result<f64> {
        Ok(self.linearized_improvement(pi)?.max(0.0) / ((1.0 - self.gamma) * self.min_start()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How the dynamics depend on `x`, which fixes the available `x`-gradient formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    /// Only the reward depends on `x`.
    RewardOnly,
    /// Follower view of a two-player game; `x` are the leader's softmax logits.
    LeaderMarginal,
    /// Transition depends on `x` through a map without a known gradient form.
    GeneralTransition,
}

/// A regularized MDP whose reward and transition depend on an upper-level parameter.
#[derive(Clone)]
pub struct ParamMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    tau: f64,
    regularizer: Regularizer,
    reward_map: Arc<dyn ParamMap>,
    transition_map: Arc<dyn ParamMap>,
    initial_dist: Vec<f64>,
    score_form: Option<Arc<JointModel>>,
}

impl fmt::Debug for ParamMdp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamMdp")
            .field("n_states", &self.n_states)
            .field("n_actions", &self.n_actions)
            .field("gamma", &self.gamma)
            .field("tau", &self.tau)
            .field("regularizer", &self.regularizer)
            .field("structure", &self.structure())
            .finish()
    }
}

impl ParamMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        tau: f64,
        regularizer: Regularizer,
        reward_map: Arc<dyn ParamMap>,
        transition_map: Arc<dyn ParamMap>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return validation("state and action counts must be positive");
        }
        if !(0.0..1.0).contains(&gamma) {
            return validation(format!("gamma must lie in [0, 1), got {gamma}"));
        }
        regularizer.check_tau(tau)?;
        regularizer.check_shape(n_states, n_actions)?;
        if reward_map.output_len() != n_states * n_actions {
            return validation("reward map output does not match |S|x|A|");
        }
        if transition_map.output_len() != n_states * n_actions * n_states {
            return validation("transition map output does not match |S|x|A|x|S|");
        }
        if reward_map.dim_x() != transition_map.dim_x() {
            return validation("reward and transition maps disagree on dim_x");
        }
        check_start(&initial_dist, n_states)?;
        if transition_map.is_constant() {
            check_rows(&transition_map.evaluate(&vec![0.0; transition_map.dim_x()]), n_states)?;
        }
        Ok(ParamMdp {
            n_states,
            n_actions,
            gamma,
            tau,
            regularizer,
            reward_map,
            transition_map,
            initial_dist,
            score_form: None,
        })
    }

    /// Reward-only parameterization over a fixed transition tensor.
    pub fn with_reward_map(
        gamma: f64,
        tau: f64,
        regularizer: Regularizer,
        reward_map: Arc<dyn ParamMap>,
        transition: Transition,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let dim_x = reward_map.dim_x();
        let p = ConstantMap { dim_x, values: transition.as_slice().to_vec() };
        ParamMdp::new(
            transition.n_states(),
            transition.n_actions(),
            gamma,
            tau,
            regularizer,
            reward_map,
            Arc::new(p),
            initial_dist,
        )
    }

    /// Player `b`'s view of `model` with player `a`'s softmax policy (logits `x`) folded in.
    pub fn leader_marginal(
        model: Arc<JointModel>,
        gamma: f64,
        tau: f64,
        regularizer: Regularizer,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mut mdp = ParamMdp::new(
            model.n_states,
            model.n_b,
            gamma,
            tau,
            regularizer,
            Arc::new(MarginalRewardMap { model: model.clone() }),
            Arc::new(MarginalTransitionMap { model: model.clone() }),
            initial_dist,
        )?;
        mdp.score_form = Some(model);
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn regularizer(&self) -> &Regularizer {
        &self.regularizer
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }
    pub fn dim_x(&self) -> usize {
        self.reward_map.dim_x()
    }
    pub fn reward_map(&self) -> &Arc<dyn ParamMap> {
        &self.reward_map
    }
    pub fn transition_map(&self) -> &Arc<dyn ParamMap> {
        &self.transition_map
    }
    pub fn joint_model(&self) -> Option<&Arc<JointModel>> {
        self.score_form.as_ref()
    }

    pub fn structure(&self) -> Structure {
        if self.transition_map.is_constant() {
            Structure::RewardOnly
        } else if self.score_form.is_some() {
            Structure::LeaderMarginal
        } else {
            Structure::GeneralTransition
        }
    }

    /// Instantiates `M_τ(x)`.
    pub fn at(&self, x: &[f64]) -> Result<TabularMdp> {
        self.check_x(x)?;
        let r = self.reward_map.evaluate(x);
        let reward = DMatrix::from_row_slice(self.n_states, self.n_actions, &r);
        let transition = Transition::new(self.n_states, self.n_actions, self.transition_map.evaluate(x))?;
        TabularMdp::new(self.gamma, self.tau, self.regularizer.clone(), reward, transition, self.initial_dist.clone())
    }

    pub(crate) fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim_x() {
            return validation(format!("x has length {}, expected {}", x.len(), self.dim_x()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return validation("x must be finite");
        }
        Ok(())
    }

    /// `∇_x Σ_{s,a} W(s,a) [r_x(s,a) + γ P_x(·|s,a)ᵀ V]` with `V` held fixed.
    fn dynamics_contract(&self, x: &[f64], mdp: &TabularMdp, w: &DMatrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
        match self.structure() {
            Structure::RewardOnly => {
                let flat: Vec<f64> = (0..self.n_states)
                    .flat_map(|s| (0..self.n_actions).map(move |a| (s, a)))
                    .map(|(s, a)| w[(s, a)])
                    .collect();
                Ok(self.reward_map.grad_contract(x, &flat))
            }
            Structure::LeaderMarginal => {
                let m = self.score_form.as_ref().expect("leader-marginal structure");
                let lead = m.lead_probs(x);
                let mut g = vec![0.0; self.dim_x()];
                for s in 0..m.n_states {
                    for b in 0..m.n_b {
                        let wsb = w[(s, b)];
                        if wsb == 0.0 {
                            continue;
                        }
                        let qj: Vec<f64> =
                            (0..m.n_a).map(|a| m.r(s, a, b) + mdp.gamma * dot(m.p_row(s, a, b), v)).collect();
                        let mean: f64 = (0..m.n_a).map(|a| lead[s][a] * qj[a]).sum();
                        for c in 0..m.n_a {
                            g[s * m.n_a + c] += wsb * lead[s][c] * (qj[c] - mean);
                        }
                    }
                }
                Ok(g)
            }
            Structure::GeneralTransition => Err(PbrlError::UnsupportedStructure(
                "x-dependent transitions need a registered score-function form".into(),
            )),
        }
    }

    /// `∇_x V^π(ρ)` holding the policy fixed.
    pub fn value_gradient_x(&self, x: &[f64], pi: &Policy) -> Result<Vec<f64>> {
        let mdp = self.at(x)?;
        mdp.check_policy(pi)?;
        let probs = pi.probs();
        let v = mdp.value_probs(&probs);
        let m = mdp.occupancy(&probs, &self.initial_dist);
        let w = DMatrix::from_fn(self.n_states, self.n_actions, |s, a| m[s] * probs[(s, a)]);
        self.dynamics_contract(x, &mdp, &w, &v)
    }

    /// `∇_x Σ_{s,a} w(s,a) Q^π(s,a)` holding the policy fixed.
    pub fn q_gradient_x(&self, x: &[f64], pi: &Policy, w: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mdp = self.at(x)?;
        mdp.check_policy(pi)?;
        let probs = pi.probs();
        let v = mdp.value_probs(&probs);
        let n = self.n_states;
        let mut mu = vec![0.0; n];
        for s in 0..n {
            for a in 0..self.n_actions {
                if w[(s, a)] != 0.0 {
                    for (t, p) in mdp.transition.row(s, a).iter().enumerate() {
                        mu[t] += self.gamma * w[(s, a)] * p;
                    }
                }
            }
        }
        let m = mdp.occupancy(&probs, &mu);
        let big_w = DMatrix::from_fn(n, self.n_actions, |s, a| w[(s, a)] + m[s] * probs[(s, a)]);
        self.dynamics_contract(x, &mdp, &big_w, &v)
    }
}

impl ParamMdp {
    /// Sampled `∇_x V^π(ρ)`: occupancy-weighted reward gradients, or the
    /// leader score-function estimator on the joint chain.
    pub fn value_gradient_x_mc(&self, x: &[f64], pi: &Policy, cfg: &McConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
        cfg.validate()?;
        let mdp = self.at(x)?;
        mdp.check_policy(pi)?;
        let probs = pi.probs();
        let (n, k) = (self.n_states, self.n_actions);
        match self.structure() {
            Structure::RewardOnly => {
                let mut w = vec![0.0; n * k];
                for _ in 0..cfg.batch {
                    let mut s = sample_index(rng, &self.initial_dist);
                    let mut disc = 1.0;
                    for _ in 0..cfg.traj_len {
                        let a = sample_index(rng, &row_vec(&probs, s));
                        w[s * k + a] += disc;
                        s = sample_index(rng, mdp.transition.row(s, a));
                        disc *= self.gamma;
                    }
                }
                let w: Vec<f64> = w.into_iter().map(|v| v / cfg.batch as f64).collect();
                Ok(self.reward_map.grad_contract(x, &w))
            }
            Structure::LeaderMarginal => {
                let m = self.score_form.as_ref().expect("leader-marginal structure");
                let lead = m.lead_probs(x);
                let cost: Vec<f64> = (0..n).map(|s| self.tau * self.regularizer.value(s, &row_vec(&probs, s))).collect();
                let mut g = vec![0.0; self.dim_x()];
                for _ in 0..cfg.batch {
                    let mut path = Vec::with_capacity(cfg.traj_len);
                    let mut s = sample_index(rng, &self.initial_dist);
                    for _ in 0..cfg.traj_len {
                        let a = sample_index(rng, &lead[s]);
                        let b = sample_index(rng, &row_vec(&probs, s));
                        path.push((s, a, m.r(s, a, b) - cost[s]));
                        s = sample_index(rng, m.p_row(s, a, b));
                    }
                    let mut tail = 0.0;
                    for (t, &(s, a, r)) in path.iter().enumerate().rev() {
                        tail = r + self.gamma * tail;
                        let w = self.gamma.powi(t as i32) * tail;
                        for c in 0..m.n_a {
                            let ind = if c == a { 1.0 } else { 0.0 };
                            g[s * m.n_a + c] += w * (ind - lead[s][c]);
                        }
                    }
                }
                Ok(g.into_iter().map(|v| v / cfg.batch as f64).collect())
            }
            Structure::GeneralTransition => Err(PbrlError::UnsupportedStructure(
                "x-dependent transitions need a registered score-function form".into(),
            )),
        }
    }
}

/// `V^π` of `M_τ(x)`.
pub fn evaluate_value_exact(mdp: &ParamMdp, x: &[f64], pi: &Policy) -> Result<Vec<f64>> {
    mdp.at(x)?.value(pi)
}

/// `Q^π` of `M_τ(x)`.
pub fn evaluate_q_exact(mdp: &ParamMdp, x: &[f64], pi: &Policy) -> Result<DMatrix<f64>> {
    mdp.at(x)?.q(pi)
}

/// Discounted visitation distribution `d^π_start`.
pub fn visitation_distribution(mdp: &ParamMdp, x: &[f64], pi: &Policy, start: &[f64]) -> Result<Vec<f64>> {
    mdp.at(x)?.visitation(pi, start)
}

/// Direct-parameterization gradient of `V^π(ρ)`.
pub fn policy_gradient_exact(mdp: &ParamMdp, x: &[f64], pi: &Policy) -> Result<DMatrix<f64>> {
    mdp.at(x)?.policy_gradient(pi)
}

/// `∇_x V^π(ρ)` using the structure-appropriate formula.
pub fn value_gradient_x_exact(mdp: &ParamMdp, x: &[f64], pi: &Policy) -> Result<Vec<f64>> {
    mdp.value_gradient_x(x, pi)
}
