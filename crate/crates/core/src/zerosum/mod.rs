//! Parameterized two-player zero-sum Markov games and the Nikaido–Isoda penalty.
//!
//! Player 1 maximizes and player 2 minimizes
//! `V = E[Σ γᵗ (r_x − τ h(π₁) + τ h(π₂))]`.

mod lp;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Result};
use crate::mdp::{check_rows, check_start, solve_dense, ParamMap, TabularMdp, Transition};
use crate::oracle::{OracleCertificate, OracleSpec};
use crate::penalty::clamp_penalty;
use crate::policy::{row_vec, sample_index, McConfig, Policy, Regularizer};

pub use lp::{matrix_game_lp_oracle, MatrixGameSolution};

#[derive(Clone, Debug)]
pub struct ZeroSumGame {
    pub n_states: usize,
    pub n1: usize,
    pub n2: usize,
    pub gamma: f64,
    pub tau: f64,
    pub reg1: Regularizer,
    pub reg2: Regularizer,
    /// `x ↦ r_x`, indexed `(s, a₁, a₂)`.
    pub reward_map: Arc<dyn ParamMap>,
    /// `(s, a₁, a₂, s')` row-major.
    transition: Vec<f64>,
    pub initial_dist: Vec<f64>,
}

/// The product policy `(π₁, π₂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPolicy {
    pub pi1: Policy,
    pub pi2: Policy,
}

impl JointPolicy {
    pub fn uniform(n_states: usize, n1: usize, n2: usize) -> Self {
        JointPolicy { pi1: Policy::uniform(n_states, n1), pi2: Policy::uniform(n_states, n2) }
    }

    pub fn to_direct(&self) -> JointPolicy {
        JointPolicy { pi1: self.pi1.to_direct(), pi2: self.pi2.to_direct() }
    }
}

impl ZeroSumGame {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n1: usize,
        n2: usize,
        gamma: f64,
        tau: f64,
        reg1: Regularizer,
        reg2: Regularizer,
        reward_map: Arc<dyn ParamMap>,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n1 == 0 || n2 == 0 {
            return validation("state and action counts must be positive");
        }
        if !(0.0..1.0).contains(&gamma) {
            return validation(format!("gamma must lie in [0, 1), got {gamma}"));
        }
        reg1.check_tau(tau)?;
        reg2.check_tau(tau)?;
        reg1.check_shape(n_states, n1)?;
        reg2.check_shape(n_states, n2)?;
        if reward_map.output_len() != n_states * n1 * n2 {
            return validation("reward map output does not match |S|x|A1|x|A2|");
        }
        if transition.len() != n_states * n1 * n2 * n_states {
            return validation("transition tensor has the wrong length");
        }
        check_rows(&transition, n_states)?;
        check_start(&initial_dist, n_states)?;
        Ok(ZeroSumGame { n_states, n1, n2, gamma, tau, reg1, reg2, reward_map, transition, initial_dist })
    }

    pub fn dim_x(&self) -> usize {
        self.reward_map.dim_x()
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    #[inline]
    pub fn p_row(&self, s: usize, a1: usize, a2: usize) -> &[f64] {
        let o = ((s * self.n1 + a1) * self.n2 + a2) * self.n_states;
        &self.transition[o..o + self.n_states]
    }

    fn reward_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim_x() || x.iter().any(|v| !v.is_finite()) {
            return validation("x must be finite with length dim_x");
        }
        Ok(self.reward_map.evaluate(x))
    }

    fn check_joint(&self, joint: &JointPolicy) -> Result<()> {
        let ok = joint.pi1.n_states() == self.n_states
            && joint.pi2.n_states() == self.n_states
            && joint.pi1.n_actions() == self.n1
            && joint.pi2.n_actions() == self.n2;
        if ok {
            Ok(())
        } else {
            validation("joint policy shape does not match the game")
        }
    }

    /// Player 1's MDP with `π₂` folded in (maximizes `V`).
    pub fn player1_view(&self, x: &[f64], pi2: &Policy) -> Result<TabularMdp> {
        let r = self.reward_at(x)?;
        let q = pi2.probs();
        let (n, n1, n2) = (self.n_states, self.n1, self.n2);
        let mut reward = DMatrix::zeros(n, n1);
        let mut trans = vec![0.0; n * n1 * n];
        for s in 0..n {
            let y = row_vec(&q, s);
            let bonus = self.tau * self.reg2.value(s, &y);
            for a1 in 0..n1 {
                let o = (s * n1 + a1) * n;
                let mut acc = bonus;
                for a2 in 0..n2 {
                    acc += y[a2] * r[(s * n1 + a1) * n2 + a2];
                    for (t, p) in self.p_row(s, a1, a2).iter().enumerate() {
                        trans[o + t] += y[a2] * p;
                    }
                }
                reward[(s, a1)] = acc;
            }
        }
        TabularMdp::new(self.gamma, self.tau, self.reg1.clone(), reward, Transition::new(n, n1, trans)?, self.initial_dist.clone())
    }

    /// Player 2's MDP with `π₁` folded in (maximizes `−V`).
    pub fn player2_view(&self, x: &[f64], pi1: &Policy) -> Result<TabularMdp> {
        let r = self.reward_at(x)?;
        let p1 = pi1.probs();
        let (n, n1, n2) = (self.n_states, self.n1, self.n2);
        let mut reward = DMatrix::zeros(n, n2);
        let mut trans = vec![0.0; n * n2 * n];
        for s in 0..n {
            let y = row_vec(&p1, s);
            let bonus = self.tau * self.reg1.value(s, &y);
            for a2 in 0..n2 {
                let o = (s * n2 + a2) * n;
                let mut acc = bonus;
                for a1 in 0..n1 {
                    acc -= y[a1] * r[(s * n1 + a1) * n2 + a2];
                    for (t, p) in self.p_row(s, a1, a2).iter().enumerate() {
                        trans[o + t] += y[a1] * p;
                    }
                }
                reward[(s, a2)] = acc;
            }
        }
        TabularMdp::new(self.gamma, self.tau, self.reg2.clone(), reward, Transition::new(n, n2, trans)?, self.initial_dist.clone())
    }

    /// `V^{π₁,π₂}` by a linear solve on the joint chain.
    pub fn values(&self, x: &[f64], joint: &JointPolicy) -> Result<Vec<f64>> {
        self.check_joint(joint)?;
        let r = self.reward_at(x)?;
        let (p1, p2) = (joint.pi1.probs(), joint.pi2.probs());
        let (n, n1, n2) = (self.n_states, self.n1, self.n2);
        let mut m = DMatrix::identity(n, n);
        let mut b = vec![0.0; n];
        for s in 0..n {
            b[s] = -self.tau * self.reg1.value(s, &row_vec(&p1, s)) + self.tau * self.reg2.value(s, &row_vec(&p2, s));
            for a1 in 0..n1 {
                for a2 in 0..n2 {
                    let w = p1[(s, a1)] * p2[(s, a2)];
                    b[s] += w * r[(s * n1 + a1) * n2 + a2];
                    for (t, p) in self.p_row(s, a1, a2).iter().enumerate() {
                        m[(s, t)] -= self.gamma * w * p;
                    }
                }
            }
        }
        Ok(solve_dense(&m, &b))
    }

    pub fn value_rho(&self, x: &[f64], joint: &JointPolicy) -> Result<f64> {
        Ok(self.values(x, joint)?.iter().zip(&self.initial_dist).map(|(a, b)| a * b).sum())
    }

    /// `∇_x V^{π₁,π₂}(ρ) = Σ m(s) π₁(a₁|s) π₂(a₂|s) ∇r_x(s,a₁,a₂)`.
    pub fn value_gradient_x(&self, x: &[f64], joint: &JointPolicy) -> Result<Vec<f64>> {
        let view = self.player1_view(x, &joint.pi2)?;
        let (p1, p2) = (joint.pi1.probs(), joint.pi2.probs());
        let m = view.occupancy(&p1, &self.initial_dist);
        let w = self.joint_weights(&m, &p1, &p2);
        Ok(self.reward_map.grad_contract(x, &w))
    }

    fn joint_weights(&self, m: &[f64], p1: &DMatrix<f64>, p2: &DMatrix<f64>) -> Vec<f64> {
        let (n1, n2) = (self.n1, self.n2);
        let mut w = vec![0.0; self.n_states * n1 * n2];
        for s in 0..self.n_states {
            for a1 in 0..n1 {
                for a2 in 0..n2 {
                    w[(s * n1 + a1) * n2 + a2] = m[s] * p1[(s, a1)] * p2[(s, a2)];
                }
            }
        }
        w
    }

    /// Sampled discounted joint occupancy, truncated at `cfg.traj_len`.
    pub fn mc_occupancy(&self, joint: &JointPolicy, cfg: &McConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
        cfg.validate()?;
        let (p1, p2) = (joint.pi1.probs(), joint.pi2.probs());
        let (n1, n2) = (self.n1, self.n2);
        let mut w = vec![0.0; self.n_states * n1 * n2];
        for _ in 0..cfg.batch {
            let mut s = sample_index(rng, &self.initial_dist);
            let mut disc = 1.0;
            for _ in 0..cfg.traj_len {
                let a1 = sample_index(rng, &row_vec(&p1, s));
                let a2 = sample_index(rng, &row_vec(&p2, s));
                w[(s * n1 + a1) * n2 + a2] += disc;
                s = sample_index(rng, self.p_row(s, a1, a2));
                disc *= self.gamma;
            }
        }
        Ok(w.into_iter().map(|v| v / cfg.batch as f64).collect())
    }
}

/// `V^{π₁,π₂}` for every state.
pub fn zs_value_eval(game: &ZeroSumGame, x: &[f64], joint: &JointPolicy) -> Result<Vec<f64>> {
    game.values(x, joint)
}

/// Best responses `(π̂₁ against π₂, π̂₂ against π₁)` from single-agent solves.
pub fn best_responses(
    game: &ZeroSumGame,
    x: &[f64],
    joint: &JointPolicy,
    oracle: &OracleSpec,
    warm: Option<&JointPolicy>,
) -> Result<(OracleCertificate, OracleCertificate)> {
    let v1 = game.player1_view(x, &joint.pi2)?;
    let v2 = game.player2_view(x, &joint.pi1)?;
    let c1 = oracle.solve(&v1, warm.map(|w| &w.pi1))?;
    let c2 = oracle.solve(&v2, warm.map(|w| &w.pi2))?;
    Ok((c1, c2))
}

/// `ψ = V(π̂₁, π₂) − V(π₁, π̂₂)`.
pub fn ni_eval(
    game: &ZeroSumGame,
    x: &[f64],
    joint: &JointPolicy,
    cert1: &OracleCertificate,
    cert2: &OracleCertificate,
) -> Result<f64> {
    game.check_joint(joint)?;
    let v1 = game.player1_view(x, &joint.pi2)?;
    let v2 = game.player2_view(x, &joint.pi1)?;
    let psi = v1.value_rho(&cert1.policy_hat)? + v2.value_rho(&cert2.policy_hat)?;
    let gap = cert1.value_gap_bound(&v1)? + cert2.value_gap_bound(&v2)?;
    clamp_penalty(psi, gap)
}

/// Gradients of `ψ` with respect to `x` and both direct policies.
#[derive(Clone, Debug, PartialEq)]
pub struct NiGrad {
    pub grad_x: Vec<f64>,
    pub grad_pi1: DMatrix<f64>,
    pub grad_pi2: DMatrix<f64>,
}

/// `(∇_x V^{π̂₁,π₂} − ∇_x V^{π₁,π̂₂}, −∇_{π₁} V^{π₁,π̂₂}, ∇_{π₂} V^{π̂₁,π₂})`.
pub fn ni_grad(
    game: &ZeroSumGame,
    x: &[f64],
    joint: &JointPolicy,
    cert1: &OracleCertificate,
    cert2: &OracleCertificate,
) -> Result<NiGrad> {
    game.check_joint(joint)?;
    let joint = joint.to_direct();
    let dev1 = JointPolicy { pi1: cert1.policy_hat.clone(), pi2: joint.pi2.clone() };
    let dev2 = JointPolicy { pi1: joint.pi1.clone(), pi2: cert2.policy_hat.clone() };
    let gx1 = game.value_gradient_x(x, &dev1)?;
    let gx2 = game.value_gradient_x(x, &dev2)?;
    // player 1's view against π̂₂ has value V(·, π̂₂)
    let grad_pi1 = -game.player1_view(x, &cert2.policy_hat)?.policy_gradient(&joint.pi1)?;
    // player 2's view against π̂₁ has value −V(π̂₁, ·)
    let grad_pi2 = -game.player2_view(x, &cert1.policy_hat)?.policy_gradient(&joint.pi2)?;
    Ok(NiGrad { grad_x: gx1.iter().zip(&gx2).map(|(a, b)| a - b).collect(), grad_pi1, grad_pi2 })
}

/// Sampled version of [`ni_grad`].
pub fn ni_grad_mc(
    game: &ZeroSumGame,
    x: &[f64],
    joint: &JointPolicy,
    cert1: &OracleCertificate,
    cert2: &OracleCertificate,
    cfg: &McConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NiGrad> {
    use crate::policy::mc_policy_gradient_with;
    game.check_joint(joint)?;
    let joint = joint.to_direct();
    let dev1 = JointPolicy { pi1: cert1.policy_hat.clone(), pi2: joint.pi2.clone() };
    let dev2 = JointPolicy { pi1: joint.pi1.clone(), pi2: cert2.policy_hat.clone() };
    let o1 = game.mc_occupancy(&dev1, cfg, rng)?;
    let o2 = game.mc_occupancy(&dev2, cfg, rng)?;
    let w: Vec<f64> = o1.iter().zip(&o2).map(|(a, b)| a - b).collect();
    let grad_x = game.reward_map.grad_contract(x, &w);
    let grad_pi1 = -mc_policy_gradient_with(&game.player1_view(x, &cert2.policy_hat)?, &joint.pi1, cfg, rng)?;
    let grad_pi2 = -mc_policy_gradient_with(&game.player2_view(x, &cert1.policy_hat)?, &joint.pi2, cfg, rng)?;
    Ok(NiGrad { grad_x, grad_pi1, grad_pi2 })
}

/// Exact NE gap using tight best responses.
pub fn ne_gap(game: &ZeroSumGame, x: &[f64], joint: &JointPolicy) -> Result<f64> {
    let (c1, c2) = best_responses(game, x, joint, &OracleSpec::Tight, None)?;
    ni_eval(game, x, joint, &c1, &c2)
}

/// `max_{π'} ⟨∇_π ψ, π − π'⟩`, solved state by state.
pub fn ni_linearized_decrease(joint: &JointPolicy, g: &NiGrad) -> f64 {
    let part = |pi: &Policy, gm: &DMatrix<f64>| -> f64 {
        let p = pi.probs();
        (0..p.nrows())
            .map(|s| {
                let cur: f64 = (0..p.ncols()).map(|a| gm[(s, a)] * p[(s, a)]).sum();
                let low = (0..p.ncols()).map(|a| gm[(s, a)]).fold(f64::INFINITY, f64::min);
                cur - low
            })
            .sum()
    };
    part(&joint.pi1, &g.grad_pi1) + part(&joint.pi2, &g.grad_pi2)
}

/// Upper-level objective over a zero-sum lower level.
pub trait GameUpperObjective: Send + Sync {
    fn evaluate(&self, x: &[f64], joint: &JointPolicy) -> Result<f64>;

    /// `(∇_x f, ∇_{π₁} f, ∇_{π₂} f)` in direct coordinates.
    fn grad(&self, x: &[f64], joint: &JointPolicy) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)>;

    fn grad_mc(
        &self,
        x: &[f64],
        joint: &JointPolicy,
        _cfg: &McConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        self.grad(x, joint)
    }

    fn estimates(&self) -> usize {
        2
    }

    fn metric(&self, x: &[f64], joint: &JointPolicy) -> Result<f64> {
        Ok(-self.evaluate(x, joint)?)
    }

    fn metric_name(&self) -> &'static str {
        "neg_f"
    }
}

/// A bilevel problem whose lower level is a zero-sum game.
#[derive(Clone)]
pub struct ZeroSumBilevelProblem {
    pub game: Arc<ZeroSumGame>,
    pub upper: Arc<dyn GameUpperObjective>,
    pub x0: Vec<f64>,
    pub init: Option<JointPolicy>,
}
