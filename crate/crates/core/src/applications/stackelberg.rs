use std::sync::Arc;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Result};
use crate::mdp::{solve_dense, JointModel, ParamMdp, TabularMdp, Transition};
use crate::policy::{mc_policy_gradient_with, row_vec, softmax_chain_gradient, McConfig, Policy, Regularizer};

use super::UpperObjective;

/// Whose reward a view or value refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Payoff {
    Leader,
    Follower,
}

/// A two-player Markov game with a softmax leader (logits `x`, shape `|S|×|A_l|`).
#[derive(Clone, Debug)]
pub struct StackelbergGame {
    pub n_states: usize,
    pub n_leader: usize,
    pub n_follower: usize,
    pub gamma: f64,
    pub tau: f64,
    pub reg_leader: Regularizer,
    pub reg_follower: Regularizer,
    /// `(s, a_l, a_f)` row-major.
    pub r_leader: Vec<f64>,
    /// Follower reward and joint transition, indexed `(s, a_l, a_f[, s'])`.
    pub follower: Arc<JointModel>,
    pub initial_dist: Vec<f64>,
    reduced: ParamMdp,
}

impl StackelbergGame {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_leader: usize,
        n_follower: usize,
        gamma: f64,
        tau: f64,
        reg_leader: Regularizer,
        reg_follower: Regularizer,
        r_leader: Vec<f64>,
        r_follower: Vec<f64>,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if r_leader.len() != n_states * n_leader * n_follower {
            return validation("leader reward tensor has the wrong length");
        }
        if r_leader.iter().chain(&r_follower).any(|r| !r.is_finite()) {
            return validation("rewards must be finite");
        }
        reg_leader.check_tau(tau)?;
        let follower = Arc::new(JointModel::new(n_states, n_leader, n_follower, r_follower, transition)?);
        let reduced =
            ParamMdp::leader_marginal(follower.clone(), gamma, tau, reg_follower.clone(), initial_dist.clone())?;
        Ok(StackelbergGame {
            n_states,
            n_leader,
            n_follower,
            gamma,
            tau,
            reg_leader,
            reg_follower,
            r_leader,
            follower,
            initial_dist,
            reduced,
        })
    }

    pub fn dim_x(&self) -> usize {
        self.n_states * self.n_leader
    }

    /// The follower's parameterized MDP (leader folded into the environment).
    pub fn follower_mdp(&self) -> &ParamMdp {
        &self.reduced
    }

    pub fn leader_logits(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.dim_x() {
            return validation(format!("leader logits have length {}, expected {}", x.len(), self.dim_x()));
        }
        Ok(DMatrix::from_row_slice(self.n_states, self.n_leader, x))
    }

    pub fn leader_policy(&self, x: &[f64]) -> Result<Policy> {
        Policy::softmax(self.leader_logits(x)?)
    }

    fn reward(&self, who: Payoff, s: usize, l: usize, f: usize) -> f64 {
        match who {
            Payoff::Leader => self.r_leader[(s * self.n_leader + l) * self.n_follower + f],
            Payoff::Follower => self.follower.r(s, l, f),
        }
    }

    fn own_reg(&self, who: Payoff) -> &Regularizer {
        match who {
            Payoff::Leader => &self.reg_leader,
            Payoff::Follower => &self.reg_follower,
        }
    }

    /// Leader-side MDP for `who`'s payoff with the follower's policy folded in.
    ///
    /// For the leader's own payoff the leader regularizer applies; for the
    /// follower's payoff the follower's regularization is a state cost and the
    /// leader's policy is unregularized.
    pub fn leader_view(&self, pi_y: &DMatrix<f64>, who: Payoff) -> Result<TabularMdp> {
        let (n, nl, nf) = (self.n_states, self.n_leader, self.n_follower);
        let mut reward = DMatrix::zeros(n, nl);
        let mut trans = vec![0.0; n * nl * n];
        for s in 0..n {
            let y = row_vec(pi_y, s);
            let cost = if who == Payoff::Follower { self.tau * self.reg_follower.value(s, &y) } else { 0.0 };
            for l in 0..nl {
                let mut r = -cost;
                let o = (s * nl + l) * n;
                for f in 0..nf {
                    r += y[f] * self.reward(who, s, l, f);
                    for (t, p) in self.follower.p_row(s, l, f).iter().enumerate() {
                        trans[o + t] += y[f] * p;
                    }
                }
                reward[(s, l)] = r;
            }
        }
        let (tau, reg) = match who {
            Payoff::Leader => (self.tau, self.reg_leader.clone()),
            Payoff::Follower => (0.0, Regularizer::None),
        };
        TabularMdp::new(self.gamma, tau, reg, reward, Transition::new(n, nl, trans)?, self.initial_dist.clone())
    }

    /// Follower-side MDP for `who`'s payoff with the leader's policy folded in.
    pub fn follower_view(&self, x: &[f64], who: Payoff) -> Result<TabularMdp> {
        match who {
            Payoff::Follower => self.reduced.at(x),
            Payoff::Leader => {
                let (n, nl, nf) = (self.n_states, self.n_leader, self.n_follower);
                let lead = self.leader_policy(x)?.probs();
                let base = self.reduced.at(x)?;
                let mut reward = DMatrix::zeros(n, nf);
                for s in 0..n {
                    let cost = self.tau * self.reg_leader.value(s, &row_vec(&lead, s));
                    for f in 0..nf {
                        reward[(s, f)] = (0..nl).map(|l| lead[(s, l)] * self.reward(Payoff::Leader, s, l, f)).sum::<f64>()
                            - cost;
                    }
                }
                TabularMdp::new(self.gamma, 0.0, Regularizer::None, reward, base.transition, self.initial_dist.clone())
            }
        }
    }

    /// `V_who^{π_x, π_y}` computed directly on the joint chain.
    pub fn joint_values(&self, x: &[f64], pi_y: &Policy, who: Payoff) -> Result<Vec<f64>> {
        let (n, nl, nf) = (self.n_states, self.n_leader, self.n_follower);
        if pi_y.n_states() != n || pi_y.n_actions() != nf {
            return validation("follower policy has the wrong shape");
        }
        let lead = self.leader_policy(x)?.probs();
        let fol = pi_y.probs();
        let mut p = DMatrix::identity(n, n);
        let mut b = vec![0.0; n];
        for s in 0..n {
            let own = match who {
                Payoff::Leader => row_vec(&lead, s),
                Payoff::Follower => row_vec(&fol, s),
            };
            b[s] = -self.tau * self.own_reg(who).value(s, &own);
            for l in 0..nl {
                for f in 0..nf {
                    let w = lead[(s, l)] * fol[(s, f)];
                    b[s] += w * self.reward(who, s, l, f);
                    for (t, q) in self.follower.p_row(s, l, f).iter().enumerate() {
                        p[(s, t)] -= self.gamma * w * q;
                    }
                }
            }
        }
        Ok(solve_dense(&p, &b))
    }

    pub fn value_rho(&self, x: &[f64], pi_y: &Policy, who: Payoff) -> Result<f64> {
        let v = self.joint_values(x, pi_y, who)?;
        Ok(v.iter().zip(&self.initial_dist).map(|(a, b)| a * b).sum())
    }
}

/// The follower's `M_τ(x)`: `r_x(s,a_f) = E_{a_l∼π_x}[r_f]`, `P_x = E_{a_l∼π_x}[P]`.
pub fn stackelberg_reduce(game: &StackelbergGame) -> ParamMdp {
    game.follower_mdp().clone()
}

/// `f(x, y) = −V_l^{π_x, π_y}(ρ)`.
#[derive(Clone, Debug)]
pub struct StackelbergUpper {
    pub game: Arc<StackelbergGame>,
}

impl UpperObjective for StackelbergUpper {
    fn evaluate(&self, x: &[f64], pi: &Policy) -> Result<f64> {
        Ok(-self.game.value_rho(x, pi, Payoff::Leader)?)
    }

    fn grad(&self, x: &[f64], pi: &Policy) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let logits = self.game.leader_logits(x)?;
        let lead = self.game.leader_policy(x)?.to_direct();
        let g_lead = self.game.leader_view(&pi.probs(), Payoff::Leader)?.policy_gradient(&lead)?;
        let gx = -softmax_chain_gradient(&logits, &g_lead);
        let gy = -self.game.follower_view(x, Payoff::Leader)?.policy_gradient(&pi.to_direct())?;
        Ok((gx.transpose().iter().cloned().collect(), gy))
    }

    fn grad_mc(&self, x: &[f64], pi: &Policy, cfg: &McConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let logits = self.game.leader_logits(x)?;
        let lead = self.game.leader_policy(x)?;
        let g_lead = mc_policy_gradient_with(&self.game.leader_view(&pi.probs(), Payoff::Leader)?, &lead, cfg, rng)?;
        let gx = -softmax_chain_gradient(&logits, &g_lead);
        let gy = -mc_policy_gradient_with(&self.game.follower_view(x, Payoff::Leader)?, pi, cfg, rng)?;
        Ok((gx.transpose().iter().cloned().collect(), gy))
    }

    fn estimates(&self) -> usize {
        2
    }

    fn metric_name(&self) -> &'static str {
        "leader_value"
    }
}
