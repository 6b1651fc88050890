use std::sync::Arc;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Result};
use crate::mdp::ConstantMap;
use crate::policy::{mc_policy_gradient_with, McConfig, Regularizer};
use crate::zerosum::{GameUpperObjective, JointPolicy, ZeroSumBilevelProblem, ZeroSumGame};

/// The designer's own dynamics and rewards over joint actions.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignerSpec {
    /// `P_id(s'|s,a₁,a₂)`, indexed `(s, a₁, a₂, s')`.
    pub transition_id: Vec<f64>,
    /// `r_id(s,a₁,a₂)`.
    pub reward_id: Vec<f64>,
    /// Per-state cost `c(s)`.
    pub cost: Vec<f64>,
}

/// `f(π) = −E_{π, P_id}[Σ γᵗ (r_id − c)]`.
#[derive(Clone, Debug)]
pub struct DesignerObjective {
    chain: ZeroSumGame,
}

impl DesignerObjective {
    pub fn new(spec: &DesignerSpec, game: &ZeroSumGame) -> Result<Self> {
        let (n, n1, n2) = (game.n_states, game.n1, game.n2);
        if spec.reward_id.len() != n * n1 * n2 || spec.cost.len() != n {
            return validation("designer reward or cost has the wrong length");
        }
        if spec.reward_id.iter().chain(&spec.cost).any(|v| !v.is_finite()) {
            return validation("designer reward and cost must be finite");
        }
        let values = spec
            .reward_id
            .iter()
            .enumerate()
            .map(|(i, r)| r - spec.cost[i / (n1 * n2)])
            .collect();
        let chain = ZeroSumGame::new(
            n,
            n1,
            n2,
            game.gamma,
            0.0,
            Regularizer::None,
            Regularizer::None,
            Arc::new(ConstantMap { dim_x: game.dim_x(), values }),
            spec.transition_id.clone(),
            game.initial_dist.clone(),
        )?;
        Ok(DesignerObjective { chain })
    }

    /// The designer's chain as an unregularized game (player 1 ascends the designer value).
    pub fn chain(&self) -> &ZeroSumGame {
        &self.chain
    }
}

impl GameUpperObjective for DesignerObjective {
    fn evaluate(&self, x: &[f64], joint: &JointPolicy) -> Result<f64> {
        Ok(-self.chain.value_rho(x, joint)?)
    }

    fn grad(&self, x: &[f64], joint: &JointPolicy) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let joint = joint.to_direct();
        let g1 = -self.chain.player1_view(x, &joint.pi2)?.policy_gradient(&joint.pi1)?;
        let g2 = self.chain.player2_view(x, &joint.pi1)?.policy_gradient(&joint.pi2)?;
        Ok((vec![0.0; self.chain.dim_x()], g1, g2))
    }

    fn grad_mc(
        &self,
        x: &[f64],
        joint: &JointPolicy,
        cfg: &McConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let g1 = -mc_policy_gradient_with(&self.chain.player1_view(x, &joint.pi2)?, &joint.pi1, cfg, rng)?;
        let g2 = mc_policy_gradient_with(&self.chain.player2_view(x, &joint.pi1)?, &joint.pi2, cfg, rng)?;
        Ok((vec![0.0; self.chain.dim_x()], g1, g2))
    }

    fn metric_name(&self) -> &'static str {
        "designer_reward"
    }
}

/// Designer over a zero-sum lower level, starting from `x = 0` and uniform play.
pub fn incentive_problem(designer: &DesignerSpec, game: ZeroSumGame) -> Result<ZeroSumBilevelProblem> {
    let upper = DesignerObjective::new(designer, &game)?;
    let x0 = vec![0.0; game.dim_x()];
    Ok(ZeroSumBilevelProblem { game: Arc::new(game), upper: Arc::new(upper), x0, init: None })
}
