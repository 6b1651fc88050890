use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Result};
use crate::mdp::{ParamMdp, TabularMdp};
use crate::policy::{mc_policy_gradient_with, McConfig, Policy};

use super::UpperObjective;

/// `f(x, y) = −V^{π_y}(ρ)` under the original (unshaped) reward.
#[derive(Clone, Debug)]
pub struct ShapingObjective {
    pub original: TabularMdp,
    pub dim_x: usize,
}

/// Pairs an original MDP with the shaped lower level it will be optimized through.
pub fn reward_shaping_objective(original: &TabularMdp, shaped: &ParamMdp) -> Result<ShapingObjective> {
    let probe = shaped.at(&vec![0.0; shaped.dim_x()])?;
    if probe.n_states() != original.n_states() || probe.n_actions() != original.n_actions() {
        return validation("original and shaped MDPs differ in shape");
    }
    if probe.transition != original.transition
        || probe.gamma != original.gamma
        || probe.tau != original.tau
        || probe.regularizer != original.regularizer
    {
        return validation("original and shaped MDPs must share transitions, gamma, tau and regularizer");
    }
    Ok(ShapingObjective { original: original.clone(), dim_x: shaped.dim_x() })
}

impl UpperObjective for ShapingObjective {
    fn evaluate(&self, _x: &[f64], pi: &Policy) -> Result<f64> {
        Ok(-self.original.value_rho(pi)?)
    }

    fn grad(&self, _x: &[f64], pi: &Policy) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((vec![0.0; self.dim_x], -self.original.policy_gradient(&pi.to_direct())?))
    }

    fn grad_mc(&self, _x: &[f64], pi: &Policy, cfg: &McConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((vec![0.0; self.dim_x], -mc_policy_gradient_with(&self.original, pi, cfg, rng)?))
    }

    fn metric_name(&self) -> &'static str {
        "original_return"
    }
}
