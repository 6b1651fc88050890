//! Reductions of concrete problems to the generic bilevel interfaces.

mod incentive;
mod preference;
mod shaping;
mod stackelberg;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::policy::{McConfig, Policy};

pub use incentive::{incentive_problem, DesignerObjective, DesignerSpec};
pub use preference::{
    collect_and_label_segments, kendall_tau, preference_upper_objective, LabeledPair, PreferenceDataset,
    PreferenceObjective, SegmentConfig,
};
pub use shaping::{reward_shaping_objective, ShapingObjective};
pub use stackelberg::{stackelberg_reduce, Payoff, StackelbergGame, StackelbergUpper};

/// Upper-level objective `f(x, y)` of a bilevel problem with a single-agent lower level.
///
/// Policies passed in are direct-parameterized, and gradients with respect to
/// the policy are in the same coordinates.
pub trait UpperObjective: Send + Sync {
    fn evaluate(&self, x: &[f64], pi: &Policy) -> Result<f64>;

    /// `(∇_x f, ∇_π f)`.
    fn grad(&self, x: &[f64], pi: &Policy) -> Result<(Vec<f64>, DMatrix<f64>)>;

    /// Sampled gradient; defaults to the exact one.
    fn grad_mc(&self, x: &[f64], pi: &Policy, _cfg: &McConfig, _rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.grad(x, pi)
    }

    /// Gradient estimates drawn per call, for environment-step accounting.
    fn estimates(&self) -> usize {
        1
    }

    /// Application-level metric reported in run traces.
    fn metric(&self, x: &[f64], pi: &Policy) -> Result<f64> {
        Ok(-self.evaluate(x, pi)?)
    }

    fn metric_name(&self) -> &'static str {
        "neg_f"
    }
}
