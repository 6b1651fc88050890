//! Differentiable maps from the upper-level parameter `x` to reward and
//! transition tensors.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{validation, Result};
use crate::policy::softmax_row;

/// A deterministic, differentiable map `x ↦ tensor` (flattened row-major).
pub trait ParamMap: Send + Sync + Debug {
    fn dim_x(&self) -> usize;
    fn output_len(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> Vec<f64>;
    /// Dense Jacobian, `output_len × dim_x`.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;

    /// `Jᵀ w` for an output-space weight vector `w`.
    fn grad_contract(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let j = self.jacobian(x);
        (0..self.dim_x()).map(|i| (0..w.len()).map(|o| j[(o, i)] * w[o]).sum()).collect()
    }

    /// True when the output does not depend on `x`.
    fn is_constant(&self) -> bool {
        false
    }
}

/// Ignores `x` entirely.
#[derive(Clone, Debug)]
pub struct ConstantMap {
    pub dim_x: usize,
    pub values: Vec<f64>,
}

impl ParamMap for ConstantMap {
    fn dim_x(&self) -> usize {
        self.dim_x
    }
    fn output_len(&self) -> usize {
        self.values.len()
    }
    fn evaluate(&self, _x: &[f64]) -> Vec<f64> {
        self.values.clone()
    }
    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.values.len(), self.dim_x)
    }
    fn grad_contract(&self, _x: &[f64], _w: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim_x]
    }
    fn is_constant(&self) -> bool {
        true
    }
}

/// `base + x`; with a zero base this is the reward-table parameterization.
#[derive(Clone, Debug)]
pub struct OffsetMap {
    pub base: Vec<f64>,
}

impl OffsetMap {
    pub fn table(len: usize) -> Self {
        OffsetMap { base: vec![0.0; len] }
    }
}

impl ParamMap for OffsetMap {
    fn dim_x(&self) -> usize {
        self.base.len()
    }
    fn output_len(&self) -> usize {
        self.base.len()
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        self.base.iter().zip(x).map(|(b, v)| b + v).collect()
    }
    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.base.len(), self.base.len())
    }
    fn grad_contract(&self, _x: &[f64], w: &[f64]) -> Vec<f64> {
        w.to_vec()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `base + scale · sigmoid(x)`, entrywise.
#[derive(Clone, Debug)]
pub struct SigmoidIncentiveMap {
    pub base: Vec<f64>,
    pub scale: f64,
}

impl ParamMap for SigmoidIncentiveMap {
    fn dim_x(&self) -> usize {
        self.base.len()
    }
    fn output_len(&self) -> usize {
        self.base.len()
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        self.base.iter().zip(x).map(|(b, &v)| b + self.scale * sigmoid(v)).collect()
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d: Vec<f64> = x.iter().map(|&v| self.scale * sigmoid(v) * (1.0 - sigmoid(v))).collect();
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d))
    }
    fn grad_contract(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(w)
            .map(|(&v, &wi)| wi * self.scale * sigmoid(v) * (1.0 - sigmoid(v)))
            .collect()
    }
}

/// Two-player tabular dynamics seen by player `b` once player `a`'s softmax
/// policy (logits `x`, shape `n_states × n_a`) is folded into the environment.
#[derive(Clone, Debug, PartialEq)]
pub struct JointModel {
    pub n_states: usize,
    pub n_a: usize,
    pub n_b: usize,
    /// `(s, a, b)` row-major.
    pub reward: Vec<f64>,
    /// `(s, a, b, s')` row-major.
    pub transition: Vec<f64>,
}

impl JointModel {
    pub fn new(n_states: usize, n_a: usize, n_b: usize, reward: Vec<f64>, transition: Vec<f64>) -> Result<Self> {
        if reward.len() != n_states * n_a * n_b || transition.len() != n_states * n_a * n_b * n_states {
            return validation("joint model tensor sizes do not match the action counts");
        }
        super::check_rows(&transition, n_states)?;
        Ok(JointModel { n_states, n_a, n_b, reward, transition })
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize, b: usize) -> f64 {
        self.reward[(s * self.n_a + a) * self.n_b + b]
    }

    #[inline]
    pub fn p_row(&self, s: usize, a: usize, b: usize) -> &[f64] {
        let o = ((s * self.n_a + a) * self.n_b + b) * self.n_states;
        &self.transition[o..o + self.n_states]
    }

    /// Player `a`'s action probabilities in every state.
    pub fn lead_probs(&self, x: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_states).map(|s| softmax_row(&x[s * self.n_a..(s + 1) * self.n_a])).collect()
    }
}

/// `r_x(s,b) = Σ_a π_x(a|s) R(s,a,b)`.
#[derive(Clone, Debug)]
pub struct MarginalRewardMap {
    pub model: Arc<JointModel>,
}

impl ParamMap for MarginalRewardMap {
    fn dim_x(&self) -> usize {
        self.model.n_states * self.model.n_a
    }
    fn output_len(&self) -> usize {
        self.model.n_states * self.model.n_b
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let m = &self.model;
        let pi = m.lead_probs(x);
        let mut out = vec![0.0; m.n_states * m.n_b];
        for s in 0..m.n_states {
            for b in 0..m.n_b {
                out[s * m.n_b + b] = (0..m.n_a).map(|a| pi[s][a] * m.r(s, a, b)).sum();
            }
        }
        out
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let m = &self.model;
        let pi = m.lead_probs(x);
        let vals = self.evaluate(x);
        let mut j = DMatrix::zeros(self.output_len(), self.dim_x());
        for s in 0..m.n_states {
            for b in 0..m.n_b {
                for c in 0..m.n_a {
                    j[(s * m.n_b + b, s * m.n_a + c)] = pi[s][c] * (m.r(s, c, b) - vals[s * m.n_b + b]);
                }
            }
        }
        j
    }
}

/// `P_x(s'|s,b) = Σ_a π_x(a|s) P(s'|s,a,b)`.
#[derive(Clone, Debug)]
pub struct MarginalTransitionMap {
    pub model: Arc<JointModel>,
}

impl ParamMap for MarginalTransitionMap {
    fn dim_x(&self) -> usize {
        self.model.n_states * self.model.n_a
    }
    fn output_len(&self) -> usize {
        self.model.n_states * self.model.n_b * self.model.n_states
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let m = &self.model;
        let pi = m.lead_probs(x);
        let n = m.n_states;
        let mut out = vec![0.0; n * m.n_b * n];
        for s in 0..n {
            for b in 0..m.n_b {
                let o = (s * m.n_b + b) * n;
                for a in 0..m.n_a {
                    let w = pi[s][a];
                    for (t, p) in m.p_row(s, a, b).iter().enumerate() {
                        out[o + t] += w * p;
                    }
                }
            }
        }
        out
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let m = &self.model;
        let pi = m.lead_probs(x);
        let vals = self.evaluate(x);
        let n = m.n_states;
        let mut j = DMatrix::zeros(self.output_len(), self.dim_x());
        for s in 0..n {
            for b in 0..m.n_b {
                for c in 0..m.n_a {
                    let row = m.p_row(s, c, b);
                    for t in 0..n {
                        let o = (s * m.n_b + b) * n + t;
                        j[(o, s * m.n_a + c)] = pi[s][c] * (row[t] - vals[o]);
                    }
                }
            }
        }
        j
    }
}
