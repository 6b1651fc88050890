use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Result};
use crate::mdp::{ParamMap, TabularMdp};
use crate::policy::{sample_trajectory, Policy};

use super::UpperObjective;

/// Two segments and the label of the first one (`l₀`; `l₁ = 1 − l₀`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledPair {
    pub d0: Vec<(usize, usize)>,
    pub d1: Vec<(usize, usize)>,
    pub l0: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub segment_len: usize,
    pub pairs: Vec<LabeledPair>,
    /// Pairs whose ground-truth returns tied; labeled in favour of `d0`.
    pub ties: usize,
}

impl PreferenceDataset {
    /// Keeps only the most recent `capacity` pairs.
    pub fn truncate_front(&mut self, capacity: usize) {
        if self.pairs.len() > capacity {
            let drop = self.pairs.len() - capacity;
            self.pairs.drain(..drop);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentConfig {
    pub segment_len: usize,
    pub n_pairs: usize,
    pub seed: u64,
}

fn segment_return(seg: &[(usize, usize)], reward: &DMatrix<f64>) -> f64 {
    seg.iter().map(|&(s, a)| reward[(s, a)]).sum()
}

/// Rolls out `2·n_pairs` segments under `pi` and labels each pair by ground-truth return.
pub fn collect_and_label_segments(
    mdp: &TabularMdp,
    true_reward: &DMatrix<f64>,
    pi: &Policy,
    cfg: &SegmentConfig,
) -> Result<PreferenceDataset> {
    if cfg.segment_len == 0 {
        return validation("segment length must be positive");
    }
    if true_reward.nrows() != mdp.n_states() || true_reward.ncols() != mdp.n_actions() {
        return validation("true reward table has the wrong shape");
    }
    mdp.check_policy(pi)?;
    let probs = pi.probs();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seg = || -> Vec<(usize, usize)> {
        sample_trajectory(mdp, &probs, cfg.segment_len, &mut rng).steps.iter().map(|st| (st.state, st.action)).collect()
    };
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut ties = 0;
    for _ in 0..cfg.n_pairs {
        let d0 = seg();
        let d1 = seg();
        let (r0, r1) = (segment_return(&d0, true_reward), segment_return(&d1, true_reward));
        let l0 = if (r0 - r1).abs() <= 1e-12 {
            ties += 1;
            1
        } else {
            u8::from(r0 > r1)
        };
        pairs.push(LabeledPair { d0, d1, l0 });
    }
    Ok(PreferenceDataset { segment_len: cfg.segment_len, pairs, ties })
}

/// `softplus(u) = log(1 + eᵘ)`, stable for large `|u|`.
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Bradley–Terry negative log-likelihood of a preference buffer under `r_x`.
#[derive(Clone, Debug)]
pub struct PreferenceObjective {
    pub dataset: PreferenceDataset,
    pub reward_map: Arc<dyn ParamMap>,
    pub n_states: usize,
    pub n_actions: usize,
    /// Ground truth used only for the reported ranking metric.
    pub true_reward: Option<DMatrix<f64>>,
}

/// Builds the preference loss; the reward map must output an `|S|×|A|` table.
pub fn preference_upper_objective(
    dataset: PreferenceDataset,
    reward_map: Arc<dyn ParamMap>,
    n_states: usize,
    n_actions: usize,
) -> Result<PreferenceObjective> {
    if dataset.pairs.is_empty() {
        return validation("preference dataset is empty");
    }
    if reward_map.output_len() != n_states * n_actions {
        return validation("reward map does not produce an |S|x|A| table");
    }
    for p in &dataset.pairs {
        if p.d0.iter().chain(&p.d1).any(|&(s, a)| s >= n_states || a >= n_actions) {
            return validation("segment visits an out-of-range state-action pair");
        }
    }
    Ok(PreferenceObjective { dataset, reward_map, n_states, n_actions, true_reward: None })
}

impl PreferenceObjective {
    fn table(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_states, self.n_actions, &self.reward_map.evaluate(x))
    }

    /// Loss as a function of `x` alone.
    pub fn loss(&self, x: &[f64]) -> f64 {
        let r = self.table(x);
        self.dataset
            .pairs
            .iter()
            .map(|p| {
                let z = segment_return(&p.d0, &r) - segment_return(&p.d1, &r);
                if p.l0 == 1 {
                    softplus(-z)
                } else {
                    softplus(z)
                }
            })
            .sum()
    }

    pub fn loss_grad(&self, x: &[f64]) -> Vec<f64> {
        let r = self.table(x);
        let mut w = vec![0.0; self.n_states * self.n_actions];
        for p in &self.dataset.pairs {
            let z = segment_return(&p.d0, &r) - segment_return(&p.d1, &r);
            // ∂loss/∂z
            let dz = if p.l0 == 1 { -crate::mdp::sigmoid(-z) } else { crate::mdp::sigmoid(z) };
            for &(s, a) in &p.d0 {
                w[s * self.n_actions + a] += dz;
            }
            for &(s, a) in &p.d1 {
                w[s * self.n_actions + a] -= dz;
            }
        }
        self.reward_map.grad_contract(x, &w)
    }
}

impl UpperObjective for PreferenceObjective {
    fn evaluate(&self, x: &[f64], _pi: &Policy) -> Result<f64> {
        Ok(self.loss(x))
    }

    fn grad(&self, x: &[f64], pi: &Policy) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((self.loss_grad(x), DMatrix::zeros(pi.n_states(), pi.n_actions())))
    }

    fn estimates(&self) -> usize {
        0
    }

    fn metric(&self, x: &[f64], _pi: &Policy) -> Result<f64> {
        match &self.true_reward {
            Some(t) => Ok(kendall_tau(self.table(x).transpose().as_slice(), t.transpose().as_slice())),
            None => Ok(-self.loss(x)),
        }
    }

    fn metric_name(&self) -> &'static str {
        if self.true_reward.is_some() {
            "kendall_tau"
        } else {
            "neg_f"
        }
    }
}

/// Kendall's τ-b rank correlation.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut conc, mut disc, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = (a[i] - a[j]).partial_cmp(&0.0).unwrap() as i64;
            let db = (b[i] - b[j]).partial_cmp(&0.0).unwrap() as i64;
            match (da, db) {
                (0, 0) => {}
                (0, _) => tie_a += 1,
                (_, 0) => tie_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let denom = (((conc + disc + tie_a) * (conc + disc + tie_b)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (conc - disc) as f64 / denom
    }
}
