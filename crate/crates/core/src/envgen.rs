//! Seeded random environments and a versioned text format for them.
//!
//! Every generator draws from `ChaCha8Rng::seed_from_u64(seed)` in a fixed
//! order, so a recipe fully determines its instance. Rewards are uniform on
//! `[0, 1)` with entries below the threshold set to zero; transition rows are
//! `1 − U[0, 1)` normalized, hence strictly positive.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::applications::{DesignerSpec, StackelbergGame};
use crate::error::{validation, PbrlError, Result};
use crate::mdp::{OffsetMap, ParamMdp, SigmoidIncentiveMap, TabularMdp, Transition};
use crate::policy::Regularizer;
use crate::zerosum::ZeroSumGame;

/// Header line of the serialized format.
pub const FORMAT_HEADER: &str = "pbrl-env v1";
/// Scale `c` of the incentive `r_x = r + c·sigmoid(x)`.
pub const INCENTIVE_SCALE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    RandomStackelberg,
    RandomIncentive,
    SparseChain,
    RandomMdp,
}

impl EnvKind {
    fn name(self) -> &'static str {
        match self {
            EnvKind::RandomStackelberg => "random_stackelberg",
            EnvKind::RandomIncentive => "random_incentive",
            EnvKind::SparseChain => "sparse_chain",
            EnvKind::RandomMdp => "random_mdp",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [EnvKind::RandomStackelberg, EnvKind::RandomIncentive, EnvKind::SparseChain, EnvKind::RandomMdp]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvRecipe {
    pub kind: EnvKind,
    pub n_states: usize,
    /// Leader / player-1 / single-agent action count.
    pub n_actions_1: usize,
    /// Follower / player-2 action count (ignored by single-agent kinds).
    pub n_actions_2: usize,
    /// Rewards below this value are zeroed.
    pub threshold: f64,
    pub gamma: f64,
    pub tau: f64,
    pub seed: u64,
}

impl EnvRecipe {
    /// `|S| = 20`, 5×5 actions, threshold 0.7.
    pub fn stackelberg_desk(seed: u64) -> Self {
        EnvRecipe {
            kind: EnvKind::RandomStackelberg,
            n_states: 20,
            n_actions_1: 5,
            n_actions_2: 5,
            threshold: 0.7,
            gamma: 0.9,
            tau: 0.1,
            seed,
        }
    }

    /// `|S| = 100`, 5×5 actions, threshold 0.7.
    pub fn stackelberg_full(seed: u64) -> Self {
        EnvRecipe { n_states: 100, ..Self::stackelberg_desk(seed) }
    }

    /// `|S| = 10`, 5×5 actions, dense rewards.
    pub fn incentive(seed: u64) -> Self {
        EnvRecipe {
            kind: EnvKind::RandomIncentive,
            n_states: 10,
            n_actions_1: 5,
            n_actions_2: 5,
            threshold: 0.0,
            gamma: 0.9,
            tau: 0.1,
            seed,
        }
    }

    pub fn sparse_chain(n_states: usize, seed: u64) -> Self {
        EnvRecipe {
            kind: EnvKind::SparseChain,
            n_states,
            n_actions_1: 2,
            n_actions_2: 1,
            threshold: 0.0,
            gamma: 0.9,
            tau: 0.0,
            seed,
        }
    }

    pub fn random_mdp(n_states: usize, n_actions: usize, seed: u64) -> Self {
        EnvRecipe {
            kind: EnvKind::RandomMdp,
            n_states,
            n_actions_1: n_actions,
            n_actions_2: 1,
            threshold: 0.0,
            gamma: 0.9,
            tau: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions_1 == 0 || self.n_actions_2 == 0 {
            return validation("recipe sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return validation(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(self.tau >= 0.0) || !self.tau.is_finite() {
            return validation("gamma must lie in [0, 1) and tau must be finite and nonnegative");
        }
        Ok(())
    }

    fn expect(&self, kind: EnvKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return validation(format!("recipe kind {:?} used for a {:?} generator", self.kind, kind));
        }
        Ok(())
    }

    fn regularizer(&self) -> Regularizer {
        if self.tau > 0.0 {
            Regularizer::NegEntropy
        } else {
            Regularizer::None
        }
    }
}

fn rewards(rng: &mut ChaCha8Rng, len: usize, threshold: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < threshold {
                0.0
            } else {
                u
            }
        })
        .collect()
}

fn transitions(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let row: Vec<f64> = (0..width).map(|_| 1.0 - rng.gen::<f64>()).collect();
        let z: f64 = row.iter().sum();
        out.extend(row.into_iter().map(|p| p / z));
    }
    out
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Random Stackelberg game with sparse rewards.
pub fn gen_stackelberg(recipe: &EnvRecipe) -> Result<StackelbergGame> {
    recipe.expect(EnvKind::RandomStackelberg)?;
    let (n, nl, nf) = (recipe.n_states, recipe.n_actions_1, recipe.n_actions_2);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let r_leader = rewards(&mut rng, n * nl * nf, recipe.threshold);
    let r_follower = rewards(&mut rng, n * nl * nf, recipe.threshold);
    let transition = transitions(&mut rng, n * nl * nf, n);
    let reg = recipe.regularizer();
    StackelbergGame::new(n, nl, nf, recipe.gamma, recipe.tau, reg.clone(), reg, r_leader, r_follower, transition, uniform(n))
}

/// An incentive-design instance before it is wired into a problem.
#[derive(Clone, Debug)]
pub struct IncentiveEnv {
    pub designer: DesignerSpec,
    pub game: ZeroSumGame,
    /// Unincentivized lower-level reward `r`.
    pub base_reward: Vec<f64>,
    pub scale: f64,
}

/// Random designer chain and zero-sum lower level with `r_x = r + 0.2·sigmoid(x)`.
pub fn gen_incentive_env(recipe: &EnvRecipe) -> Result<IncentiveEnv> {
    recipe.expect(EnvKind::RandomIncentive)?;
    let (n, n1, n2) = (recipe.n_states, recipe.n_actions_1, recipe.n_actions_2);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let transition_id = transitions(&mut rng, n * n1 * n2, n);
    let reward_id = rewards(&mut rng, n * n1 * n2, recipe.threshold);
    let transition = transitions(&mut rng, n * n1 * n2, n);
    let base_reward = rewards(&mut rng, n * n1 * n2, recipe.threshold);
    let designer = DesignerSpec { transition_id, reward_id, cost: vec![0.0; n] };
    build_incentive(recipe.gamma, recipe.tau, designer, base_reward, INCENTIVE_SCALE, transition, uniform(n), n, n1, n2)
}

#[allow(clippy::too_many_arguments)]
fn build_incentive(
    gamma: f64,
    tau: f64,
    designer: DesignerSpec,
    base_reward: Vec<f64>,
    scale: f64,
    transition: Vec<f64>,
    rho: Vec<f64>,
    n: usize,
    n1: usize,
    n2: usize,
) -> Result<IncentiveEnv> {
    let reg = if tau > 0.0 { Regularizer::NegEntropy } else { Regularizer::None };
    let map = Arc::new(SigmoidIncentiveMap { base: base_reward.clone(), scale });
    let game = ZeroSumGame::new(n, n1, n2, gamma, tau, reg.clone(), reg, map, transition, rho)?;
    if designer.transition_id.len() != n * n1 * n2 * n {
        return validation("designer transition has the wrong length");
    }
    crate::mdp::check_rows(&designer.transition_id, n)?;
    Ok(IncentiveEnv { designer, game, base_reward, scale })
}

pub fn gen_incentive(recipe: &EnvRecipe) -> Result<(DesignerSpec, ZeroSumGame)> {
    let env = gen_incentive_env(recipe)?;
    Ok((env.designer, env.game))
}

/// Chain with reward 1 at the last state only and a small random slip.
///
/// Action 0 moves forward, action 1 moves back; each fails with probability
/// drawn from `U[0, 0.1)` and moves the other way. The reward map is `r + x`.
pub fn gen_sparse_chain(recipe: &EnvRecipe) -> Result<ParamMdp> {
    let mdp = gen_sparse_chain_mdp(recipe)?;
    let base: Vec<f64> = mdp.reward.transpose().as_slice().to_vec();
    ParamMdp::with_reward_map(
        mdp.gamma,
        mdp.tau,
        mdp.regularizer.clone(),
        Arc::new(OffsetMap { base }),
        mdp.transition.clone(),
        mdp.initial_dist.clone(),
    )
}

/// The unshaped chain as a plain MDP.
pub fn gen_sparse_chain_mdp(recipe: &EnvRecipe) -> Result<TabularMdp> {
    recipe.expect(EnvKind::SparseChain)?;
    if recipe.n_actions_1 != 2 {
        return validation("the chain has exactly two actions");
    }
    let n = recipe.n_states;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut trans = vec![0.0; n * 2 * n];
    for s in 0..n {
        let fwd = (s + 1).min(n - 1);
        let back = s.saturating_sub(1);
        for a in 0..2 {
            let slip: f64 = 0.1 * rng.gen::<f64>();
            let (main, other) = if a == 0 { (fwd, back) } else { (back, fwd) };
            let o = (s * 2 + a) * n;
            trans[o + main] += 1.0 - slip;
            trans[o + other] += slip;
        }
    }
    let reward = DMatrix::from_fn(n, 2, |s, _| if s == n - 1 { 1.0 } else { 0.0 });
    TabularMdp::new(recipe.gamma, recipe.tau, recipe.regularizer(), reward, Transition::new(n, 2, trans)?, uniform(n))
}

/// Random single-agent MDP.
pub fn gen_random_mdp(recipe: &EnvRecipe) -> Result<TabularMdp> {
    recipe.expect(EnvKind::RandomMdp)?;
    let (n, k) = (recipe.n_states, recipe.n_actions_1);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let r = rewards(&mut rng, n * k, recipe.threshold);
    let trans = transitions(&mut rng, n * k, n);
    TabularMdp::new(
        recipe.gamma,
        recipe.tau,
        recipe.regularizer(),
        DMatrix::from_row_slice(n, k, &r),
        Transition::new(n, k, trans)?,
        uniform(n),
    )
}

/// Parsed contents of a serialized environment.
///
/// The format is line oriented: the header `pbrl-env v1`, a `kind <name>`
/// line, then `scalar <name> <value>` lines and `tensor <name> <len>` lines
/// each followed by one line of `len` space-separated decimals (row-major).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnvFile {
    pub kind: Option<EnvKind>,
    pub scalars: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl EnvFile {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_HEADER}");
        if let Some(k) = self.kind {
            let _ = writeln!(out, "kind {}", k.name());
        }
        for (name, v) in &self.scalars {
            let _ = writeln!(out, "scalar {name} {v:?}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {}", t.len());
            let line: Vec<String> = t.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, message: &str| PbrlError::Parse { line, message: message.to_string() };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, h)) if h == FORMAT_HEADER => {}
            Some((i, _)) => return Err(err(i, "missing or unsupported format header")),
            None => return Err(err(1, "empty input")),
        }
        let num = |i: usize, s: &str| s.parse::<f64>().map_err(|_| err(i, &format!("bad number {s:?}")));
        let mut file = EnvFile::default();
        while let Some((i, line)) = lines.next() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["kind", k] => file.kind = Some(EnvKind::parse(k).ok_or_else(|| err(i, "unknown kind"))?),
                ["scalar", name, v] => {
                    file.scalars.insert(name.to_string(), num(i, v)?);
                }
                ["tensor", name, len] => {
                    let len: usize = len.parse().map_err(|_| err(i, "bad tensor length"))?;
                    let (j, body) = lines.next().ok_or_else(|| err(i, "tensor body missing"))?;
                    let vals = body.split_whitespace().map(|v| num(j, v)).collect::<Result<Vec<_>>>()?;
                    if vals.len() != len {
                        return Err(err(j, &format!("expected {len} values, found {}", vals.len())));
                    }
                    file.tensors.insert(name.to_string(), vals);
                }
                _ => return Err(err(i, "unrecognized line")),
            }
        }
        Ok(file)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| PbrlError::Parse { line: 0, message: format!("missing scalar {name}") })
    }

    fn count(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(PbrlError::Parse { line: 0, message: format!("{name} must be a nonnegative integer") });
        }
        Ok(v as usize)
    }

    fn tensor(&self, name: &str) -> Result<Vec<f64>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| PbrlError::Parse { line: 0, message: format!("missing tensor {name}") })
    }

    fn expect_kind(&self, kind: EnvKind) -> Result<()> {
        if self.kind != Some(kind) {
            return Err(PbrlError::Parse { line: 0, message: format!("expected kind {}", kind.name()) });
        }
        Ok(())
    }
}

fn reg_code(reg: &Regularizer) -> Result<f64> {
    match reg {
        Regularizer::None => Ok(0.0),
        Regularizer::NegEntropy => Ok(1.0),
        Regularizer::SquaredL2 => Ok(2.0),
        Regularizer::KlToReference(_) => validation("KL regularizers are not serializable"),
    }
}

fn reg_from(code: f64) -> Result<Regularizer> {
    match code as i64 {
        0 => Ok(Regularizer::None),
        1 => Ok(Regularizer::NegEntropy),
        2 => Ok(Regularizer::SquaredL2),
        _ => Err(PbrlError::Parse { line: 0, message: format!("unknown regularizer code {code}") }),
    }
}

pub fn stackelberg_to_text(game: &StackelbergGame) -> Result<String> {
    let mut f = EnvFile { kind: Some(EnvKind::RandomStackelberg), ..Default::default() };
    for (k, v) in [
        ("n_states", game.n_states as f64),
        ("n_leader", game.n_leader as f64),
        ("n_follower", game.n_follower as f64),
        ("gamma", game.gamma),
        ("tau", game.tau),
        ("reg_leader", reg_code(&game.reg_leader)?),
        ("reg_follower", reg_code(&game.reg_follower)?),
    ] {
        f.scalars.insert(k.into(), v);
    }
    f.tensors.insert("r_leader".into(), game.r_leader.clone());
    f.tensors.insert("r_follower".into(), game.follower.reward.clone());
    f.tensors.insert("transition".into(), game.follower.transition.clone());
    f.tensors.insert("initial_dist".into(), game.initial_dist.clone());
    Ok(f.to_text())
}

pub fn stackelberg_from_text(text: &str) -> Result<StackelbergGame> {
    let f = EnvFile::parse(text)?;
    f.expect_kind(EnvKind::RandomStackelberg)?;
    StackelbergGame::new(
        f.count("n_states")?,
        f.count("n_leader")?,
        f.count("n_follower")?,
        f.scalar("gamma")?,
        f.scalar("tau")?,
        reg_from(f.scalar("reg_leader")?)?,
        reg_from(f.scalar("reg_follower")?)?,
        f.tensor("r_leader")?,
        f.tensor("r_follower")?,
        f.tensor("transition")?,
        f.tensor("initial_dist")?,
    )
}

pub fn incentive_to_text(env: &IncentiveEnv) -> Result<String> {
    let g = &env.game;
    let mut f = EnvFile { kind: Some(EnvKind::RandomIncentive), ..Default::default() };
    for (k, v) in [
        ("n_states", g.n_states as f64),
        ("n1", g.n1 as f64),
        ("n2", g.n2 as f64),
        ("gamma", g.gamma),
        ("tau", g.tau),
        ("scale", env.scale),
    ] {
        f.scalars.insert(k.into(), v);
    }
    f.tensors.insert("base_reward".into(), env.base_reward.clone());
    f.tensors.insert("transition".into(), g.transition().to_vec());
    f.tensors.insert("initial_dist".into(), g.initial_dist.clone());
    f.tensors.insert("transition_id".into(), env.designer.transition_id.clone());
    f.tensors.insert("reward_id".into(), env.designer.reward_id.clone());
    f.tensors.insert("cost".into(), env.designer.cost.clone());
    Ok(f.to_text())
}

pub fn incentive_from_text(text: &str) -> Result<IncentiveEnv> {
    let f = EnvFile::parse(text)?;
    f.expect_kind(EnvKind::RandomIncentive)?;
    let designer = DesignerSpec {
        transition_id: f.tensor("transition_id")?,
        reward_id: f.tensor("reward_id")?,
        cost: f.tensor("cost")?,
    };
    build_incentive(
        f.scalar("gamma")?,
        f.scalar("tau")?,
        designer,
        f.tensor("base_reward")?,
        f.scalar("scale")?,
        f.tensor("transition")?,
        f.tensor("initial_dist")?,
        f.count("n_states")?,
        f.count("n1")?,
        f.count("n2")?,
    )
}

pub fn mdp_to_text(mdp: &TabularMdp) -> Result<String> {
    let mut f = EnvFile { kind: Some(EnvKind::RandomMdp), ..Default::default() };
    for (k, v) in [
        ("n_states", mdp.n_states() as f64),
        ("n_actions", mdp.n_actions() as f64),
        ("gamma", mdp.gamma),
        ("tau", mdp.tau),
        ("regularizer", reg_code(&mdp.regularizer)?),
    ] {
        f.scalars.insert(k.into(), v);
    }
    f.tensors.insert("reward".into(), mdp.reward.transpose().as_slice().to_vec());
    f.tensors.insert("transition".into(), mdp.transition.as_slice().to_vec());
    f.tensors.insert("initial_dist".into(), mdp.initial_dist.clone());
    Ok(f.to_text())
}

pub fn mdp_from_text(text: &str) -> Result<TabularMdp> {
    let f = EnvFile::parse(text)?;
    f.expect_kind(EnvKind::RandomMdp)?;
    let (n, k) = (f.count("n_states")?, f.count("n_actions")?);
    let r = f.tensor("reward")?;
    if r.len() != n * k {
        return validation("reward tensor has the wrong length");
    }
    TabularMdp::new(
        f.scalar("gamma")?,
        f.scalar("tau")?,
        reg_from(f.scalar("regularizer")?)?,
        DMatrix::from_row_slice(n, k, &r),
        Transition::new(n, k, f.tensor("transition")?)?,
        f.tensor("initial_dist")?,
    )
}
