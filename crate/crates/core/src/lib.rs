//! Penalty-based bilevel reinforcement learning on tabular problems.
//!
//! The lower level is a regularized MDP (or a two-player zero-sum Markov game)
//! parameterized by an upper-level variable `x`. Lower-level optimality is
//! replaced by a penalty (value gap, Bellman gap or Nikaido–Isoda function)
//! and the penalized objective is minimized by projected gradient steps on
//! `(x, π)` jointly.

pub mod applications;
pub mod envgen;
pub mod error;
pub mod mdp;
pub mod oracle;
pub mod penalty;
pub mod pbrl;
pub mod policy;
pub mod zerosum;

pub use error::{PbrlError, Result};
