mod common;

use std::sync::Arc;

use common::*;
use pbrl_core::applications::kendall_tau;
use pbrl_core::mdp::{OffsetMap, ParamMdp};
use pbrl_core::oracle::tight_oracle;
use pbrl_core::penalty::{bellman_penalty_eval, value_penalty_eval};
use pbrl_core::policy::{project_simplex, softmax_row, Regularizer};
use pbrl_core::zerosum::{ne_gap, JointPolicy, ZeroSumGame};
use proptest::prelude::*;
use rand::Rng;

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_lands_on_the_simplex_and_is_idempotent(v in vec_strategy()) {
        let p = project_simplex(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let again = project_simplex(&p).unwrap();
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_is_nonexpansive(pair in (1usize..10).prop_flat_map(|n| {
        (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n))
    })) {
        let (u, v) = pair;
        let (pu, pv) = (project_simplex(&u).unwrap(), project_simplex(&v).unwrap());
        let d_in: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
        let d_out: f64 = pu.iter().zip(&pv).map(|(a, b)| (a - b).powi(2)).sum();
        prop_assert!(d_out <= d_in + 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(v in vec_strategy(), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let (a, b) = (softmax_row(&v), softmax_row(&shifted));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn values_satisfy_the_bellman_equation(seed in any::<u64>(), n in 1usize..6, k in 1usize..4, gamma in 0.0f64..0.95, tau in 0.0f64..1.0) {
        let mut r = rng(seed);
        let reg = if tau > 0.0 { Regularizer::NegEntropy } else { Regularizer::None };
        let m = random_mdp(&mut r, n, k, gamma, tau, reg);
        let pi = random_policy(&mut r, n, k);
        let (v, q) = m.value_and_q(&pi).unwrap();
        prop_assert!(m.bellman_residual(&pi, &v, &q) <= 1e-10);
    }

    #[test]
    fn penalties_are_nonnegative(seed in any::<u64>(), n in 1usize..5, k in 2usize..4, tau in 0.05f64..1.0) {
        let mut r = rng(seed);
        let base = entropy_mdp(&mut r, n, k, 0.8, tau);
        let pm = ParamMdp::with_reward_map(
            base.gamma,
            base.tau,
            base.regularizer.clone(),
            Arc::new(OffsetMap { base: flat(&base.reward) }),
            base.transition.clone(),
            base.initial_dist.clone(),
        )
        .unwrap();
        let x = random_vec(&mut r, n * k, 1.0);
        let pi = random_policy(&mut r, n, k);
        let cert = tight_oracle(&pm.at(&x).unwrap()).unwrap();
        prop_assert!(value_penalty_eval(&pm, &x, &pi, &cert).unwrap() >= 0.0);
        prop_assert!(bellman_penalty_eval(&pm, &x, &pi, &cert).unwrap() >= 0.0);
    }

    #[test]
    fn nash_gap_is_nonnegative(seed in any::<u64>(), n in 1usize..4, n1 in 1usize..4, n2 in 1usize..4) {
        let mut r = rng(seed);
        let len = n * n1 * n2;
        let base: Vec<f64> = (0..len).map(|_| r.gen()).collect();
        let reg = Regularizer::NegEntropy;
        let game = ZeroSumGame::new(
            n, n1, n2, 0.7, 0.5, reg.clone(), reg, Arc::new(OffsetMap { base }),
            stochastic_rows(&mut r, len, n), random_start(&mut r, n),
        )
        .unwrap();
        let joint = JointPolicy { pi1: random_policy(&mut r, n, n1), pi2: random_policy(&mut r, n, n2) };
        prop_assert!(ne_gap(&game, &vec![0.0; len], &joint).unwrap() >= 0.0);
    }

    #[test]
    fn kendall_tau_is_bounded_and_symmetric(pair in (2usize..15).prop_flat_map(|n| {
        (prop::collection::vec(-3i32..3, n), prop::collection::vec(-3i32..3, n))
    })) {
        let a: Vec<f64> = pair.0.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = pair.1.iter().map(|&v| v as f64).collect();
        let t = kendall_tau(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t));
        prop_assert!((t - kendall_tau(&b, &a)).abs() <= 1e-12);
        let neg: Vec<f64> = b.iter().map(|v| -v).collect();
        prop_assert!((t + kendall_tau(&a, &neg)).abs() <= 1e-12);
    }
}
