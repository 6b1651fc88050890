mod common;

use common::*;
use nalgebra::DMatrix;
use pbrl_core::mdp::{TabularMdp, Transition};
use pbrl_core::oracle::*;
use pbrl_core::policy::{softmax_row, Policy, Regularizer};
use pbrl_core::PbrlError;

fn one_state(reward: &[f64], gamma: f64, tau: f64, reg: Regularizer) -> TabularMdp {
    let k = reward.len();
    TabularMdp::new(
        gamma,
        tau,
        reg,
        DMatrix::from_row_slice(1, k, reward),
        Transition::new(1, k, vec![1.0; k]).unwrap(),
        vec![1.0],
    )
    .unwrap()
}

fn pmd(eta: f64, iters: usize) -> PmdConfig {
    PmdConfig { eta, iters, tol: 0.0 }
}

#[test]
fn soft_optimum_matches_reference_solution() {
    let m = fixed_mdp(0.5);
    let c = soft_value_iteration(&m, 1e-13).unwrap();
    let expect = [0.9108059704853751, 0.08919402951462485, 0.06417391798732304, 0.935826082012677, 0.5109190143949449, 0.48908098560505503];
    assert_close(&flat(c.policy_hat.table()), &expect, 1e-9);
    assert_close(&m.value(&c.policy_hat).unwrap(), &[7.535003073340215, 8.127905326807259, 6.145363428486086], 1e-9);
    assert!((m.value_rho(&c.policy_hat).unwrap() - 7.434945820409503).abs() < 1e-9);
}

#[test]
fn unregularized_optimum_matches_reference_solution() {
    let m = fixed_mdp(0.0);
    for c in [brute_force_optimal(&m).unwrap(), policy_iteration(&m).unwrap()] {
        assert_eq!(c.policy_hat, Policy::deterministic(&[0, 1, 0], 2).unwrap());
        assert_close(&m.value(&c.policy_hat).unwrap(), &[10.353744311129498, 10.746793545717832, 8.47124534546959], 1e-10);
        assert_eq!(c.gap_bound, 0.0);
    }
}

#[test]
fn pmd_one_state_fixed_point_is_closed_form() {
    let m = one_state(&[0.3, 1.0, -0.5], 0.5, 0.4, Regularizer::NegEntropy);
    let c = pmd_solve(&m, &pmd(1.0, 200), None).unwrap();
    let q = m.q(&c.policy_hat).unwrap();
    let closed = softmax_row(&[q[(0, 0)] / 0.4, q[(0, 1)] / 0.4, q[(0, 2)] / 0.4]);
    assert_close(&c.policy_hat.dist(0), &closed, 1e-8);
}

#[test]
fn pmd_is_stationary_at_the_optimum() {
    let mut r = rng(21);
    let m = entropy_mdp(&mut r, 4, 3, 0.9, 0.2);
    let star = soft_value_iteration(&m, 1e-13).unwrap().policy_hat;
    let c = pmd_solve(&m, &pmd(1.0, 1), Some(&star)).unwrap();
    assert!(c.policy_hat.max_tv(&star) * 2.0 <= 1e-10);
}

#[test]
fn pmd_value_gap_against_soft_value_iteration() {
    let mut r = rng(22);
    let m = entropy_mdp(&mut r, 5, 3, 0.9, 0.1);
    let star = soft_value_iteration(&m, 1e-13).unwrap();
    let c = pmd_solve(&m, &pmd(10.0, 500), None).unwrap();
    let gap = m.value_rho(&star.policy_hat).unwrap() - m.value_rho(&c.policy_hat).unwrap();
    assert!(gap.abs() <= 1e-6, "gap {gap}");
    assert!(c.gap_bound >= 0.0);
}

#[test]
fn pmd_rejects_unregularized_problems() {
    let m = one_state(&[1.0, 2.0], 0.5, 0.0, Regularizer::None);
    assert!(matches!(pmd_solve(&m, &pmd(1.0, 10), None), Err(PbrlError::UnsupportedStructure(_))));
}

#[test]
fn soft_value_iteration_special_cases() {
    let mut r = rng(23);
    let m = entropy_mdp(&mut r, 3, 4, 0.0, 0.5);
    let c = soft_value_iteration(&m, 1e-12).unwrap();
    assert_eq!(c.iterations_used, 1);
    for s in 0..3 {
        let row: Vec<f64> = (0..4).map(|a| m.reward[(s, a)] / 0.5).collect();
        assert_close(&c.policy_hat.dist(s), &softmax_row(&row), 1e-14);
    }

    let m = entropy_mdp(&mut r, 3, 4, 0.9, 1e3);
    let c = soft_value_iteration(&m, 1e-10).unwrap();
    assert!(c.policy_hat.max_tv(&Policy::uniform(3, 4)) <= 1e-3);

    let sq = random_mdp(&mut r, 3, 2, 0.9, 0.5, Regularizer::SquaredL2);
    assert!(matches!(soft_value_iteration(&sq, 1e-10), Err(PbrlError::UnsupportedStructure(_))));
}

#[test]
fn soft_value_iteration_agrees_with_pmd() {
    for seed in 0..50 {
        let mut r = rng(1000 + seed);
        let n = if seed == 0 { 4 } else { 3 + seed as usize % 3 };
        let m = entropy_mdp(&mut r, n, 3, 0.9, 0.1 + 0.02 * seed as f64);
        let a = soft_value_iteration(&m, 1e-13).unwrap().policy_hat;
        let b = pmd_solve(&m, &PmdConfig { eta: 10.0, iters: 5000, tol: 1e-14 }, None).unwrap().policy_hat;
        assert!(a.max_tv(&b) <= 1e-6, "seed {seed}: {}", a.max_tv(&b));
    }
}

#[test]
fn regularized_optimum_is_unique_across_restarts() {
    for (seed, reg) in [(31, Regularizer::NegEntropy), (32, Regularizer::SquaredL2)] {
        let mut r = rng(seed);
        let m = random_mdp(&mut r, 4, 3, 0.8, 0.3, reg);
        let first = pmd_solve(&m, &PmdConfig { eta: 5.0, iters: 20_000, tol: 1e-15 }, None).unwrap().policy_hat;
        for _ in 0..10 {
            let init = random_policy(&mut r, 4, 3);
            let p = pmd_solve(&m, &PmdConfig { eta: 5.0, iters: 20_000, tol: 1e-15 }, Some(&init)).unwrap().policy_hat;
            assert!(p.max_tv(&first) <= 1e-5);
        }
    }
}

#[test]
fn projected_pg_special_cases() {
    let m = one_state(&[1.0, 2.0, 0.5], 0.0, 0.0, Regularizer::None);
    let c = projected_pg_solve(&m, &PgConfig { eta: 0.5, iters: 50 }, None).unwrap();
    assert_close(&c.policy_hat.dist(0), &[0.0, 1.0, 0.0], 1e-12);
    assert!(c.gap_bound <= 1e-6);

    let mut r = rng(24);
    let m = random_mdp(&mut r, 3, 3, 0.9, 0.0, Regularizer::None);
    let star = brute_force_optimal(&m).unwrap().policy_hat;
    let c = projected_pg_solve(&m, &PgConfig { eta: 0.1, iters: 1 }, Some(&star)).unwrap();
    assert_eq!(c.policy_hat, star);
}

#[test]
fn projected_pg_reaches_enumerated_optimum() {
    for seed in 0..10 {
        let mut r = rng(40 + seed);
        let m = random_mdp(&mut r, 3, 3, 0.9, 0.0, Regularizer::None);
        let best = m.value_rho(&brute_force_optimal(&m).unwrap().policy_hat).unwrap();
        let c = projected_pg_solve(&m, &PgConfig { eta: 0.5, iters: 5000 }, None).unwrap();
        let v = m.value_rho(&c.policy_hat).unwrap();
        assert!(best - v <= 1e-4, "seed {seed}: {best} vs {v}");
        assert!(best - v <= c.gap_bound + 1e-12);
    }
}

#[test]
fn projected_pg_improves_monotonically_with_small_steps() {
    let mut r = rng(25);
    let m = entropy_mdp(&mut r, 4, 3, 0.8, 0.1);
    let eta = 0.01 * (1.0f64 - 0.8).powi(3);
    let mut pi = Policy::uniform(4, 3);
    let mut v = m.value_rho(&pi).unwrap();
    for _ in 0..300 {
        pi = projected_pg_solve(&m, &PgConfig { eta, iters: 1 }, Some(&pi)).unwrap().policy_hat;
        let next = m.value_rho(&pi).unwrap();
        assert!(next >= v - 1e-13);
        v = next;
    }
}

#[test]
fn brute_force_examples() {
    let m = one_state(&[1.0, 2.0], 0.5, 0.0, Regularizer::None);
    let c = brute_force_optimal(&m).unwrap();
    assert_eq!(c.policy_hat.dist(0), vec![0.0, 1.0]);
    assert!((m.value(&c.policy_hat).unwrap()[0] - 4.0).abs() < 1e-14);

    let mut r = rng(26);
    let mut m = random_mdp(&mut r, 3, 2, 0.75, 0.0, Regularizer::None);
    m.reward = DMatrix::from_element(3, 2, 0.6);
    let c = brute_force_optimal(&m).unwrap();
    assert!((m.value_rho(&c.policy_hat).unwrap() - 0.6 / 0.25).abs() < 1e-12);
    assert!(c.near_ties > 0);

    let m = entropy_mdp(&mut r, 3, 2, 0.75, 0.1);
    assert!(matches!(brute_force_optimal(&m), Err(PbrlError::UnsupportedStructure(_))));
    let big = random_mdp(&mut r, 21, 2, 0.5, 0.0, Regularizer::None);
    assert!(matches!(brute_force_optimal(&big), Err(PbrlError::UnsupportedStructure(_))));
}

#[test]
fn brute_force_dominates_random_policies() {
    let mut r = rng(27);
    let m = random_mdp(&mut r, 3, 3, 0.9, 0.0, Regularizer::None);
    let best = m.value_rho(&brute_force_optimal(&m).unwrap().policy_hat).unwrap();
    for _ in 0..10_000 {
        assert!(m.value_rho(&random_policy(&mut r, 3, 3)).unwrap() <= best + 1e-12);
    }
}

#[test]
fn dominance_certificates_bound_the_true_gap() {
    for seed in 0..30 {
        let mut r = rng(60 + seed);
        let m = entropy_mdp(&mut r, 4, 3, 0.9, 0.2);
        let best = m.value_rho(&soft_value_iteration(&m, 1e-13).unwrap().policy_hat).unwrap();
        for spec in [
            OracleSpec::SoftmaxPg { eta: 0.1, iters: 1 },
            OracleSpec::ProjectedPg { eta: 0.05, iters: 20 },
            OracleSpec::Pmd { eta: 1.0, iters: 3, tol: 0.0 },
        ] {
            let c = spec.solve(&m, None).unwrap();
            let gap = best - m.value_rho(&c.policy_hat).unwrap();
            assert!(gap <= c.value_gap_bound(&m).unwrap() + 1e-10, "{spec:?}");
        }
    }
}

#[test]
fn oracle_spec_accounting() {
    assert_eq!(OracleSpec::SoftmaxPg { eta: 0.1, iters: 10 }.nominal_iters(), 10);
    assert_eq!(OracleSpec::Tight.nominal_iters(), 1);
}
