mod common;

use std::sync::Arc;

use common::*;
use nalgebra::DMatrix;
use pbrl_core::applications::UpperObjective;
use pbrl_core::mdp::*;
use pbrl_core::oracle::{brute_force_optimal, soft_value_iteration, tight_oracle, GapKind, OracleCertificate};
use pbrl_core::penalty::*;
use pbrl_core::policy::{Policy, Regularizer};
use pbrl_core::PbrlError;
use rand::Rng;

fn table_mdp(base: &TabularMdp) -> ParamMdp {
    ParamMdp::with_reward_map(
        base.gamma,
        base.tau,
        base.regularizer.clone(),
        Arc::new(OffsetMap { base: flat(&base.reward) }),
        base.transition.clone(),
        base.initial_dist.clone(),
    )
    .unwrap()
}

fn joint_mdp(r: &mut rand_chacha::ChaCha8Rng, n: usize, na: usize, nb: usize, gamma: f64, tau: f64) -> ParamMdp {
    let reward: Vec<f64> = (0..n * na * nb).map(|_| r.gen()).collect();
    let model = Arc::new(JointModel::new(n, na, nb, reward, stochastic_rows(r, n * na * nb, n)).unwrap());
    ParamMdp::leader_marginal(model, gamma, tau, Regularizer::NegEntropy, random_start(r, n)).unwrap()
}

fn tight_at(mdp: &ParamMdp, x: &[f64]) -> OracleCertificate {
    soft_value_iteration(&mdp.at(x).unwrap(), 1e-12).unwrap()
}

fn one_state(reward: &[f64], tau: f64) -> ParamMdp {
    let reg = if tau > 0.0 { Regularizer::NegEntropy } else { Regularizer::None };
    let k = reward.len();
    let base = TabularMdp::new(
        0.0,
        tau,
        reg,
        DMatrix::from_row_slice(1, k, reward),
        Transition::new(1, k, vec![1.0; k]).unwrap(),
        vec![1.0],
    )
    .unwrap();
    table_mdp(&base)
}

#[test]
fn value_penalty_examples() {
    let pm = one_state(&[0.0, 1.0], 0.0);
    let x = [0.0, 0.0];
    let cert = brute_force_optimal(&pm.at(&x).unwrap()).unwrap();
    assert!((value_penalty_eval(&pm, &x, &Policy::uniform(1, 2), &cert).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(value_penalty_eval(&pm, &x, &cert.policy_hat, &cert).unwrap(), 0.0);

    let mut r = rng(71);
    let base = random_mdp(&mut r, 4, 2, 0.9, 0.0, Regularizer::None);
    let pm = table_mdp(&base);
    let x = vec![0.0; 8];
    let cert = brute_force_optimal(&base).unwrap();
    let uni = Policy::uniform(4, 2);
    let expect = base.value_rho(&cert.policy_hat).unwrap() - base.value_rho(&uni).unwrap();
    assert!((value_penalty_eval(&pm, &x, &uni, &cert).unwrap() - expect).abs() <= 1e-8);
}

#[test]
fn value_penalty_flags_oracle_failure() {
    let pm = one_state(&[0.0, 1.0], 0.0);
    let bad = OracleCertificate {
        policy_hat: Policy::deterministic(&[0], 2).unwrap(),
        gap_bound: 0.0,
        gap_kind: GapKind::ValueSuboptimality,
        iterations_used: 1,
        contraction: None,
        near_ties: 0,
    };
    let r = value_penalty_eval(&pm, &[0.0, 0.0], &Policy::deterministic(&[1], 2).unwrap(), &bad);
    assert!(matches!(r, Err(PbrlError::OracleFailure { .. })));
    let loose = OracleCertificate { gap_bound: 2.0, ..bad };
    assert_eq!(value_penalty_eval(&pm, &[0.0, 0.0], &Policy::deterministic(&[1], 2).unwrap(), &loose).unwrap(), 0.0);
}

#[test]
fn value_penalty_gradient_special_cases() {
    let mut r = rng(72);
    let base = entropy_mdp(&mut r, 3, 2, 0.9, 0.2);
    let pm = table_mdp(&base);
    let x = random_vec(&mut r, 6, 0.5);
    let cert = tight_at(&pm, &x);
    let (gx, _) = value_penalty_grad(&pm, &x, &cert.policy_hat, &cert, GradForm::RewardOnly).unwrap();
    assert!(norm(&gx) < 1e-15);

    let base = entropy_mdp(&mut r, 3, 2, 0.0, 0.2);
    let pm = table_mdp(&base);
    let pi = random_policy(&mut r, 3, 2);
    let cert = tight_at(&pm, &x);
    let (gx, _) = value_penalty_grad(&pm, &x, &pi, &cert, GradForm::RewardOnly).unwrap();
    for s in 0..3 {
        for a in 0..2 {
            let expect = base.initial_dist[s] * (cert.policy_hat.prob(s, a) - pi.prob(s, a));
            assert!((gx[s * 2 + a] - expect).abs() < 1e-14);
        }
    }
    assert!(matches!(
        value_penalty_grad(&pm, &x, &pi, &cert, GradForm::Stackelberg),
        Err(PbrlError::UnsupportedStructure(_))
    ));
}

fn check_penalty_fd(kind: PenaltyKind, pm: &ParamMdp, form: GradForm, x: &[f64], pi: &Policy) {
    let cert = tight_at(pm, x);
    let (gx, gy) = match kind {
        PenaltyKind::Value => value_penalty_grad(pm, x, pi, &cert, form).unwrap(),
        _ => bellman_penalty_grad(pm, x, pi, &cert, form).unwrap(),
    };
    let eval = |z: &[f64], p: &Policy| {
        let c = soft_value_iteration(&pm.at(z).unwrap(), 1e-10).unwrap();
        match kind {
            PenaltyKind::Value => pm.at(z).unwrap().value_rho(&c.policy_hat).unwrap() - pm.at(z).unwrap().value_rho(p).unwrap(),
            _ => {
                let m = pm.at(z).unwrap();
                let q = bellman_q(&m, &c).unwrap();
                bellman_g(&m, &q, &p.probs()) - bellman_v(&m, &q).unwrap().0
            }
        }
    };
    let fd = fd_grad(x, |z| eval(z, pi));
    assert!(rel_err(&gx, &fd) <= 1e-4, "{kind:?} x: {}", rel_err(&gx, &fd));
    let (an, fdy) = tangent_check(pi, &gy, |p| eval(x, p));
    assert!(rel_err(&an, &fdy) <= 1e-4, "{kind:?} y: {}", rel_err(&an, &fdy));
}

#[test]
fn penalty_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(80 + seed);
        let base = entropy_mdp(&mut r, 3, 3, 0.9, 0.1);
        let map = SigmoidIncentiveMap { base: flat(&base.reward), scale: 0.5 };
        let pm = ParamMdp::with_reward_map(0.9, 0.1, Regularizer::NegEntropy, Arc::new(map), base.transition.clone(), base.initial_dist.clone()).unwrap();
        let x = random_vec(&mut r, 9, 1.0);
        let pi = random_policy(&mut r, 3, 3);
        check_penalty_fd(PenaltyKind::Value, &pm, GradForm::RewardOnly, &x, &pi);
        check_penalty_fd(PenaltyKind::Bellman, &pm, GradForm::RewardOnly, &x, &pi);

        let jm = joint_mdp(&mut r, 3, 2, 3, 0.8, 0.3);
        let x = random_vec(&mut r, 6, 1.0);
        check_penalty_fd(PenaltyKind::Value, &jm, GradForm::Stackelberg, &x, &pi);
        check_penalty_fd(PenaltyKind::Bellman, &jm, GradForm::Stackelberg, &x, &pi);
    }
}

#[test]
fn bellman_penalty_examples() {
    let pm = one_state(&[1.0, 2.0], 1.0);
    let x = [0.0, 0.0];
    let cert = tight_oracle(&pm.at(&x).unwrap()).unwrap();
    let m = pm.at(&x).unwrap();
    assert_close(flat(&bellman_q(&m, &cert).unwrap()).as_slice(), &[-1.0, -2.0], 1e-12);
    let p = bellman_penalty_eval(&pm, &x, &Policy::uniform(1, 2), &cert).unwrap();
    assert!((p - 0.1201145069582773).abs() < 1e-12);

    let g = |t: f64| -t - 2.0 * (1.0 - t) + Regularizer::NegEntropy.value(0, &[t, 1.0 - t]);
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let (a, b) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
        if g(a) < g(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    assert!((p - (g(0.5) - g(0.5 * (lo + hi)))).abs() < 1e-10);

    assert!(bellman_penalty_eval(&pm, &x, &cert.policy_hat, &cert).unwrap() <= 1e-12);
    let (gx, _) = bellman_penalty_grad(&pm, &x, &cert.policy_hat, &cert, GradForm::RewardOnly).unwrap();
    assert!(norm(&gx) < 1e-15);
}

#[test]
fn bellman_penalty_rejects_bad_inputs() {
    let pm = one_state(&[1.0, 2.0], 0.0);
    let cert = brute_force_optimal(&pm.at(&[0.0, 0.0]).unwrap()).unwrap();
    assert!(matches!(bellman_penalty_eval(&pm, &[0.0, 0.0], &Policy::uniform(1, 2), &cert), Err(PbrlError::Config(_))));
    let pm = one_state(&[1.0, 2.0], 1.0);
    let cert = tight_oracle(&pm.at(&[0.0, 0.0]).unwrap()).unwrap();
    let soft = Policy::softmax(DMatrix::zeros(1, 2)).unwrap();
    assert!(matches!(bellman_penalty_eval(&pm, &[0.0, 0.0], &soft, &cert), Err(PbrlError::ContractViolation(_))));
}

#[test]
fn bellman_gradient_at_zero_discount_matches_value_penalty() {
    let mut r = rng(73);
    let base = entropy_mdp(&mut r, 3, 3, 0.0, 0.4);
    let pm = table_mdp(&base);
    let x = random_vec(&mut r, 9, 1.0);
    let pi = random_policy(&mut r, 3, 3);
    let cert = tight_at(&pm, &x);
    let (a, _) = bellman_penalty_grad(&pm, &x, &pi, &cert, GradForm::RewardOnly).unwrap();
    let (b, _) = value_penalty_grad(&pm, &x, &pi, &cert, GradForm::RewardOnly).unwrap();
    assert_close(&a, &b, 1e-14);
}

#[test]
fn bellman_penalty_strong_convexity_bound() {
    for seed in 0..50 {
        let mut r = rng(120 + seed);
        let tau = 0.05 + r.gen::<f64>();
        let reg = [Regularizer::NegEntropy, Regularizer::SquaredL2][seed as usize % 2].clone();
        let base = random_mdp(&mut r, 4, 3, 0.85, tau, reg);
        let pm = table_mdp(&base);
        let x = vec![0.0; 12];
        let cert = tight_oracle(&base).unwrap();
        let pi = random_policy(&mut r, 4, 3);
        let p = bellman_penalty_eval(&pm, &x, &pi, &cert).unwrap();
        let star = bellman_argmin(&pm, &x, &cert).unwrap();
        let dist: f64 = (0..4)
            .map(|s| base.initial_dist[s] * (0..3).map(|a| (pi.prob(s, a) - star.prob(s, a)).powi(2)).sum::<f64>())
            .sum();
        assert!(p >= 0.5 * tau * dist - 1e-12, "seed {seed}");
    }
}

#[test]
fn bellman_argmin_is_the_regularized_optimum() {
    for seed in 0..30 {
        let mut r = rng(150 + seed);
        let base = entropy_mdp(&mut r, 4, 3, 0.9, 0.1 + 0.05 * seed as f64);
        let pm = table_mdp(&base);
        let x = vec![0.0; 12];
        let cert = soft_value_iteration(&base, 1e-12).unwrap();
        let arg = bellman_argmin(&pm, &x, &cert).unwrap();
        assert!(arg.max_tv(&cert.policy_hat) <= 1e-6);
    }
}

#[test]
fn penalties_are_nonnegative_and_vanish_at_the_optimum() {
    for seed in 0..40 {
        let mut r = rng(200 + seed);
        let base = entropy_mdp(&mut r, 4, 2, 0.9, 0.1);
        let pm = table_mdp(&base);
        let x = random_vec(&mut r, 8, 1.0);
        let cert = tight_at(&pm, &x);
        for kind in [PenaltyKind::Value, PenaltyKind::Bellman] {
            for _ in 0..5 {
                let pi = random_policy(&mut r, 4, 2);
                let e = penalty_eval(kind, &pm, &x, &pi, &cert, GradForm::RewardOnly).unwrap();
                assert!(e.value >= -1e-9);
            }
            let e = penalty_eval(kind, &pm, &x, &cert.policy_hat, &cert, GradForm::RewardOnly).unwrap();
            assert!(e.value.abs() <= 1e-8);
        }
    }
}

#[test]
fn gradient_dominance_holds() {
    for seed in 0..100 {
        let mut r = rng(300 + seed);
        let tau = if seed % 2 == 0 { 0.0 } else { 0.3 };
        let reg = if tau > 0.0 { Regularizer::NegEntropy } else { Regularizer::None };
        let m = random_mdp(&mut r, 4, 3, 0.9, tau, reg);
        let pi = random_policy(&mut r, 4, 3);
        let star = m.value_rho(&tight_oracle(&m).unwrap().policy_hat).unwrap();
        let lhs = m.linearized_improvement(&pi).unwrap();
        let rhs = (1.0 - m.gamma) * m.min_start() * (star - m.value_rho(&pi).unwrap());
        assert!(lhs >= rhs - 1e-10, "seed {seed}: {lhs} < {rhs}");
    }
}

#[derive(Debug)]
struct Quadratic {
    target: Vec<f64>,
    weight: DMatrix<f64>,
}

impl UpperObjective for Quadratic {
    fn evaluate(&self, x: &[f64], pi: &Policy) -> pbrl_core::Result<f64> {
        let q: f64 = x.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(0.5 * q + pi.probs().component_mul(&self.weight).sum())
    }

    fn grad(&self, x: &[f64], _pi: &Policy) -> pbrl_core::Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((x.iter().zip(&self.target).map(|(a, b)| a - b).collect(), self.weight.clone()))
    }
}

#[test]
fn penalized_objective_special_cases() {
    let mut r = rng(74);
    let base = entropy_mdp(&mut r, 3, 2, 0.9, 0.2);
    let pm = table_mdp(&base);
    let x = random_vec(&mut r, 6, 1.0);
    let upper = Quadratic { target: vec![0.3; 6], weight: DMatrix::from_fn(3, 2, |s, a| (s + a) as f64 * 0.1) };
    let pi = random_policy(&mut r, 3, 2);
    let cert = tight_at(&pm, &x);

    let spec = PenaltySpec::new(PenaltyKind::Value, 0.0).unwrap();
    let (f, gx, gy) = penalized_objective(&upper, &spec, &pm, &x, &pi, &cert, GradForm::RewardOnly).unwrap();
    let (ex, ey) = upper.grad(&x, &pi).unwrap();
    assert_eq!(f, upper.evaluate(&x, &pi).unwrap());
    assert_eq!((gx, gy), (ex, ey));

    for kind in [PenaltyKind::Value, PenaltyKind::Bellman] {
        let spec = PenaltySpec::new(kind, 5.0).unwrap();
        let (f, _, _) = penalized_objective(&upper, &spec, &pm, &x, &cert.policy_hat, &cert, GradForm::RewardOnly).unwrap();
        assert!((f - upper.evaluate(&x, &cert.policy_hat).unwrap()).abs() <= 5e-8);
    }
    assert!(PenaltySpec::new(PenaltyKind::Value, -1.0).is_err());
    assert!(matches!(
        penalty_eval(PenaltyKind::NikaidoIsoda, &pm, &x, &pi, &cert, GradForm::RewardOnly),
        Err(PbrlError::Config(_))
    ));
}

#[test]
fn estimated_gradient_error_is_linear_in_oracle_error() {
    let mut r = rng(75);
    let base = entropy_mdp(&mut r, 4, 3, 0.9, 0.2);
    let pm = table_mdp(&base);
    let x = random_vec(&mut r, 12, 1.0);
    let pi = random_policy(&mut r, 4, 3);
    let exact = tight_at(&pm, &x);
    let (gx0, _) = value_penalty_grad(&pm, &x, &pi, &exact, GradForm::RewardOnly).unwrap();
    let uni = Policy::uniform(4, 3);
    let mut pts = Vec::new();
    for i in 1..=20 {
        let t = 0.02 * i as f64;
        let mixed = exact.policy_hat.table() * (1.0 - t) + uni.table() * t;
        let cert = OracleCertificate { policy_hat: Policy::direct(mixed).unwrap(), ..exact.clone() };
        let (gx, _) = value_penalty_grad(&pm, &x, &pi, &cert, GradForm::RewardOnly).unwrap();
        let err = norm(&gx.iter().zip(&gx0).map(|(a, b)| a - b).collect::<Vec<_>>());
        let dist = norm(&flat(&(cert.policy_hat.table() - exact.policy_hat.table())));
        pts.push((dist, err));
    }
    let lv = pts.iter().map(|(d, e)| d * e).sum::<f64>() / pts.iter().map(|(d, _)| d * d).sum::<f64>();
    assert!(lv > 0.0 && lv.is_finite());
    for (d, e) in &pts {
        assert!(*e <= 1.5 * lv * d + 1e-12);
    }
}

#[derive(Debug)]
struct ScalarShift {
    base: Vec<f64>,
    dir: Vec<f64>,
}

impl ParamMap for ScalarShift {
    fn dim_x(&self) -> usize {
        1
    }
    fn output_len(&self) -> usize {
        self.base.len()
    }
    fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        self.base.iter().zip(&self.dir).map(|(b, d)| b + x[0] * d).collect()
    }
    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dir.len(), 1, &self.dir)
    }
}

#[test]
fn grid_minimizer_of_penalized_objective_is_nearly_feasible() {
    let reward = vec![1.0, 0.0, 0.2, 0.5];
    let map = ScalarShift { base: reward, dir: vec![-1.0, 1.0, 0.5, -0.5] };
    let trans = Transition::new(2, 2, vec![0.8, 0.2, 0.1, 0.9, 0.5, 0.5, 0.3, 0.7]).unwrap();
    let pm = ParamMdp::with_reward_map(0.5, 0.0, Regularizer::None, Arc::new(map), trans, vec![0.5, 0.5]).unwrap();
    let upper = Quadratic { target: vec![0.3], weight: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]) };
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let xs: Vec<f64> = (0..=10).map(|i| -1.0 + 0.2 * i as f64).collect();
    let mut fmax: f64 = 0.0;
    let mut cells = Vec::new();
    for &x in &xs {
        let m = pm.at(&[x]).unwrap();
        let cert = brute_force_optimal(&m).unwrap();
        for &a in &grid {
            for &b in &grid {
                let pi = Policy::direct(DMatrix::from_row_slice(2, 2, &[a, 1.0 - a, b, 1.0 - b])).unwrap();
                let f = upper.evaluate(&[x], &pi).unwrap();
                let p = value_penalty_eval(&pm, &[x], &pi, &cert).unwrap();
                fmax = fmax.max(f.abs());
                cells.push((f, p));
            }
        }
    }
    for lambda in [1.0, 10.0, 100.0] {
        let best = cells.iter().min_by(|u, v| (u.0 + lambda * u.1).total_cmp(&(v.0 + lambda * v.1))).unwrap();
        assert!(best.1 <= 2.0 * fmax / lambda);
    }
}

#[test]
fn diameter_diagnostic() {
    assert!((simplex_product_diameter(2) - 2.0).abs() < 1e-15);
    let a = Policy::deterministic(&[0, 1, 0], 3).unwrap();
    let b = Policy::deterministic(&[1, 0, 2], 3).unwrap();
    assert!(norm(&flat(&(a.table() - b.table()))) <= simplex_product_diameter(3) + 1e-15);
}
