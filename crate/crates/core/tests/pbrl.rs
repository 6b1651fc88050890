mod common;

use std::sync::Arc;

use common::*;
use nalgebra::DMatrix;
use pbrl_core::applications::{Payoff, StackelbergGame, UpperObjective};
use pbrl_core::mdp::{OffsetMap, ParamMdp, TabularMdp, Transition};
use pbrl_core::oracle::{projected_pg_solve, softmax_pg_solve, OracleSpec, PgConfig};
use pbrl_core::pbrl::*;
use pbrl_core::penalty::PenaltyKind;
use pbrl_core::policy::{Policy, Regularizer};
use pbrl_core::zerosum::{GameUpperObjective, JointPolicy, ZeroSumBilevelProblem, ZeroSumGame};
use pbrl_core::PbrlError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `½‖x − t‖²`, independent of the policy.
struct Quadratic {
    target: Vec<f64>,
    scale: f64,
}

impl UpperObjective for Quadratic {
    fn evaluate(&self, x: &[f64], _pi: &Policy) -> pbrl_core::Result<f64> {
        Ok(0.5 * self.scale * x.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    fn grad(&self, x: &[f64], pi: &Policy) -> pbrl_core::Result<(Vec<f64>, DMatrix<f64>)> {
        let gx = x.iter().zip(&self.target).map(|(a, b)| self.scale * (a - b)).collect();
        Ok((gx, DMatrix::zeros(pi.n_states(), pi.n_actions())))
    }
}

impl GameUpperObjective for Quadratic {
    fn evaluate(&self, x: &[f64], _joint: &JointPolicy) -> pbrl_core::Result<f64> {
        Ok(0.5 * self.scale * x.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    fn grad(&self, x: &[f64], joint: &JointPolicy) -> pbrl_core::Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let gx = x.iter().zip(&self.target).map(|(a, b)| self.scale * (a - b)).collect();
        let z1 = DMatrix::zeros(joint.pi1.n_states(), joint.pi1.n_actions());
        let z2 = DMatrix::zeros(joint.pi2.n_states(), joint.pi2.n_actions());
        Ok((gx, z1, z2))
    }
}

/// Two states, one action: every policy is optimal, so the penalty vanishes.
fn single_action_problem(target: Vec<f64>) -> BilevelProblem {
    let trans = Transition::new(2, 1, vec![0.3, 0.7, 0.6, 0.4]).unwrap();
    let mdp = ParamMdp::with_reward_map(0.9, 0.5, Regularizer::NegEntropy, Arc::new(OffsetMap::table(2)), trans, vec![0.5, 0.5])
        .unwrap();
    BilevelProblem {
        mdp: Arc::new(mdp),
        upper: Arc::new(Quadratic { target, scale: 1.0 }),
        x0: vec![0.0, 0.0],
        y0: None,
    }
}

fn random_game(r: &mut ChaCha8Rng, n: usize, nl: usize, nf: usize) -> Arc<StackelbergGame> {
    let len = n * nl * nf;
    let rl: Vec<f64> = (0..len).map(|_| r.gen()).collect();
    let rf: Vec<f64> = (0..len).map(|_| r.gen()).collect();
    let reg = Regularizer::NegEntropy;
    Arc::new(
        StackelbergGame::new(n, nl, nf, 0.5, 1.0, reg.clone(), reg, rl, rf, stochastic_rows(r, len, n), random_start(r, n))
            .unwrap(),
    )
}

fn random_zs(r: &mut ChaCha8Rng, n: usize, n1: usize, n2: usize) -> Arc<ZeroSumGame> {
    let len = n * n1 * n2;
    let base: Vec<f64> = (0..len).map(|_| r.gen()).collect();
    let reg = Regularizer::NegEntropy;
    Arc::new(
        ZeroSumGame::new(
            n,
            n1,
            n2,
            0.5,
            1.0,
            reg.clone(),
            reg,
            Arc::new(OffsetMap { base }),
            stochastic_rows(r, len, n),
            random_start(r, n),
        )
        .unwrap(),
    )
}

fn stackelberg_cfg() -> PbrlConfig {
    PbrlConfig { outer_iters: 20, ..PbrlConfig::default() }
}

#[test]
fn vanishing_penalty_reduces_to_projected_gradient_descent() {
    let target = vec![0.7, -1.3];
    let problem = single_action_problem(target.clone());
    let cfg = PbrlConfig { lambda: 3.0, alpha: 0.1, outer_iters: 1000, ..PbrlConfig::default() };
    let trace = pbrl_run(&problem, &cfg).unwrap();
    assert_close(&trace.final_x, &target, 1e-6);
    assert!(trace.records.iter().all(|r| r.p.abs() <= 1e-12));
    assert!(trace.final_point.f <= 1e-12);

    let boxed = PbrlConfig { x_set: XSet::Box { lo: -1.0, hi: 1.0 }, ..cfg };
    let trace = pbrl_run(&single_action_problem(vec![2.0, 0.3]), &boxed).unwrap();
    assert_close(&trace.final_x, &[1.0, 0.3], 1e-6);
}

#[test]
fn zero_step_leaves_iterates_fixed() {
    let mut r = rng(1300);
    let game = random_game(&mut r, 3, 2, 2);
    let problem = BilevelProblem::stackelberg(game);
    let cfg = PbrlConfig { alpha: 0.0, ..stackelberg_cfg() };
    let trace = pbrl_run(&problem, &cfg).unwrap();
    assert_eq!(trace.final_x, problem.x0);
    assert!(trace.final_y[0].iter().all(|&p| (p - 0.5).abs() < 1e-15));
    let f0 = trace.records[0].f;
    assert!(trace.records.iter().all(|rec| rec.f == f0 && rec.grad_norm_sq == 0.0));
}

#[test]
fn runs_are_deterministic_given_the_seed() {
    let mut r = rng(1301);
    let problem = BilevelProblem::stackelberg(random_game(&mut r, 3, 2, 3));
    for gradient in [GradientMode::Exact, GradientMode::MonteCarlo] {
        let cfg = PbrlConfig { gradient, seed: 9, ..stackelberg_cfg() };
        let a = pbrl_run(&problem, &cfg).unwrap();
        let b = pbrl_run(&problem, &cfg).unwrap();
        assert!(a.same_results(&b));
        if gradient == GradientMode::MonteCarlo {
            let c = pbrl_run(&problem, &PbrlConfig { seed: 10, ..cfg }).unwrap();
            assert!(!a.same_results(&c));
        }
    }
}

#[test]
fn iterates_stay_feasible() {
    let mut r = rng(1302);
    let problem = BilevelProblem::stackelberg(random_game(&mut r, 4, 2, 3));
    let cfg = PbrlConfig {
        outer_iters: 1,
        alpha: 0.5,
        x_set: XSet::Box { lo: -0.2, hi: 0.2 },
        gradient: GradientMode::MonteCarlo,
        ..stackelberg_cfg()
    };
    let mut state = initial_state(&problem, &cfg).unwrap();
    for _ in 0..30 {
        let (_, next) = pbrl_run_from(&problem, &cfg, state).unwrap();
        state = next;
        assert!(state.x.iter().all(|v| (-0.2..=0.2).contains(v)));
        let y = &state.y[0];
        for s in 0..y.nrows() {
            assert!((y.row(s).sum() - 1.0).abs() <= 1e-12);
            assert!(y.row(s).iter().all(|&p| p >= 0.0));
        }
    }

    let logits = PbrlConfig { y_param: YParam::Logits, outer_iters: 30, ..cfg };
    let trace = pbrl_run(&problem, &logits).unwrap();
    for row in trace.final_y[0].chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn gradient_mapping_identities() {
    let target = vec![0.4, -0.2];
    let problem = single_action_problem(target.clone());
    let cfg = PbrlConfig::default();
    let pi = Policy::uniform(2, 1);
    let at_min = projected_grad_norm(&problem, &cfg, &target, &pi).unwrap();
    assert!(at_min <= 1e-20);

    let origin = single_action_problem(vec![0.0, 0.0]);
    let z = [0.3, -1.1];
    let g = projected_grad_norm(&origin, &cfg, &z, &pi).unwrap();
    assert!((g - (0.09 + 1.21)).abs() <= 1e-12);

    let bad = PbrlConfig { alpha: 0.0, ..cfg };
    assert!(matches!(projected_grad_norm(&problem, &bad, &target, &pi), Err(PbrlError::Config(_))));
}

#[test]
fn zero_iterations_report_the_initial_point() {
    let mut r = rng(1303);
    let problem = BilevelProblem::stackelberg(random_game(&mut r, 3, 2, 2));
    let cfg = PbrlConfig { outer_iters: 0, ..stackelberg_cfg() };
    let trace = pbrl_run(&problem, &cfg).unwrap();
    assert!(trace.records.is_empty());
    assert_eq!(trace.final_point.env_steps, 0);
    assert!(trace.final_point.f.is_finite() && trace.final_point.follower_gap >= 0.0);
    assert!(trace.summary.avg_grad_norm_sq.is_nan());
    let one = pbrl_run(&problem, &PbrlConfig { outer_iters: 1, oracle: OracleSpec::Tight, ..cfg }).unwrap();
    assert_eq!(one.records[0].f, trace.final_point.f);
}

#[test]
fn blow_up_is_reported_with_the_partial_trace() {
    let mut problem = single_action_problem(vec![0.0, 0.0]);
    problem.upper = Arc::new(Quadratic { target: vec![0.0, 0.0], scale: -10.0 });
    problem.x0 = vec![1.0, 1.0];
    let cfg = PbrlConfig { alpha: 1.0, outer_iters: 100, ..PbrlConfig::default() };
    match pbrl_run(&problem, &cfg) {
        Err(PbrlError::Diverged { iteration, value, trace }) => {
            assert!(iteration >= 1 && iteration < 100);
            assert!(value.abs() > DIVERGENCE_THRESHOLD);
            assert_eq!(trace.records.len(), iteration);
        }
        other => panic!("expected divergence, got {:?}", other.map(|t| t.records.len())),
    }
}

#[test]
fn environment_steps_follow_the_accounting_formula() {
    let mut r = rng(1304);
    let game = random_game(&mut r, 3, 2, 2);
    let problem = BilevelProblem::stackelberg(game.clone());
    let oracle = OracleSpec::SoftmaxPg { eta: 0.1, iters: 3 };
    let base = PbrlConfig { oracle, outer_iters: 4, traj_len: 5, batch: 16, ..PbrlConfig::default() };
    let cases = [(PenaltyKind::Value, 3 + 2 + 3), (PenaltyKind::Bellman, 3 + 2 + 2)];
    for (penalty, units) in cases {
        let trace = pbrl_run(&problem, &PbrlConfig { penalty, ..base }).unwrap();
        for (k, rec) in trace.records.iter().enumerate() {
            assert_eq!(rec.env_steps, (k as u64 + 1) * units * 80);
        }
        assert_eq!(trace.final_point.env_steps, 4 * units * 80);
    }
    let indep = independent_pg_run(&game, &base).unwrap();
    assert_eq!(indep.final_point.env_steps, 4 * 2 * 80);

    let zs = ZeroSumBilevelProblem {
        game: random_zs(&mut r, 2, 2, 2),
        upper: Arc::new(Quadratic { target: vec![0.0; 8], scale: 1.0 }),
        x0: vec![0.0; 8],
        init: None,
    };
    let trace = pbrl_zs_run(&zs, &PbrlConfig { penalty: PenaltyKind::NikaidoIsoda, ..base }).unwrap();
    assert_eq!(trace.final_point.env_steps, 4 * (3 * 2 + 2 + 4) * 80);
}

#[test]
fn chunked_runs_match_a_single_run() {
    let mut r = rng(1305);
    let problem = BilevelProblem::stackelberg(random_game(&mut r, 3, 2, 2));
    let cfg = PbrlConfig { outer_iters: 10, gradient: GradientMode::MonteCarlo, seed: 4, ..PbrlConfig::default() };
    let whole = pbrl_run(&problem, &cfg).unwrap();
    let mut state = initial_state(&problem, &cfg).unwrap();
    let mut parts = Vec::new();
    for k in [4, 6] {
        let (t, s) = pbrl_run_from(&problem, &PbrlConfig { outer_iters: k, ..cfg }, state).unwrap();
        parts.push(t);
        state = s;
    }
    let merged = merge_traces(parts).unwrap();
    assert!(merged.same_results(&whole));
    let (m, w) = (&merged.summary, &whole.summary);
    assert_eq!(m.avg_grad_norm_sq.to_bits(), w.avg_grad_norm_sq.to_bits());
    assert_eq!(m.descent_violations, w.descent_violations);
    assert!(m.eps_needed.is_nan() && w.eps_needed.is_nan());
    assert!(merge_traces(Vec::new()).is_err());
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut r = rng(1306);
    let problem = BilevelProblem::stackelberg(random_game(&mut r, 2, 2, 2));
    let base = stackelberg_cfg();
    let bad = [
        PbrlConfig { lambda: -1.0, ..base },
        PbrlConfig { alpha: f64::NAN, ..base },
        PbrlConfig { batch: 0, ..base },
        PbrlConfig { x_set: XSet::Box { lo: 1.0, hi: -1.0 }, ..base },
        PbrlConfig { penalty: PenaltyKind::NikaidoIsoda, ..base },
        PbrlConfig { penalty: PenaltyKind::Bellman, gradient: GradientMode::MonteCarlo, ..base },
    ];
    for cfg in bad {
        assert!(matches!(pbrl_run(&problem, &cfg), Err(PbrlError::Config(_))), "{cfg:?}");
    }

    let trans = Transition::new(2, 2, stochastic_rows(&mut r, 4, 2)).unwrap();
    let zero_tau = ParamMdp::with_reward_map(0.5, 0.0, Regularizer::None, Arc::new(OffsetMap::table(4)), trans, vec![0.5, 0.5])
        .unwrap();
    let p0 = BilevelProblem {
        mdp: Arc::new(zero_tau),
        upper: Arc::new(Quadratic { target: vec![0.0; 4], scale: 1.0 }),
        x0: vec![0.0; 4],
        y0: None,
    };
    let cfg = PbrlConfig { penalty: PenaltyKind::Bellman, ..base };
    assert!(matches!(pbrl_run(&p0, &cfg), Err(PbrlError::Config(_))));
    let short = BilevelProblem { x0: vec![0.0; 3], ..p0 };
    assert!(pbrl_run(&short, &base).is_err());

    let zs = ZeroSumBilevelProblem {
        game: random_zs(&mut r, 2, 2, 2),
        upper: Arc::new(Quadratic { target: vec![0.0; 8], scale: 1.0 }),
        x0: vec![0.0; 8],
        init: None,
    };
    assert!(matches!(pbrl_zs_run(&zs, &base), Err(PbrlError::Config(_))));
}

#[test]
fn exact_tight_runs_descend_with_small_steps() {
    let mut r = rng(1307);
    let problem = BilevelProblem::stackelberg(random_game(&mut r, 4, 2, 3));
    let cfg = PbrlConfig {
        alpha: 0.01,
        outer_iters: 200,
        oracle: OracleSpec::Tight,
        track_exact: true,
        ..PbrlConfig::default()
    };
    let trace = pbrl_run(&problem, &cfg).unwrap();
    assert_eq!(trace.summary.descent_violations, 0);
    assert!(trace.records.iter().all(|rec| rec.penalty_grad_err_sq <= 1e-16));
    assert!(trace.records.iter().all(|rec| (rec.exact_grad_norm_sq - rec.grad_norm_sq).abs() <= 1e-9));
    assert!(trace.final_point.f_lambda < trace.records[0].f_lambda);
    assert!(trace.summary.eps_needed == 0.0);
}

#[test]
fn zero_sum_loop_special_cases() {
    let mut r = rng(1308);
    let game = random_zs(&mut r, 2, 2, 3);
    let target: Vec<f64> = random_vec(&mut r, 12, 1.0);
    let problem = ZeroSumBilevelProblem {
        game,
        upper: Arc::new(Quadratic { target: target.clone(), scale: 1.0 }),
        x0: vec![0.0; 12],
        init: None,
    };
    let base = PbrlConfig { penalty: PenaltyKind::NikaidoIsoda, outer_iters: 30, ..PbrlConfig::default() };

    let flat = pbrl_zs_run(&problem, &PbrlConfig { alpha: 0.0, ..base }).unwrap();
    assert_eq!(flat.final_x, problem.x0);
    assert!(flat.records.iter().all(|rec| rec.f == flat.records[0].f && rec.follower_gap == flat.records[0].follower_gap));

    let pure = pbrl_zs_run(&problem, &PbrlConfig { lambda: 0.0, alpha: 0.1, outer_iters: 400, ..base }).unwrap();
    assert_close(&pure.final_x, &target, 1e-6);
    assert!(pure.final_y[0].iter().all(|&p| (p - 0.5).abs() < 1e-15));
    assert!(pure.final_y[1].iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    assert!(pure.records.iter().all(|rec| rec.follower_gap >= 0.0));

    let a = pbrl_zs_run(&problem, &base).unwrap();
    let b = pbrl_zs_run(&problem, &base).unwrap();
    assert!(a.same_results(&b));
    assert!(a.final_point.follower_gap < a.records[0].follower_gap);
}

#[test]
fn independent_learners_decouple_without_interaction() {
    let mut r = rng(1309);
    let (n, nl, nf) = (3, 2, 3);
    let u: Vec<f64> = (0..n * nl).map(|_| r.gen()).collect();
    let w: Vec<f64> = (0..n * nf).map(|_| r.gen()).collect();
    let p = stochastic_rows(&mut r, n, n);
    let rho = random_start(&mut r, n);
    let mut rl = Vec::new();
    let mut rf = Vec::new();
    let mut trans = Vec::new();
    for s in 0..n {
        for l in 0..nl {
            for f in 0..nf {
                rl.push(u[s * nl + l]);
                rf.push(w[s * nf + f]);
                trans.extend_from_slice(&p[s * n..(s + 1) * n]);
            }
        }
    }
    let reg = Regularizer::NegEntropy;
    let game = StackelbergGame::new(n, nl, nf, 0.5, 1.0, reg.clone(), reg.clone(), rl, rf, trans, rho.clone()).unwrap();
    let (alpha, iters) = (0.2, 50);
    let cfg = PbrlConfig { alpha, outer_iters: iters, ..PbrlConfig::default() };
    let trace = independent_pg_run(&game, &cfg).unwrap();

    let tile = |k: usize| {
        let t: Vec<f64> = (0..n * k).flat_map(|i| p[(i / k) * n..(i / k + 1) * n].to_vec()).collect();
        Transition::new(n, k, t).unwrap()
    };
    let lead = TabularMdp::new(0.5, 1.0, reg.clone(), DMatrix::from_row_slice(n, nl, &u), tile(nl), rho.clone()).unwrap();
    let fol = TabularMdp::new(0.5, 1.0, reg, DMatrix::from_row_slice(n, nf, &w), tile(nf), rho).unwrap();
    let pg = PgConfig { eta: alpha, iters };
    let lead_ref = softmax_pg_solve(&lead, &pg, None).unwrap().policy_hat.probs();
    let fol_ref = projected_pg_solve(&fol, &pg, None).unwrap().policy_hat.probs();

    let lead_run = game.leader_policy(&trace.final_x).unwrap().probs();
    assert_close(lead_run.as_slice(), lead_ref.as_slice(), 1e-10);
    assert_close(&trace.final_y[0], fol_ref.transpose().as_slice(), 1e-10);
    let v = game.value_rho(&trace.final_x, &Policy::direct(fol_ref).unwrap(), Payoff::Leader).unwrap();
    assert!((trace.final_point.metric - v).abs() <= 1e-10);

    let still = independent_pg_run(&game, &PbrlConfig { alpha: 0.0, ..cfg }).unwrap();
    assert!(still.final_x.iter().all(|&v| v == 0.0));
}
