#![allow(dead_code)]

use nalgebra::DMatrix;
use pbrl_core::mdp::{TabularMdp, Transition};
use pbrl_core::policy::{Policy, Regularizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stochastic_rows(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let row: Vec<f64> = (0..width).map(|_| 0.05 + rng.gen::<f64>()).collect();
        let z: f64 = row.iter().sum();
        out.extend(row.into_iter().map(|p| p / z));
    }
    out
}

pub fn random_start(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    stochastic_rows(rng, 1, n)
}

pub fn random_mdp(rng: &mut ChaCha8Rng, n: usize, k: usize, gamma: f64, tau: f64, reg: Regularizer) -> TabularMdp {
    let reward = DMatrix::from_fn(n, k, |_, _| rng.gen::<f64>());
    let trans = Transition::new(n, k, stochastic_rows(rng, n * k, n)).unwrap();
    let rho = random_start(rng, n);
    TabularMdp::new(gamma, tau, reg, reward, trans, rho).unwrap()
}

pub fn entropy_mdp(rng: &mut ChaCha8Rng, n: usize, k: usize, gamma: f64, tau: f64) -> TabularMdp {
    random_mdp(rng, n, k, gamma, tau, Regularizer::NegEntropy)
}

pub fn random_policy(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Policy {
    Policy::direct(DMatrix::from_row_slice(n, k, &stochastic_rows(rng, n, k))).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-8)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + FD_STEP;
            let up = f(&xp);
            xp[i] = x[i] - FD_STEP;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Tangent basis `e_{s,a} − e_{s,0}` of the simplex product.
pub fn tangent_basis(n: usize, k: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::new();
    for s in 0..n {
        for a in 1..k {
            let mut d = DMatrix::zeros(n, k);
            d[(s, a)] = 1.0;
            d[(s, 0)] = -1.0;
            out.push(d);
        }
    }
    out
}

/// Directional central differences of `f` along the tangent basis, paired with
/// the same directional derivatives of an analytic gradient.
pub fn tangent_check(pi: &Policy, grad: &DMatrix<f64>, mut f: impl FnMut(&Policy) -> f64) -> (Vec<f64>, Vec<f64>) {
    let base = pi.probs();
    let (n, k) = (base.nrows(), base.ncols());
    let mut fd = Vec::new();
    let mut an = Vec::new();
    for d in tangent_basis(n, k) {
        let up = Policy::direct(&base + &d * FD_STEP).unwrap();
        let down = Policy::direct(&base - &d * FD_STEP).unwrap();
        fd.push((f(&up) - f(&down)) / (2.0 * FD_STEP));
        an.push(grad.dot(&d));
    }
    (an, fd)
}

pub fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn fixed_mdp(tau: f64) -> TabularMdp {
    let reward = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 2.0, 0.0, 0.3]);
    let p = vec![
        0.9, 0.1, 0.0, 0.2, 0.5, 0.3, //
        0.0, 0.6, 0.4, 0.3, 0.3, 0.4, //
        0.5, 0.0, 0.5, 0.1, 0.1, 0.8,
    ];
    let reg = if tau > 0.0 { Regularizer::NegEntropy } else { Regularizer::None };
    TabularMdp::new(0.9, tau, reg, reward, Transition::new(3, 2, p).unwrap(), vec![0.5, 0.3, 0.2]).unwrap()
}

pub fn fixed_policy() -> Policy {
    Policy::direct(DMatrix::from_row_slice(3, 2, &[0.7, 0.3, 0.4, 0.6, 0.5, 0.5])).unwrap()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

