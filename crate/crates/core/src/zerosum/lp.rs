//! Exact minimax solutions of matrix games.

use nalgebra::DMatrix;

use crate::error::{validation, Result};

/// Mixed strategies and value of a zero-sum matrix game (row player maximizes `pᵀ A q`).
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGameSolution {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
    pub value: f64,
    /// `max_i (A q)_i − min_j (pᵀ A)_j`.
    pub duality_gap: f64,
}

/// Solves `max cᵀw s.t. B w ≤ 1, w ≥ 0` for `B > 0` by the tableau simplex method with
/// Bland's rule; returns the primal `w` and the dual `u`.
fn simplex_unit_rhs(b: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (b.nrows(), b.ncols());
    let width = n + m + 1;
    let mut t = DMatrix::<f64>::zeros(m + 1, width);
    for i in 0..m {
        for j in 0..n {
            t[(i, j)] = b[(i, j)];
        }
        t[(i, n + i)] = 1.0;
        t[(i, width - 1)] = 1.0;
    }
    for j in 0..n {
        t[(m, j)] = -1.0;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    const EPS: f64 = 1e-12;
    for _ in 0..10_000 {
        let Some(enter) = (0..n + m).find(|&j| t[(m, j)] < -EPS) else { break };
        let mut leave: Option<usize> = None;
        for i in 0..m {
            if t[(i, enter)] > EPS {
                let ratio = t[(i, width - 1)] / t[(i, enter)];
                leave = match leave {
                    None => Some(i),
                    Some(k) => {
                        let rk = t[(k, width - 1)] / t[(k, enter)];
                        if ratio < rk - EPS || ((ratio - rk).abs() <= EPS && basis[i] < basis[k]) {
                            Some(i)
                        } else {
                            Some(k)
                        }
                    }
                };
            }
        }
        // B > 0 keeps the problem bounded, so a leaving row always exists
        let r = leave.expect("bounded LP");
        let piv = t[(r, enter)];
        for j in 0..width {
            t[(r, j)] /= piv;
        }
        for i in 0..=m {
            if i != r {
                let f = t[(i, enter)];
                if f != 0.0 {
                    for j in 0..width {
                        let v = t[(r, j)];
                        t[(i, j)] -= f * v;
                    }
                }
            }
        }
        basis[r] = enter;
    }
    let mut w = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            w[bv] = t[(i, width - 1)];
        }
    }
    let u = (0..m).map(|i| t[(m, n + i)].max(0.0)).collect();
    (w, u)
}

/// Minimax strategies of the matrix game `payoff` via its linear-programming formulation.
pub fn matrix_game_lp_oracle(payoff: &DMatrix<f64>) -> Result<MatrixGameSolution> {
    if payoff.is_empty() || payoff.iter().any(|v| !v.is_finite()) {
        return validation("payoff matrix must be nonempty and finite");
    }
    let shift = 1.0 - payoff.min();
    let b = payoff.map(|v| v + shift);
    let (w, u) = simplex_unit_rhs(&b);
    let sw: f64 = w.iter().sum();
    let su: f64 = u.iter().sum();
    let col: Vec<f64> = w.iter().map(|v| v / sw).collect();
    let row: Vec<f64> = u.iter().map(|v| v / su).collect();
    let aq: Vec<f64> = (0..payoff.nrows()).map(|i| (0..payoff.ncols()).map(|j| payoff[(i, j)] * col[j]).sum()).collect();
    let pa: Vec<f64> = (0..payoff.ncols()).map(|j| (0..payoff.nrows()).map(|i| payoff[(i, j)] * row[i]).sum()).collect();
    let upper = aq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lower = pa.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(MatrixGameSolution { row, col, value: 0.5 * (upper + lower), duality_gap: upper - lower })
}
