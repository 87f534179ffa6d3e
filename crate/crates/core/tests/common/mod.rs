//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use dtdlab_core::mdp::MampdModel;
use nalgebra::{DMatrix, DVector};

/// Stationary law from the linear system `(Pᵀ − I)d = 0`, `1ᵀd = 1`.
pub fn stationary(p: &DMatrix<f64>) -> DVector<f64> {
    let n = p.nrows();
    let mut m = p.transpose() - DMatrix::identity(n, n);
    let mut rhs = DVector::zeros(n);
    for c in 0..n {
        m[(n - 1, c)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    m.lu().solve(&rhs).expect("ergodic chain")
}

/// Expected one-step reward of agent `i` from each state.
pub fn expected_reward(model: &MampdModel, i: usize) -> DVector<f64> {
    let p = model.p_pi();
    let r = &model.rewards()[i];
    DVector::from_fn(p.nrows(), |s, _| (0..p.ncols()).map(|t| p[(s, t)] * r[(s, t)]).sum())
}

/// Solution of the projected Bellman equation with the agent-averaged reward:
/// `ΦᵀD(Φ − γPΦ)θ = ΦᵀD r̄`.
pub fn theta_c_direct(model: &MampdModel) -> DVector<f64> {
    let d = DMatrix::from_diagonal(&stationary(model.p_pi()));
    let phi = model.features();
    let n = model.n_agents();
    let mut r_bar = DVector::zeros(model.n_states());
    for i in 0..n {
        r_bar += expected_reward(model, i);
    }
    r_bar /= n as f64;
    let lhs = phi.transpose() * &d * (phi - model.p_pi() * phi * model.gamma());
    let rhs = phi.transpose() * &d * r_bar;
    lhs.lu().solve(&rhs).expect("nonsingular projected Bellman system")
}

/// Worst-case total variation `max_s ½‖Pᵏ(s, ·) − μ‖₁` for `k = 0..=kmax`,
/// from explicit matrix powers.
pub fn tv_by_powers(p: &DMatrix<f64>, mu: &DVector<f64>, kmax: usize) -> Vec<f64> {
    let n = p.nrows();
    let mut pk: DMatrix<f64> = DMatrix::identity(n, n);
    let mut out = Vec::with_capacity(kmax + 1);
    for _ in 0..=kmax {
        let worst = (0..n)
            .map(|s| 0.5 * (0..n).map(|t| (pk[(s, t)] - mu[t]).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        out.push(worst);
        pk = &pk * p;
    }
    out
}

/// First `k ≥ 1` with `tv[k] ≤ δ`.
pub fn first_below(tv: &[f64], delta: f64) -> Option<usize> {
    (1..tv.len()).find(|&k| tv[k] <= delta)
}

pub fn sym_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}
