//! Distributed TD with a Laplacian primal-dual correction.
//!
//! Each agent `i` holds `(θⁱ, wⁱ)` and, after observing `(s, s', rⁱ)`, applies
//!
//! ```text
//! δⁱ = rⁱ + γφ(s')ᵀθⁱ − φ(s)ᵀθⁱ
//! θⁱ ← θⁱ + α(δⁱφ(s) − η Σ_{j∈Nᵢ}(θⁱ − θʲ) − η Σ_{j∈Nᵢ}(wⁱ − wʲ))
//! wⁱ ← wⁱ + αη Σ_{j∈Nᵢ}(θⁱ − θʲ)
//! ```
//!
//! All agents update simultaneously from the pre-step values. Stacking agents
//! gives the linear system
//!
//! ```text
//! θ̄ ← θ̄ + α((Ā − ηL̄)θ̄ − ηL̄w̄ + b̄ + ε̄)
//! w̄ ← w̄ + αηL̄θ̄
//! ```
//!
//! with `Ā = I_N ⊗ A`, `L̄ = L ⊗ I_q` and zero-mean noise `ε̄` under i.i.d. sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphTopology, LiftedLaplacian};
use crate::linalg;
use crate::mdp::EvaluationMatrices;
use crate::pd::{self, LyapunovCertificate, LyapunovReport, PdSystem};
use crate::sampler::Observation;

/// Per-agent parameters, stored stacked and agent-major (`θ̄[i·q + c] = θⁱ_c`).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEnsemble {
    n: usize,
    q: usize,
    pub eta: f64,
    theta: DVector<f64>,
    w: DVector<f64>,
}

impl AgentEnsemble {
    pub fn zeros(n: usize, q: usize, eta: f64) -> Self {
        Self { n, q, eta, theta: DVector::zeros(n * q), w: DVector::zeros(n * q) }
    }

    pub fn from_stacked(n: usize, q: usize, eta: f64, theta: DVector<f64>, w: DVector<f64>) -> Result<Self> {
        if theta.len() != n * q || w.len() != n * q {
            return Err(Error::Dimension(format!(
                "stacked vectors have lengths {} and {}, expected {}",
                theta.len(),
                w.len(),
                n * q
            )));
        }
        Ok(Self { n, q, eta, theta, w })
    }

    /// Rows are agents.
    pub fn from_rows(theta: &DMatrix<f64>, w: &DMatrix<f64>, eta: f64) -> Result<Self> {
        let (n, q) = theta.shape();
        if w.shape() != (n, q) {
            return Err(Error::Dimension("theta and w row matrices differ in shape".into()));
        }
        let stack = |m: &DMatrix<f64>| DVector::from_fn(n * q, |k, _| m[(k / q, k % q)]);
        Self::from_stacked(n, q, eta, stack(theta), stack(w))
    }

    pub fn gaussian(n: usize, q: usize, eta: f64, sigma: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || DVector::from_fn(n * q, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        let theta = draw();
        let w = draw();
        Self { n, q, eta, theta, w }
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn theta_bar(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn w_bar(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn theta_i(&self, i: usize) -> &[f64] {
        &self.theta.as_slice()[i * self.q..(i + 1) * self.q]
    }

    pub fn w_i(&self, i: usize) -> &[f64] {
        &self.w.as_slice()[i * self.q..(i + 1) * self.q]
    }

    pub fn theta_rows(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.q, self.theta.as_slice())
    }

    pub fn w_rows(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.q, self.w.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.w.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `α_k = h1 / (k + h2)`.
    Diminishing { h1: f64, h2: f64 },
}

impl StepSchedule {
    pub fn alpha(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::Diminishing { h1, h2 } => h1 / (k as f64 + h2),
        }
    }

    /// Every `α_k` lies in `(0, 1)`. Diminishing schedules are decreasing, so
    /// checking `α_0` suffices.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { alpha } => alpha > 0.0 && alpha < 1.0,
            StepSchedule::Diminishing { h1, h2 } => h1 > 0.0 && h2 > 0.0 && h1 < h2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSchedule(format!("{self:?} does not keep every step in (0, 1)")))
        }
    }
}

/// `δ = r + γφ(s')ᵀθⁱ − φ(s)ᵀθⁱ`.
pub fn td_error(obs: &Observation, agent: usize, theta_i: &[f64], features: &DMatrix<f64>, gamma: f64) -> f64 {
    let mut v_s = 0.0;
    let mut v_next = 0.0;
    for (c, t) in theta_i.iter().enumerate() {
        v_s += features[(obs.s, c)] * t;
        v_next += features[(obs.s_next, c)] * t;
    }
    obs.rewards[agent] + gamma * v_next - v_s
}

/// One synchronous step using neighbour lists.
pub fn agent_step(
    ens: &AgentEnsemble,
    obs: &Observation,
    alpha: f64,
    graph: &GraphTopology,
    features: &DMatrix<f64>,
    gamma: f64,
) -> AgentEnsemble {
    let (n, q, eta) = (ens.n, ens.q, ens.eta);
    let mut theta = ens.theta.clone();
    let mut w = ens.w.clone();
    let mut lap_theta = vec![0.0; q];
    let mut lap_w = vec![0.0; q];
    for i in 0..n {
        let th_i = ens.theta_i(i);
        let w_i = ens.w_i(i);
        let deg = graph.degree(i) as f64;
        for c in 0..q {
            lap_theta[c] = deg * th_i[c];
            lap_w[c] = deg * w_i[c];
        }
        for &j in graph.neighbors(i) {
            for c in 0..q {
                lap_theta[c] -= ens.theta_i(j)[c];
                lap_w[c] -= ens.w_i(j)[c];
            }
        }
        let delta = td_error(obs, i, th_i, features, gamma);
        for c in 0..q {
            let k = i * q + c;
            theta[k] += alpha * (delta * features[(obs.s, c)] - eta * lap_theta[c] - eta * lap_w[c]);
            w[k] += alpha * eta * lap_theta[c];
        }
    }
    AgentEnsemble { n, q, eta, theta, w }
}

/// Stacked sampled increment `[δⁱφ(s)]_i`.
pub fn sampled_drift(obs: &Observation, theta_bar: &DVector<f64>, features: &DMatrix<f64>, gamma: f64) -> DVector<f64> {
    let q = features.ncols();
    let n = theta_bar.len() / q;
    let mut g = DVector::zeros(n * q);
    for i in 0..n {
        let th = &theta_bar.as_slice()[i * q..(i + 1) * q];
        let delta = td_error(obs, i, th, features, gamma);
        for c in 0..q {
            g[i * q + c] = delta * features[(obs.s, c)];
        }
    }
    g
}

/// `Āθ̄ + b̄`, the mean of [`sampled_drift`] under the stationary law.
pub fn mean_drift(theta_bar: &DVector<f64>, mats: &EvaluationMatrices) -> DVector<f64> {
    let q = mats.n_features();
    let n = mats.n_agents();
    let mut out = DVector::zeros(n * q);
    for i in 0..n {
        let th = theta_bar.rows(i * q, q);
        let v = &mats.a_mat * th + &mats.b_vecs[i];
        out.rows_mut(i * q, q).copy_from(&v);
    }
    out
}

/// `ε̄(o; θ̄) = [δⁱφ(s)]_i − (Āθ̄ + b̄)`.
pub fn noise_term(
    obs: &Observation,
    theta_bar: &DVector<f64>,
    mats: &EvaluationMatrices,
    features: &DMatrix<f64>,
) -> DVector<f64> {
    sampled_drift(obs, theta_bar, features, mats.gamma) - mean_drift(theta_bar, mats)
}

#[derive(Debug, Clone)]
pub struct StackedStep {
    pub theta: DVector<f64>,
    pub w: DVector<f64>,
    /// The realised noise `ε̄` of this step.
    pub noise: DVector<f64>,
}

/// One step in stacked form with the dense `L̄`.
#[allow(clippy::too_many_arguments)]
pub fn stacked_step(
    theta_bar: &DVector<f64>,
    w_bar: &DVector<f64>,
    obs: &Observation,
    alpha: f64,
    lifted: &LiftedLaplacian,
    mats: &EvaluationMatrices,
    features: &DMatrix<f64>,
    eta: f64,
) -> StackedStep {
    let l_theta = lifted.l_bar() * theta_bar;
    let l_w = lifted.l_bar() * w_bar;
    let g = sampled_drift(obs, theta_bar, features, mats.gamma);
    let noise = &g - mean_drift(theta_bar, mats);
    let theta = theta_bar + (g - &l_theta * eta - l_w * eta) * alpha;
    let w = w_bar + l_theta * (alpha * eta);
    StackedStep { theta, w, noise }
}

/// The deterministic map obtained by replacing the sample with its mean.
pub fn expected_step(
    theta_bar: &DVector<f64>,
    w_bar: &DVector<f64>,
    alpha: f64,
    lifted: &LiftedLaplacian,
    mats: &EvaluationMatrices,
    eta: f64,
) -> (DVector<f64>, DVector<f64>) {
    let l_theta = lifted.l_bar() * theta_bar;
    let l_w = lifted.l_bar() * w_bar;
    let theta = theta_bar + (mean_drift(theta_bar, mats) - &l_theta * eta - l_w * eta) * alpha;
    let w = w_bar + l_theta * (alpha * eta);
    (theta, w)
}

/// `Ā = I_N ⊗ A`.
pub fn a_bar(mats: &EvaluationMatrices) -> DMatrix<f64> {
    DMatrix::identity(mats.n_agents(), mats.n_agents()).kronecker(&mats.a_mat)
}

pub fn b_bar(mats: &EvaluationMatrices) -> DVector<f64> {
    let q = mats.n_features();
    DVector::from_fn(mats.n_agents() * q, |k, _| mats.b_vecs[k / q][k % q])
}

/// `H = [[Ā − ηL̄, −ηL̄], [ηL̄, 0]]`.
pub fn td_h_mat(mats: &EvaluationMatrices, lifted: &LiftedLaplacian, eta: f64) -> DMatrix<f64> {
    let l = lifted.l_bar() * eta;
    let dim = lifted.dim();
    linalg::block2(&(a_bar(mats) - &l), &(-&l), &l, &DMatrix::zeros(dim, dim))
}

/// The same dynamics as a primal-dual system: `U = ηL̄ − Ā`, `M = ηL̄`.
pub fn as_pd_system(mats: &EvaluationMatrices, lifted: &LiftedLaplacian, eta: f64) -> Result<PdSystem> {
    let m = lifted.l_bar() * eta;
    PdSystem::new(&m - a_bar(mats), m)
}

#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub theta_star: DVector<f64>,
    pub w_star: DVector<f64>,
}

/// `θ* = 1 ⊗ θ_c`, `w* = L̄†(Ā(1 ⊗ θ_c) + b̄)/η` (minimum-norm representative).
pub fn equilibrium(mats: &EvaluationMatrices, lifted: &LiftedLaplacian, eta: f64) -> Result<Equilibrium> {
    let n = mats.n_agents();
    let q = mats.n_features();
    if lifted.n_agents() != n || lifted.q() != q {
        return Err(Error::Dimension(format!(
            "graph lift is {}x{}, matrices are for {n} agents with q = {q}",
            lifted.n_agents(),
            lifted.q()
        )));
    }
    let theta_star = DVector::from_fn(n * q, |k, _| mats.theta_c[k % q]);
    let rhs = mean_drift(&theta_star, mats);
    let residual = (&rhs - lifted.project(&rhs)).norm();
    if residual > 1e-8 {
        return Err(Error::NotInRange(residual));
    }
    let w_star = lifted.pinv() * rhs / eta;
    Ok(Equilibrium { theta_star, w_star })
}

/// `(‖θ̄ − θ*‖² + ‖L̄L̄†(w̄ − w*)‖²) / N`.
pub fn error_metric(theta_bar: &DVector<f64>, w_bar: &DVector<f64>, eq: &Equilibrium, lifted: &LiftedLaplacian) -> f64 {
    let dt = (theta_bar - &eq.theta_star).norm_squared();
    let dw = lifted.project(&(w_bar - &eq.w_star)).norm_squared();
    (dt + dw) / lifted.n_agents() as f64
}

pub type TdCertificate = LyapunovCertificate;

/// `β = (8 + η + 4η²λ_max(L̄)²) / (η(1 − γ)w)`, `κ = min{1, ηλ⁺_min(L̄)²}`.
pub fn make_td_certificate(mats: &EvaluationMatrices, lifted: &LiftedLaplacian, eta: f64, gamma: f64) -> Result<TdCertificate> {
    if !(eta > 0.0) {
        return Err(Error::InvalidSystem(format!("eta = {eta} must be positive")));
    }
    let lmax = lifted.lambda_max();
    let beta = (8.0 + eta + 4.0 * eta * eta * lmax * lmax) / (eta * (1.0 - gamma) * mats.w);
    let kappa = pd::decrement_constant(lifted.lambda_min_pos(), eta);
    Ok(LyapunovCertificate::from_parts(beta, lifted.l_bar(), kappa))
}

pub fn verify_td_lyapunov(
    cert: &TdCertificate,
    mats: &EvaluationMatrices,
    lifted: &LiftedLaplacian,
    eta: f64,
    n_samples: usize,
    seed: u64,
) -> LyapunovReport {
    pd::decrement_report(
        &cert.s_mat,
        &td_h_mat(mats, lifted, eta),
        cert.decrement,
        pd::projected_samples(lifted.projector(), n_samples, seed),
    )
}

/// Conservative constant step size `κλ_min(G) / (4E₁²λ_max(G)‖G‖₂)`, with
/// `E₁ = ‖H‖₂ + (1 + γ) + ‖A‖₂` bounding the growth of one step. Guidance only.
pub fn conservative_step_size(cert: &TdCertificate, mats: &EvaluationMatrices, lifted: &LiftedLaplacian, eta: f64) -> f64 {
    let e1 = linalg::spectral_norm(&td_h_mat(mats, lifted, eta)) + 1.0 + mats.gamma + linalg::spectral_norm(&mats.a_mat);
    cert.decrement * cert.lambda_min_s / (4.0 * e1 * e1 * cert.lambda_max_s * cert.lambda_max_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{lift, make_graph, GraphKind};
    use crate::mdp::{build_matrices, ModelSpec};

    fn obs(s: usize, s_next: usize, rewards: Vec<f64>) -> Observation {
        Observation { s, s_next, rewards }
    }

    #[test]
    fn td_error_examples() {
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(td_error(&obs(0, 1, vec![1.0]), 0, &[2.0, 4.0], &phi, 0.5), 1.0);
        // Myopic case.
        assert_eq!(td_error(&obs(0, 1, vec![1.0]), 0, &[2.0, 4.0], &phi, 0.0), 1.0 - 2.0);
        // Fixed point of a one-state model: r = (1 − γ)θ.
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(td_error(&obs(0, 0, vec![0.5]), 0, &[1.0], &one, 0.5), 0.0);
    }

    #[test]
    fn single_agent_is_plain_td() {
        let g = make_graph(GraphKind::Cycle, 1, 1.0, 0).unwrap();
        let phi = DMatrix::from_row_slice(2, 2, &[0.6, 0.8, 1.0, 0.0]);
        let ens = AgentEnsemble::from_stacked(1, 2, 1.0, DVector::from_vec(vec![0.3, -0.2]), DVector::from_vec(vec![5.0, 7.0])).unwrap();
        let o = obs(0, 1, vec![0.9]);
        let alpha = 0.1;
        let next = agent_step(&ens, &o, alpha, &g, &phi, 0.9);
        let delta = td_error(&o, 0, ens.theta_i(0), &phi, 0.9);
        let expect = ens.theta_bar() + DVector::from_vec(vec![0.6, 0.8]) * (alpha * delta);
        assert!((next.theta_bar() - expect).amax() < 1e-15);
        assert_eq!(next.w_bar(), ens.w_bar());
    }

    #[test]
    fn identical_agents_ignore_the_graph() {
        let g = make_graph(GraphKind::Star, 4, 1.0, 0).unwrap();
        let phi = DMatrix::from_row_slice(2, 2, &[0.6, 0.8, 1.0, 0.0]);
        let th = DMatrix::from_fn(4, 2, |_, c| [0.4, -1.0][c]);
        let w = DMatrix::from_fn(4, 2, |_, c| [2.0, 3.0][c]);
        let ens = AgentEnsemble::from_rows(&th, &w, 1.0).unwrap();
        let next = agent_step(&ens, &obs(1, 0, vec![0.5; 4]), 0.2, &g, &phi, 0.8);
        for i in 1..4 {
            for c in 0..2 {
                assert!((next.theta_i(i)[c] - next.theta_i(0)[c]).abs() < 1e-15);
            }
        }
        assert!((next.w_bar() - ens.w_bar()).amax() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::Constant { alpha: 0.5 }.validate().is_ok());
        assert!(StepSchedule::Constant { alpha: 1.0 }.validate().is_err());
        assert!(StepSchedule::Diminishing { h1: 10.0, h2: 5.0 }.validate().is_err());
        let s = StepSchedule::Diminishing { h1: 2.0, h2: 4.0 };
        assert!(s.validate().is_ok());
        assert_eq!(s.alpha(0), 0.5);
        assert_eq!(s.alpha(4), 0.25);
        let parsed: StepSchedule = serde_json::from_str(r#"{"kind":"diminishing","h1":2.0,"h2":4.0}"#).unwrap();
        assert_eq!(parsed, s);
    }

    fn instance(n: usize, q: usize, homogeneous: bool) -> (EvaluationMatrices, LiftedLaplacian) {
        let spec = ModelSpec {
            n_states: 7,
            n_agents: n,
            n_features: q,
            rewards: if homogeneous { crate::mdp::RewardKind::Homogeneous } else { crate::mdp::RewardKind::Uniform },
            seed: 17,
            ..Default::default()
        };
        let mats = build_matrices(&spec.generate().unwrap()).unwrap();
        let g = make_graph(GraphKind::Cycle, n, 1.0, 0).unwrap();
        (mats, lift(&g, q).unwrap())
    }

    #[test]
    fn equilibrium_examples() {
        let (mats, lifted) = instance(1, 3, false);
        let eq = equilibrium(&mats, &lifted, 1.0).unwrap();
        assert_eq!(eq.w_star.amax(), 0.0);
        assert!((&eq.theta_star - &mats.theta_c).amax() == 0.0);

        let (mats, lifted) = instance(4, 3, true);
        assert!(equilibrium(&mats, &lifted, 1.0).unwrap().w_star.amax() < 1e-12);

        let (mats, lifted) = instance(5, 3, false);
        let eta = 0.7;
        let eq = equilibrium(&mats, &lifted, eta).unwrap();
        let rhs = mean_drift(&eq.theta_star, &mats);
        assert!((lifted.l_bar() * (&eq.w_star * eta) - &rhs).amax() < 1e-9);
        let lhs = (a_bar(&mats) - lifted.l_bar() * eta) * &eq.theta_star - lifted.l_bar() * &eq.w_star * eta + b_bar(&mats);
        assert!(lhs.amax() < 1e-9);
    }

    #[test]
    fn error_metric_examples() {
        let (mats, lifted) = instance(2, 2, false);
        let eq = equilibrium(&mats, &lifted, 1.0).unwrap();
        assert_eq!(error_metric(&eq.theta_star, &eq.w_star, &eq, &lifted), 0.0);
        let mut th = eq.theta_star.clone();
        th[0] += 1.0;
        assert!((error_metric(&th, &eq.w_star, &eq, &lifted) - 0.5).abs() < 1e-15);
        let shifted = &eq.w_star + DVector::from_fn(4, |k, _| [3.0, -2.0][k % 2]);
        assert!((error_metric(&th, &shifted, &eq, &lifted) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn expected_step_fixes_equilibrium() {
        let (mats, lifted) = instance(4, 3, false);
        let eq = equilibrium(&mats, &lifted, 1.3).unwrap();
        let (th, w) = expected_step(&eq.theta_star, &eq.w_star, 0.1, &lifted, &mats, 1.3);
        assert!((th - &eq.theta_star).amax() < 1e-12);
        assert!((w - &eq.w_star).amax() < 1e-12);
    }

    #[test]
    fn certificate_examples() {
        let (mats, lifted) = instance(1, 2, false);
        let gamma = mats.gamma;
        let cert = make_td_certificate(&mats, &lifted, 1.0, gamma).unwrap();
        assert!((cert.beta - 9.0 / ((1.0 - gamma) * mats.w)).abs() < 1e-12 * cert.beta);
        assert_eq!(cert.decrement, 1.0);

        let (mats, lifted) = instance(4, 3, false);
        let c1 = make_td_certificate(&mats, &lifted, 1.0, gamma).unwrap();
        let c2 = make_td_certificate(&mats, &lifted, 2.0, gamma).unwrap();
        let l = lifted.lambda_max();
        let expect = |eta: f64| (8.0 + eta + 4.0 * eta * eta * l * l) / (eta * (1.0 - gamma) * mats.w);
        assert_eq!(c1.beta, expect(1.0));
        assert_eq!(c2.beta, expect(2.0));
        assert!(c1.sandwich_holds() && c2.sandwich_holds());
        assert!(verify_td_lyapunov(&c1, &mats, &lifted, 1.0, 300, 2).passed());
    }

    #[test]
    fn pd_view_shares_the_h_matrix() {
        let (mats, lifted) = instance(3, 2, false);
        let sys = as_pd_system(&mats, &lifted, 0.8).unwrap();
        assert!(linalg::max_abs_diff(&sys.h_mat(), &td_h_mat(&mats, &lifted, 0.8)) < 1e-15);
    }

    #[test]
    fn conservative_step_is_small_and_positive() {
        let (mats, lifted) = instance(4, 3, false);
        let cert = make_td_certificate(&mats, &lifted, 1.0, mats.gamma).unwrap();
        let a = conservative_step_size(&cert, &mats, &lifted, 1.0);
        assert!(a > 0.0 && a < 1e-2);
    }
}
