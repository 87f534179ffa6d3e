//! Continuous-time primal-dual gradient dynamics
//!
//! ```text
//! θ̇ = −Uθ − Mw,    ẇ = Mθ
//! ```
//!
//! with `U + Uᵀ ≻ 0` and `M` symmetric positive semidefinite, possibly singular.
//! Only the projected state `z = (θ, MM†w)` converges; the part of `w` in
//! `null(M)` is frozen.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{stream_rng, StreamRole};

pub const LYAPUNOV_TOL: f64 = 1e-8;
const ZERO_EIG_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PdSystem {
    u_mat: DMatrix<f64>,
    m_mat: DMatrix<f64>,
    m_pinv: DMatrix<f64>,
    m_projector: DMatrix<f64>,
}

impl PdSystem {
    pub fn new(u_mat: DMatrix<f64>, m_mat: DMatrix<f64>) -> Result<Self> {
        let n = u_mat.nrows();
        if n == 0 || u_mat.ncols() != n || m_mat.nrows() != n || m_mat.ncols() != n {
            return Err(Error::Dimension(format!(
                "U is {}x{} and M is {}x{}; both must be the same square size",
                u_mat.nrows(),
                u_mat.ncols(),
                m_mat.nrows(),
                m_mat.ncols()
            )));
        }
        let sym_u = &u_mat + u_mat.transpose();
        let lmin = linalg::lambda_min_sym(&sym_u);
        if !(lmin > 0.0) {
            return Err(Error::InvalidSystem(format!("λ_min(U + Uᵀ) = {lmin:e} is not positive")));
        }
        let asym = linalg::max_abs_diff(&m_mat, &m_mat.transpose());
        if asym > 1e-12 {
            return Err(Error::InvalidSystem(format!("M is not symmetric (max |M − Mᵀ| = {asym:e})")));
        }
        let mmin = linalg::lambda_min_sym(&m_mat);
        if mmin < -1e-10 {
            return Err(Error::InvalidSystem(format!("M has negative eigenvalue {mmin:e}")));
        }
        let m_pinv = linalg::pinv_sym(&m_mat, ZERO_EIG_TOL);
        let m_projector = &m_mat * &m_pinv;
        Ok(Self { u_mat, m_mat, m_pinv, m_projector })
    }

    pub fn dim(&self) -> usize {
        self.u_mat.nrows()
    }

    pub fn u_mat(&self) -> &DMatrix<f64> {
        &self.u_mat
    }

    pub fn m_mat(&self) -> &DMatrix<f64> {
        &self.m_mat
    }

    pub fn m_pinv(&self) -> &DMatrix<f64> {
        &self.m_pinv
    }

    pub fn m_projector(&self) -> &DMatrix<f64> {
        &self.m_projector
    }

    /// `H = [[−U, −M], [M, 0]]`.
    pub fn h_mat(&self) -> DMatrix<f64> {
        let n = self.dim();
        linalg::block2(&(-&self.u_mat), &(-&self.m_mat), &self.m_mat, &DMatrix::zeros(n, n))
    }

    /// `z = (θ, MM†w)`.
    pub fn project_state(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        linalg::concat(theta, &(&self.m_projector * w))
    }
}

/// Spectral data of a PSD matrix that the certificates need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdSpectrum {
    pub lambda_max: f64,
    /// `None` when the matrix is zero.
    pub lambda_min_pos: Option<f64>,
}

pub fn psd_spectrum(m: &DMatrix<f64>) -> PsdSpectrum {
    let ev = linalg::sym_eigenvalues(m);
    let lambda_max = ev.last().copied().unwrap_or(0.0).max(0.0);
    let cutoff = ZERO_EIG_TOL * lambda_max;
    let lambda_min_pos = if lambda_max > 0.0 { ev.iter().copied().find(|&l| l > cutoff) } else { None };
    PsdSpectrum { lambda_max, lambda_min_pos }
}

/// `min{1, λ⁺_min²}`, with the convention `κ = 1` when there is no nonzero eigenvalue.
pub fn decrement_constant(lambda_min_pos: Option<f64>, scale: f64) -> f64 {
    match lambda_min_pos {
        Some(l) => (scale * l * l).min(1.0),
        None => 1.0,
    }
}

/// A quadratic Lyapunov function `V(z) = zᵀ S z` with a guaranteed decrement.
#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    pub beta: f64,
    pub s_mat: DMatrix<f64>,
    /// `κ` in `2zᵀSHz ≤ −κ‖z‖²`.
    pub decrement: f64,
    pub lambda_min_s: f64,
    pub lambda_max_s: f64,
}

impl LyapunovCertificate {
    pub(crate) fn from_parts(beta: f64, off: &DMatrix<f64>, decrement: f64) -> Self {
        let s_mat = linalg::beta_block(beta, off);
        let ev = linalg::sym_eigenvalues(&s_mat);
        Self {
            beta,
            lambda_min_s: ev[0],
            lambda_max_s: ev[ev.len() - 1],
            s_mat,
            decrement,
        }
    }

    /// `κ / λ_max(S)`: guaranteed exponential decay rate of `V`.
    pub fn rate(&self) -> f64 {
        self.decrement / self.lambda_max_s
    }

    /// `β/2 < λ(S) < 2β`.
    pub fn sandwich_holds(&self) -> bool {
        self.lambda_min_s > self.beta / 2.0 && self.lambda_max_s < 2.0 * self.beta
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.s_mat * z))
    }
}

pub type PdCertificate = LyapunovCertificate;

/// `β = max{(2λ_max(M)² + 2 + ‖U‖₂²)/λ_min(U + Uᵀ), 4λ_max(M)}`.
pub fn make_certificate(sys: &PdSystem) -> Result<PdCertificate> {
    let sym_u = sys.u_mat() + sys.u_mat().transpose();
    let lmin_u = linalg::lambda_min_sym(&sym_u);
    if !(lmin_u > 0.0) {
        return Err(Error::InvalidSystem(format!("λ_min(U + Uᵀ) = {lmin_u:e} is not positive")));
    }
    let spec = psd_spectrum(sys.m_mat());
    let u_norm = linalg::spectral_norm(sys.u_mat());
    let first = (2.0 * spec.lambda_max.powi(2) + 2.0 + u_norm * u_norm) / lmin_u;
    let beta = first.max(4.0 * spec.lambda_max);
    let kappa = decrement_constant(spec.lambda_min_pos, 1.0);
    Ok(LyapunovCertificate::from_parts(beta, sys.m_mat(), kappa))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    pub samples: usize,
    /// Largest `2zᵀSHz + κ‖z‖²`; nonpositive when the inequality holds.
    pub max_violation: f64,
    /// Samples with violation above [`LYAPUNOV_TOL`].
    pub violations: usize,
}

impl LyapunovReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Evaluate `2zᵀSHz + κ‖z‖²` over a set of states.
pub fn decrement_report<I>(s_mat: &DMatrix<f64>, h_mat: &DMatrix<f64>, kappa: f64, states: I) -> LyapunovReport
where
    I: IntoIterator<Item = DVector<f64>>,
{
    let sh = s_mat * h_mat;
    let mut report = LyapunovReport { samples: 0, max_violation: f64::NEG_INFINITY, violations: 0 };
    for z in states {
        let lhs = 2.0 * z.dot(&(&sh * &z));
        let violation = lhs + kappa * z.norm_squared();
        report.samples += 1;
        report.max_violation = report.max_violation.max(violation);
        if violation > LYAPUNOV_TOL {
            report.violations += 1;
        }
    }
    report
}

/// Draw unit-norm projected states `z = (θ, Πw)` for a projector `Π`.
pub fn projected_samples(
    projector: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> impl Iterator<Item = DVector<f64>> + '_ {
    let n = projector.nrows();
    let mut rng = stream_rng(seed, 0, StreamRole::Verification);
    (0..n_samples).map(move |_| {
        let theta = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = linalg::concat(&theta, &(projector * w));
        let norm = z.norm();
        if norm > 0.0 {
            z / norm
        } else {
            z
        }
    })
}

pub fn verify_lyapunov_inequality(
    sys: &PdSystem,
    cert: &PdCertificate,
    n_samples: usize,
    seed: u64,
) -> LyapunovReport {
    decrement_report(
        &cert.s_mat,
        &sys.h_mat(),
        cert.decrement,
        projected_samples(sys.m_projector(), n_samples, seed),
    )
}

/// `λ_max(P(HᵀS + SH)P + κP)` with `P = diag(I, Π)`; nonpositive iff the
/// decrement inequality holds on every projected state.
pub fn projected_matrix_margin(
    s_mat: &DMatrix<f64>,
    h_mat: &DMatrix<f64>,
    projector: &DMatrix<f64>,
    kappa: f64,
) -> f64 {
    let n = projector.nrows();
    let p = linalg::block2(&DMatrix::identity(n, n), &DMatrix::zeros(n, n), &DMatrix::zeros(n, n), projector);
    let q = h_mat.transpose() * s_mat + s_mat * h_mat;
    let mut m = &p * q * &p + &p * kappa;
    m = (&m + m.transpose()) * 0.5;
    linalg::lambda_max_sym(&m)
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: Vec<f64>,
    /// Stacked `(θ, w)` at each stored time.
    pub states: Vec<DVector<f64>>,
    pub v: Vec<f64>,
    pub theta_norm: Vec<f64>,
    pub proj_w_norm: Vec<f64>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,V,theta_norm,proj_w_norm\n");
        for i in 0..self.t.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.t[i], self.v[i], self.theta_norm[i], self.proj_w_norm[i]
            ));
        }
        out
    }
}

/// `0.1 / ‖H‖₂`.
pub fn max_stable_dt(sys: &PdSystem) -> f64 {
    0.1 / linalg::spectral_norm(&sys.h_mat())
}

/// Fixed-step classical RK4 from `(θ₀, w₀)` to `t_end`, storing every step.
pub fn integrate(
    sys: &PdSystem,
    theta0: &DVector<f64>,
    w0: &DVector<f64>,
    dt: f64,
    t_end: f64,
) -> Result<Trajectory> {
    let n = sys.dim();
    if theta0.len() != n || w0.len() != n {
        return Err(Error::Dimension(format!("initial state must have length {n}")));
    }
    let bound = max_stable_dt(sys);
    if !(dt > 0.0) || dt > bound {
        return Err(Error::StepTooLarge { dt, bound });
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidSystem(format!("t_end = {t_end} must be finite and nonnegative")));
    }
    let cert = make_certificate(sys)?;
    let h = sys.h_mat();
    let steps = (t_end / dt).ceil() as usize;
    let mut traj = Trajectory {
        t: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        v: Vec::with_capacity(steps + 1),
        theta_norm: Vec::with_capacity(steps + 1),
        proj_w_norm: Vec::with_capacity(steps + 1),
    };
    let mut x = linalg::concat(theta0, w0);
    let record = |t: f64, x: &DVector<f64>, traj: &mut Trajectory| {
        let theta = x.rows(0, n).into_owned();
        let pw = sys.m_projector() * x.rows(n, n);
        traj.t.push(t);
        traj.theta_norm.push(theta.norm());
        traj.proj_w_norm.push(pw.norm());
        traj.v.push(cert.value(&linalg::concat(&theta, &pw)));
        traj.states.push(x.clone());
    };
    record(0.0, &x, &mut traj);
    for step in 1..=steps {
        let k1 = &h * &x;
        let k2 = &h * (&x + &k1 * (dt / 2.0));
        let k3 = &h * (&x + &k2 * (dt / 2.0));
        let k4 = &h * (&x + &k3 * dt);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        record(step as f64 * dt, &x, &mut traj);
    }
    Ok(traj)
}

/// Least-squares slope of `log V` against `t` over the second half of the trace,
/// returned as a positive decay rate.
pub fn fit_decay_rate(t: &[f64], v: &[f64]) -> Result<f64> {
    if t.len() != v.len() {
        return Err(Error::InvalidTrace(format!("{} times but {} values", t.len(), v.len())));
    }
    if v.len() < 10 {
        return Err(Error::InvalidTrace(format!("need at least 10 points, got {}", v.len())));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
        return Err(Error::InvalidTrace(format!("V[{i}] = {x} is not positive")));
    }
    let start = v.len() / 2;
    let xs = &t[start..];
    let ys: Vec<f64> = v[start..].iter().map(|x| x.ln()).collect();
    Ok(-least_squares_slope(xs, &ys))
}

pub(crate) fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Seeded test system: `U = I + K` with skew `K`, and `M = Q diag(λ) Qᵀ` of the
/// given rank with nonzero eigenvalues uniform in `[lo, hi]`.
pub fn random_system(n: usize, rank: usize, eig_range: (f64, f64), skew: f64, seed: u64) -> Result<PdSystem> {
    if rank > n {
        return Err(Error::Dimension(format!("rank {rank} exceeds dimension {n}")));
    }
    let mut rng = stream_rng(seed, 0, StreamRole::Generator);
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let k = (&g - g.transpose()) * (skew / (2.0 * (n as f64).sqrt()));
    let u = DMatrix::identity(n, n) + k;
    let basis = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = basis.qr().q();
    let mut diag = DVector::zeros(n);
    for i in 0..rank {
        diag[i] = rng.random_range(eig_range.0..=eig_range.1);
    }
    let m = &q * DMatrix::from_diagonal(&diag) * q.transpose();
    let m = (&m + m.transpose()) * 0.5;
    PdSystem::new(u, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pair_beta() {
        // (2·1 + 2 + 1)/2 = 2.5 against 4·1 = 4.
        let sys = PdSystem::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let cert = make_certificate(&sys).unwrap();
        assert_eq!(cert.beta, 4.0);
        assert_eq!(cert.decrement, 1.0);
        assert!(cert.sandwich_holds());
    }

    #[test]
    fn zero_m_collapses_beta_and_takes_unit_decrement() {
        let u = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 1.0]);
        let sys = PdSystem::new(u.clone(), DMatrix::zeros(2, 2)).unwrap();
        let cert = make_certificate(&sys).unwrap();
        let un = linalg::spectral_norm(&u);
        let lmin = linalg::lambda_min_sym(&(&u + u.transpose()));
        assert!((cert.beta - (2.0 + un * un) / lmin).abs() < 1e-12);
        assert_eq!(cert.decrement, 1.0);
        assert!(verify_lyapunov_inequality(&sys, &cert, 200, 1).passed());
    }

    #[test]
    fn scaling_u_scales_the_first_branch() {
        let base = random_system(4, 2, (0.1, 0.2), 0.5, 3).unwrap();
        let c = 3.0;
        let scaled = PdSystem::new(base.u_mat() * c, base.m_mat().clone()).unwrap();
        let first = |s: &PdSystem| {
            let spec = psd_spectrum(s.m_mat());
            let un = linalg::spectral_norm(s.u_mat());
            let lmin = linalg::lambda_min_sym(&(s.u_mat() + s.u_mat().transpose()));
            (2.0 * spec.lambda_max.powi(2) + 2.0 + un * un) / lmin
        };
        let (b0, b1) = (make_certificate(&base).unwrap().beta, make_certificate(&scaled).unwrap().beta);
        assert_eq!(b0, first(&base));
        assert_eq!(b1, first(&scaled));
        let spec = psd_spectrum(base.m_mat());
        let expected = (2.0 * spec.lambda_max.powi(2) + 2.0 + c * c * linalg::spectral_norm(base.u_mat()).powi(2))
            / (c * linalg::lambda_min_sym(&(base.u_mat() + base.u_mat().transpose())));
        assert!((b1 - expected).abs() < 1e-10 * expected);
    }

    #[test]
    fn rejects_indefinite_u_and_asymmetric_m() {
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(PdSystem::new(u, DMatrix::identity(2, 2)).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(PdSystem::new(DMatrix::identity(2, 2), m).is_err());
    }

    #[test]
    fn zero_state_is_an_equality() {
        let sys = random_system(3, 1, (0.5, 2.0), 0.5, 2).unwrap();
        let cert = make_certificate(&sys).unwrap();
        let r = decrement_report(&cert.s_mat, &sys.h_mat(), cert.decrement, [DVector::zeros(6)]);
        assert_eq!(r.max_violation, 0.0);
    }

    #[test]
    fn seeded_rank_deficient_system_has_no_violations() {
        let sys = random_system(6, 3, (0.5, 2.0), 1.0, 11).unwrap();
        let cert = make_certificate(&sys).unwrap();
        let r = verify_lyapunov_inequality(&sys, &cert, 1000, 5);
        assert!(r.passed(), "{r:?}");
        let margin = projected_matrix_margin(&cert.s_mat, &sys.h_mat(), sys.m_projector(), cert.decrement);
        assert!(margin <= LYAPUNOV_TOL, "{margin}");
    }

    #[test]
    fn full_rank_matrix_form_agrees() {
        let sys = random_system(4, 4, (0.5, 2.0), 1.0, 8).unwrap();
        let cert = make_certificate(&sys).unwrap();
        let margin = projected_matrix_margin(&cert.s_mat, &sys.h_mat(), sys.m_projector(), cert.decrement);
        assert!(margin <= LYAPUNOV_TOL);
        assert!(verify_lyapunov_inequality(&sys, &cert, 500, 1).passed());
    }

    #[test]
    fn equilibrium_trajectory_stays_put() {
        let sys = random_system(4, 2, (0.5, 2.0), 0.5, 4).unwrap();
        // w in null(M) only.
        let w0 = (DMatrix::identity(4, 4) - sys.m_projector()) * DVector::from_element(4, 1.0);
        let dt = max_stable_dt(&sys);
        let traj = integrate(&sys, &DVector::zeros(4), &w0, dt, 5.0).unwrap();
        assert!(traj.v.iter().all(|&v| v.abs() < 1e-20));
        assert!((traj.states.last().unwrap().rows(4, 4) - &w0).amax() < 1e-14);
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let sys = PdSystem::new(DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)).unwrap();
        let dt = 0.05;
        let traj = integrate(&sys, &DVector::from_element(1, 2.0), &DVector::zeros(1), dt, 3.0).unwrap();
        let (t, x) = (traj.t.last().unwrap(), traj.states.last().unwrap()[0]);
        // Global RK4 error is O(dt⁴).
        assert!((x - 2.0 * (-t).exp()).abs() < 10.0 * dt.powi(4));
    }

    #[test]
    fn step_guard_reports_bound() {
        let sys = PdSystem::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let bound = max_stable_dt(&sys);
        match integrate(&sys, &DVector::zeros(2), &DVector::zeros(2), 2.0 * bound, 1.0) {
            Err(Error::StepTooLarge { bound: b, .. }) => assert_eq!(b, bound),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seeded_trajectory_decreases_and_respects_envelope() {
        let sys = random_system(6, 3, (0.5, 2.0), 1.0, 21).unwrap();
        let cert = make_certificate(&sys).unwrap();
        let theta0 = DVector::from_fn(6, |i, _| (i as f64 + 1.0).cos());
        let w0 = DVector::from_fn(6, |i, _| (i as f64 * 0.3).sin());
        let traj = integrate(&sys, &theta0, &w0, max_stable_dt(&sys), 10.0 / cert.rate()).unwrap();
        // Below ~1e-20·V(0) the frozen null(M) part of w leaves rounding noise in z.
        let floor = traj.v[0] * 1e-20;
        for win in traj.v.windows(2).filter(|w| w[1] > floor) {
            assert!(win[1] < win[0], "{} {}", win[0], win[1]);
        }
        for (t, v) in traj.t.iter().zip(&traj.v) {
            assert!(*v <= traj.v[0] * (-cert.rate() * t).exp() * (1.0 + 1e-6));
        }
        let fitted = fit_decay_rate(&traj.t, &traj.v).unwrap();
        assert!(fitted >= cert.rate() - 1e-6);
    }

    #[test]
    fn fit_recovers_synthetic_rate() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let v: Vec<f64> = t.iter().map(|t| (-3.0 * t).exp()).collect();
        assert!((fit_decay_rate(&t, &v).unwrap() - 3.0).abs() < 1e-9);
        let mut bad = v.clone();
        bad[40] = 0.0;
        assert!(fit_decay_rate(&t, &bad).is_err());
        assert!(fit_decay_rate(&t[..5], &v[..5]).is_err());
    }

    #[test]
    fn csv_has_expected_header() {
        let sys = PdSystem::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let traj = integrate(&sys, &DVector::from_element(1, 1.0), &DVector::zeros(1), 0.01, 0.02).unwrap();
        let csv = traj.to_csv();
        assert!(csv.starts_with("t,V,theta_norm,proj_w_norm\n"));
        assert_eq!(csv.lines().count(), 1 + traj.t.len());
    }
}
