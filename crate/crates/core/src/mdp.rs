//! Policy-evaluation problem for a networked multi-agent MDP.
//!
//! All agents observe the same state transition `s -> s'` drawn from the
//! policy-marginalised kernel `P`, and agent `i` receives its private reward
//! `r_i(s, s')`. The quantities the distributed algorithm works with are
//!
//! ```text
//! A     = γ Φᵀ D P Φ − Φᵀ D Φ
//! b_i   = Φᵀ D R_i,        R_i(s) = Σ_s' P(s, s') r_i(s, s')
//! θ_c   = −A⁻¹ (1/N) Σ_i b_i
//! w     = λ_min(Φᵀ D Φ)
//! ```
//!
//! where `D = diag(d)` holds the stationary distribution of `P`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{stream_rng, StreamRole};

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-14;
const STATIONARY_CAP: usize = 1_000_000;
const MAX_CONDITION: f64 = 1e12;

/// A multi-agent MDP with the policy already folded into the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MampdModel {
    gamma: f64,
    p_pi: DMatrix<f64>,
    rewards: Vec<DMatrix<f64>>,
    r_max: f64,
    features: DMatrix<f64>,
}

impl MampdModel {
    /// Validate and build a model.
    ///
    /// `rewards[i]` is agent `i`'s `|S|×|S|` table of `r_i(s, s')`; `features`
    /// is `|S|×q` with one feature vector per row.
    pub fn new(
        gamma: f64,
        p_pi: DMatrix<f64>,
        rewards: Vec<DMatrix<f64>>,
        r_max: f64,
        features: DMatrix<f64>,
    ) -> Result<Self> {
        let n = p_pi.nrows();
        if n == 0 || p_pi.ncols() != n {
            return Err(Error::Dimension(format!(
                "transition matrix must be square and non-empty, got {}x{}",
                p_pi.nrows(),
                p_pi.ncols()
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidModel(format!("gamma = {gamma} is not in (0, 1)")));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::InvalidModel(format!("r_max = {r_max} must be positive")));
        }
        if rewards.is_empty() {
            return Err(Error::InvalidModel("at least one agent is required".into()));
        }
        check_row_stochastic(&p_pi)?;
        check_ergodic(&p_pi)?;
        for (i, r) in rewards.iter().enumerate() {
            if r.nrows() != n || r.ncols() != n {
                return Err(Error::Dimension(format!(
                    "reward table of agent {i} is {}x{}, expected {n}x{n}",
                    r.nrows(),
                    r.ncols()
                )));
            }
            if let Some(v) = r.iter().find(|v| !(v.abs() <= r_max)) {
                return Err(Error::InvalidModel(format!(
                    "agent {i} has reward {v} outside [-{r_max}, {r_max}]"
                )));
            }
        }
        if features.nrows() != n || features.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "feature matrix is {}x{}, expected {n} rows and at least one column",
                features.nrows(),
                features.ncols()
            )));
        }
        for (s, row) in features.row_iter().enumerate() {
            let norm = row.norm();
            if !(norm <= 1.0 + 1e-12) {
                return Err(Error::InvalidModel(format!(
                    "feature vector of state {s} has norm {norm} > 1"
                )));
            }
        }
        let q = features.ncols();
        let rank = linalg::rank(&features, 1e-10);
        if rank < q {
            return Err(Error::RankDeficient { rank, q });
        }
        Ok(Self { gamma, p_pi, rewards, r_max, features })
    }

    /// Marginalise a full model over actions.
    ///
    /// `transitions[a]` is `P(s, a, ·)`, `policy[(s, a)] = π(a | s)` and
    /// `rewards[i][a]` is agent `i`'s `r_i(s, a, s')`. The marginalised reward is
    /// the conditional mean `E[r_i | s, s']`, which leaves `R_i` unchanged.
    pub fn from_full(
        gamma: f64,
        transitions: &[DMatrix<f64>],
        policy: &DMatrix<f64>,
        rewards: &[Vec<DMatrix<f64>>],
        r_max: f64,
        features: DMatrix<f64>,
    ) -> Result<Self> {
        let n_actions = transitions.len();
        if n_actions == 0 {
            return Err(Error::InvalidModel("no actions".into()));
        }
        let n = transitions[0].nrows();
        if policy.nrows() != n || policy.ncols() != n_actions {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, expected {n}x{n_actions}",
                policy.nrows(),
                policy.ncols()
            )));
        }
        let mut p_pi = DMatrix::zeros(n, n);
        for (a, p_a) in transitions.iter().enumerate() {
            for s in 0..n {
                for t in 0..n {
                    p_pi[(s, t)] += policy[(s, a)] * p_a[(s, t)];
                }
            }
        }
        let mut marginal = Vec::with_capacity(rewards.len());
        for (i, per_action) in rewards.iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(Error::Dimension(format!(
                    "agent {i} has rewards for {} actions, expected {n_actions}",
                    per_action.len()
                )));
            }
            let mut r = DMatrix::zeros(n, n);
            for s in 0..n {
                for t in 0..n {
                    if p_pi[(s, t)] > 0.0 {
                        let mass: f64 = (0..n_actions)
                            .map(|a| policy[(s, a)] * transitions[a][(s, t)] * per_action[a][(s, t)])
                            .sum();
                        r[(s, t)] = mass / p_pi[(s, t)];
                    }
                }
            }
            marginal.push(r);
        }
        Self::new(gamma, p_pi, marginal, r_max, features)
    }

    pub fn n_states(&self) -> usize {
        self.p_pi.nrows()
    }

    pub fn n_agents(&self) -> usize {
        self.rewards.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn p_pi(&self) -> &DMatrix<f64> {
        &self.p_pi
    }

    pub fn rewards(&self) -> &[DMatrix<f64>] {
        &self.rewards
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// `φ(s)` as a slice-free row copy.
    pub fn feature(&self, s: usize) -> DVector<f64> {
        self.features.row(s).transpose()
    }

    /// `R_i(s) = Σ_s' P(s, s') r_i(s, s')`.
    pub fn expected_rewards(&self, agent: usize) -> DVector<f64> {
        let r = &self.rewards[agent];
        DVector::from_fn(self.n_states(), |s, _| {
            self.p_pi.row(s).iter().zip(r.row(s).iter()).map(|(p, v)| p * v).sum()
        })
    }

    pub fn to_document(&self) -> ModelDocument {
        let n = self.n_states();
        let mut p_pi = Vec::with_capacity(n * n);
        for s in 0..n {
            p_pi.extend(self.p_pi.row(s).iter());
        }
        let mut rewards = Vec::with_capacity(self.n_agents() * n * n);
        for r in &self.rewards {
            for s in 0..n {
                rewards.extend(r.row(s).iter());
            }
        }
        let mut features = Vec::with_capacity(n * self.n_features());
        for s in 0..n {
            features.extend(self.features.row(s).iter());
        }
        ModelDocument {
            n_states: n,
            n_agents: self.n_agents(),
            gamma: self.gamma,
            r_max: self.r_max,
            p_pi,
            rewards,
            features,
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let n = doc.n_states;
        if n == 0 || doc.n_agents == 0 {
            return Err(Error::Dimension("n_states and n_agents must be positive".into()));
        }
        if doc.p_pi.len() != n * n {
            return Err(Error::Dimension(format!("p_pi has {} entries, expected {}", doc.p_pi.len(), n * n)));
        }
        if doc.rewards.len() != doc.n_agents * n * n {
            return Err(Error::Dimension(format!(
                "rewards has {} entries, expected {}",
                doc.rewards.len(),
                doc.n_agents * n * n
            )));
        }
        if doc.features.is_empty() || !doc.features.len().is_multiple_of(n) {
            return Err(Error::Dimension(format!(
                "features has {} entries, not a positive multiple of {n}",
                doc.features.len()
            )));
        }
        let q = doc.features.len() / n;
        let p_pi = DMatrix::from_row_slice(n, n, &doc.p_pi);
        let rewards = doc
            .rewards
            .chunks(n * n)
            .map(|c| DMatrix::from_row_slice(n, n, c))
            .collect();
        let features = DMatrix::from_row_slice(n, q, &doc.features);
        Self::new(doc.gamma, p_pi, rewards, doc.r_max, features)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

/// Flat JSON representation. Matrices are row-major; rewards are agent-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub n_states: usize,
    pub n_agents: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub p_pi: Vec<f64>,
    pub rewards: Vec<f64>,
    pub features: Vec<f64>,
}

fn check_row_stochastic(p: &DMatrix<f64>) -> Result<()> {
    for (s, row) in p.row_iter().enumerate() {
        if let Some(v) = row.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidModel(format!("row {s} has negative or NaN entry {v}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidModel(format!("row {s} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

fn successors(p: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = p.nrows();
    (0..n).map(|s| (0..n).filter(|&t| p[(s, t)] > 0.0).collect()).collect()
}

fn reachable_from(succ: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; succ.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for &v in &succ[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Check that `P^k > 0` entrywise for `k = (n-1)² + 1`, the Wielandt exponent.
///
/// On failure, report either a closed class (reducible chain) or the period.
pub fn check_ergodic(p: &DMatrix<f64>) -> Result<()> {
    let n = p.nrows();
    let wielandt = (n - 1) * (n - 1) + 1;
    let mut pattern: Vec<Vec<bool>> =
        (0..n).map(|s| (0..n).map(|t| p[(s, t)] > 0.0).collect()).collect();
    let base = pattern.clone();
    let mut power = 1usize;
    // Primitive patterns stay positive for every exponent past the Wielandt bound.
    while power < wielandt {
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for k in 0..n {
                if pattern[i][k] {
                    for j in 0..n {
                        next[i][j] |= base[k][j];
                    }
                }
            }
        }
        pattern = next;
        power += 1;
        if pattern.iter().all(|row| row.iter().all(|&b| b)) {
            return Ok(());
        }
    }
    if pattern.iter().all(|row| row.iter().all(|&b| b)) {
        return Ok(());
    }

    let succ = successors(p);
    let reach: Vec<Vec<bool>> = (0..n).map(|s| reachable_from(&succ, s)).collect();
    for s in 0..n {
        if let Some(t) = (0..n).find(|&t| !reach[s][t]) {
            // The states reachable from `s` that can all reach each other form a
            // closed class when nothing outside them is reachable.
            let class: Vec<usize> = (0..n).filter(|&u| reach[s][u] && reach[u][s]).collect();
            return Err(Error::NotErgodic(format!(
                "reducible: state {t} is unreachable from state {s} (communicating class of {s}: {class:?})"
            )));
        }
    }
    // Irreducible: period is the gcd of level differences along edges.
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &v in &succ[u] {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut period = 0usize;
    for u in 0..n {
        for &v in &succ[u] {
            let diff = (level[u] + 1).abs_diff(level[v]);
            period = gcd(period, diff);
        }
    }
    Err(Error::NotErgodic(format!("irreducible but periodic with period {period}")))
}

/// Stationary distribution by power iteration from the uniform vector.
pub fn stationary_distribution(p_pi: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p_pi.nrows();
    if n == 0 || p_pi.ncols() != n {
        return Err(Error::Dimension("transition matrix must be square".into()));
    }
    check_row_stochastic(p_pi)?;
    check_ergodic(p_pi)?;
    let pt = p_pi.transpose();
    let mut d = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..STATIONARY_CAP {
        let mut next = &pt * &d;
        let total: f64 = next.sum();
        next /= total;
        residual = (&next - &d).amax();
        d = next;
        if residual <= STATIONARY_TOL {
            return Ok(d);
        }
    }
    Err(Error::NoConvergence { iterations: STATIONARY_CAP, residual })
}

/// Sign convention for `A`.
///
/// `Analysis` is `γΦᵀDPΦ − ΦᵀDΦ`, the form for which the TD increment is an
/// unbiased estimate of `Aθ + b`. `Swapped` exchanges the two `P` placements
/// (`γΦᵀDΦ − ΦᵀDPΦ`) and exists only as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ASign {
    #[default]
    Analysis,
    Swapped,
}

#[derive(Debug, Clone)]
pub struct EvaluationMatrices {
    pub d: DVector<f64>,
    /// `Φᵀ D Φ`.
    pub gram: DMatrix<f64>,
    pub a_mat: DMatrix<f64>,
    pub b_vecs: Vec<DVector<f64>>,
    pub b_avg: DVector<f64>,
    pub theta_c: DVector<f64>,
    /// `λ_min(Φᵀ D Φ)`.
    pub w: f64,
    pub gamma: f64,
}

impl EvaluationMatrices {
    pub fn n_agents(&self) -> usize {
        self.b_vecs.len()
    }

    pub fn n_features(&self) -> usize {
        self.a_mat.nrows()
    }
}

pub fn build_matrices(model: &MampdModel) -> Result<EvaluationMatrices> {
    build_matrices_with(model, ASign::Analysis)
}

pub fn build_matrices_with(model: &MampdModel, sign: ASign) -> Result<EvaluationMatrices> {
    let phi = model.features();
    let q = phi.ncols();
    let rank = linalg::rank(phi, 1e-10);
    if rank < q {
        return Err(Error::RankDeficient { rank, q });
    }
    let d = stationary_distribution(model.p_pi())?;
    let dmat = DMatrix::from_diagonal(&d);
    let phit_d = phi.transpose() * &dmat;
    let gram = &phit_d * phi;
    let cross = &phit_d * model.p_pi() * phi;
    let a_mat = match sign {
        ASign::Analysis => cross * model.gamma() - &gram,
        ASign::Swapped => &gram * model.gamma() - cross,
    };
    let b_vecs: Vec<DVector<f64>> =
        (0..model.n_agents()).map(|i| &phit_d * model.expected_rewards(i)).collect();
    let mut b_avg = DVector::zeros(q);
    for b in &b_vecs {
        b_avg += b;
    }
    b_avg /= b_vecs.len() as f64;

    let sv = a_mat.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0_f64, |a, &s| a.max(s));
    let smin = sv.iter().fold(f64::INFINITY, |a, &s| a.min(s));
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    let theta_c = a_mat
        .clone()
        .lu()
        .solve(&(-&b_avg))
        .ok_or(Error::IllConditioned(f64::INFINITY))?;
    let w = linalg::lambda_min_sym(&gram);
    Ok(EvaluationMatrices { d, gram, a_mat, b_vecs, b_avg, theta_c, w, gamma: model.gamma() })
}

/// `‖Aθ + b̄‖₂`, zero exactly at `θ_c`.
pub fn bellman_residual(theta: &DVector<f64>, mats: &EvaluationMatrices) -> Result<f64> {
    if theta.len() != mats.n_features() {
        return Err(Error::Dimension(format!(
            "theta has length {}, expected {}",
            theta.len(),
            mats.n_features()
        )));
    }
    Ok((&mats.a_mat * theta + &mats.b_avg).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl BoundCheck {
    fn new(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, passed: value <= limit + BOUND_TOL }
    }

    /// `limit − value`; nonnegative when the bound holds exactly.
    pub fn slack(&self) -> f64 {
        self.limit - self.value
    }
}

pub const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub checks: Vec<BoundCheck>,
}

impl BoundReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Numerically check the matrix bounds the convergence analysis relies on.
pub fn verify_matrix_bounds(mats: &EvaluationMatrices, model: &MampdModel) -> BoundReport {
    let gamma = model.gamma();
    let r_max = model.r_max();
    let sym = &mats.a_mat + mats.a_mat.transpose() - &mats.gram * (2.0 * (gamma - 1.0));
    let mut checks = vec![
        BoundCheck::new("a_negative_definite", linalg::lambda_max_sym(&sym), 0.0),
        BoundCheck::new("a_norm", linalg::spectral_norm(&mats.a_mat), 2.0),
    ];
    let b_max = mats.b_vecs.iter().map(|b| b.norm()).fold(0.0_f64, f64::max);
    checks.push(BoundCheck::new("b_norm", b_max, r_max));
    checks.push(BoundCheck::new(
        "theta_c_norm",
        mats.theta_c.norm(),
        r_max / ((1.0 - gamma) * mats.w),
    ));
    BoundReport { checks }
}

/// Reward table generation for [`ModelSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Independent uniform `(0, 1)` entries for every agent.
    #[default]
    Uniform,
    /// One uniform `(0, 1)` table shared by all agents.
    Homogeneous,
}

/// Seeded random model generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub n_states: usize,
    pub n_agents: usize,
    pub n_features: usize,
    pub gamma: f64,
    pub rewards: RewardKind,
    /// Self-loop weight `ρ` in `P = ρI + (1 − ρ)Q`; larger values mix slower.
    pub laziness: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            n_states: 20,
            n_agents: 8,
            n_features: 5,
            gamma: 0.9,
            rewards: RewardKind::Uniform,
            laziness: 0.0,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_states == 0 {
            errs.push("model.n_states must be positive".into());
        }
        if self.n_agents == 0 {
            errs.push("model.n_agents must be positive".into());
        }
        if self.n_features == 0 || self.n_features > self.n_states {
            errs.push(format!(
                "model.n_features must be in 1..={} (got {})",
                self.n_states, self.n_features
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            errs.push(format!("model.gamma must be in (0, 1) (got {})", self.gamma));
        }
        if !(0.0..1.0).contains(&self.laziness) {
            errs.push(format!("model.laziness must be in [0, 1) (got {})", self.laziness));
        }
        errs
    }

    pub fn generate(&self) -> Result<MampdModel> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let n = self.n_states;
        let q = self.n_features;
        let mut rng = stream_rng(self.seed, 0, StreamRole::Generator);

        let mut p = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() + 1e-3);
        for mut row in p.row_iter_mut() {
            let s: f64 = row.iter().sum();
            row /= s;
        }
        if self.laziness > 0.0 {
            p *= 1.0 - self.laziness;
            for s in 0..n {
                p[(s, s)] += self.laziness;
            }
        }
        // Restore exact unit row sums after scaling.
        for mut row in p.row_iter_mut() {
            let s: f64 = row.iter().sum();
            row /= s;
        }

        let features = loop {
            let mut phi = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
            for mut row in phi.row_iter_mut() {
                let norm = row.norm();
                if norm > 0.0 {
                    row /= norm;
                }
            }
            if linalg::rank(&phi, 1e-8) == q {
                break phi;
            }
        };

        let rewards = match self.rewards {
            RewardKind::Uniform => (0..self.n_agents)
                .map(|_| DMatrix::from_fn(n, n, |_, _| rng.random::<f64>()))
                .collect(),
            RewardKind::Homogeneous => {
                let r = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
                vec![r; self.n_agents]
            }
        };
        MampdModel::new(self.gamma, p, rewards, 1.0, features)
    }
}
