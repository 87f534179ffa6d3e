//! Consensus TD with a doubly stochastic mixing matrix, and three ways to build one.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::sampler::Observation;
use crate::td::td_error;

pub const DS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    Sinkhorn,
    LeastSquares,
    Metropolis,
}

/// Matrix that [`least_squares_ds_from`] corrects onto the doubly stochastic set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LsStart {
    /// `(A + I)` with row `i` divided by `deg(i) + 1`.
    #[default]
    Normalized,
    /// The bare adjacency matrix `A`.
    Adjacency,
    /// `1/N` on every allowed entry.
    Uniform,
    #[serde(skip)]
    Custom(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub w_mat: DMatrix<f64>,
    pub construction: MixingKind,
    rows: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    fn new(w_mat: DMatrix<f64>, construction: MixingKind) -> Self {
        let rows = w_mat
            .row_iter()
            .map(|r| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (j, *v)).collect())
            .collect();
        Self { w_mat, construction, rows }
    }

    pub fn n(&self) -> usize {
        self.w_mat.nrows()
    }

    /// `max(‖W1 − 1‖∞, ‖1ᵀW − 1ᵀ‖∞)`.
    pub fn stochastic_deviation(&self) -> f64 {
        sum_deviation(&self.w_mat)
    }

    pub fn min_entry(&self) -> f64 {
        self.w_mat.min()
    }

    pub fn respects(&self, graph: &GraphTopology) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..n).all(|j| i == j || graph.has_edge(i, j) || self.w_mat[(i, j)] == 0.0))
    }

    /// Spectral radius on the disagreement subspace, the quantity that decides
    /// whether consensus iterations contract.
    pub fn disagreement_radius(&self) -> f64 {
        let n = self.n();
        let center = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let m = &center * &self.w_mat * &center;
        m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

fn sum_deviation(w: &DMatrix<f64>) -> f64 {
    let rows = w.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let cols = w.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
    rows.max(cols)
}

fn pattern(graph: &GraphTopology) -> DMatrix<f64> {
    let n = graph.n();
    DMatrix::from_fn(n, n, |i, j| if i == j || graph.has_edge(i, j) { 1.0 } else { 0.0 })
}

pub fn sinkhorn_knopp(graph: &GraphTopology, max_iters: usize, tol: f64) -> Result<MixingMatrix> {
    sinkhorn_from(pattern(graph), max_iters, tol)
}

/// Alternate row and column normalisation of a nonnegative start matrix.
pub fn sinkhorn_from(start: DMatrix<f64>, max_iters: usize, tol: f64) -> Result<MixingMatrix> {
    let mut w = start;
    let mut deviation = sum_deviation(&w);
    for _ in 0..max_iters {
        if deviation <= tol {
            break;
        }
        for mut row in w.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        for mut col in w.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        deviation = sum_deviation(&w);
    }
    if !(deviation <= tol) {
        return Err(Error::SinkhornNoConvergence { iterations: max_iters, deviation });
    }
    Ok(MixingMatrix::new(w, MixingKind::Sinkhorn))
}

pub fn least_squares_ds(graph: &GraphTopology) -> Result<MixingMatrix> {
    least_squares_ds_from(graph, &LsStart::Normalized)
}

/// Nearest matrix in Frobenius norm to the start matrix among those with unit
/// row and column sums and the graph's sparsity pattern. Entries may be negative.
///
/// Stationarity of the Lagrangian gives `X_ij = X0_ij + λ_i + μ_j` on the
/// pattern, so only the `2N` multipliers are solved for.
pub fn least_squares_ds_from(graph: &GraphTopology, start: &LsStart) -> Result<MixingMatrix> {
    let n = graph.n();
    let mask = pattern(graph);
    let x0 = match start {
        LsStart::Normalized => DMatrix::from_fn(n, n, |i, j| mask[(i, j)] / (graph.degree(i) as f64 + 1.0)),
        LsStart::Adjacency => DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { mask[(i, j)] }),
        LsStart::Uniform => &mask / n as f64,
        LsStart::Custom(m) => {
            if m.shape() != (n, n) {
                return Err(Error::Dimension(format!("start matrix must be {n}x{n}")));
            }
            m.component_mul(&mask)
        }
    };
    let mut k = DMatrix::zeros(2 * n, 2 * n);
    let mut rhs = DVector::zeros(2 * n);
    for i in 0..n {
        for j in 0..n {
            if mask[(i, j)] != 0.0 {
                // Row i constraint.
                k[(i, i)] += 1.0;
                k[(i, n + j)] += 1.0;
                // Column j constraint.
                k[(n + j, i)] += 1.0;
                k[(n + j, n + j)] += 1.0;
            }
        }
        rhs[i] = 1.0 - x0.row(i).sum();
        rhs[n + i] = 1.0 - x0.column(i).sum();
    }
    let multipliers = k
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|_| Error::Infeasible(f64::NAN))?;
    let residual = (&k * &multipliers - &rhs).amax();
    if residual > DS_TOL {
        return Err(Error::Infeasible(residual));
    }
    let x = DMatrix::from_fn(n, n, |i, j| {
        if mask[(i, j)] != 0.0 {
            x0[(i, j)] + multipliers[i] + multipliers[n + j]
        } else {
            0.0
        }
    });
    Ok(MixingMatrix::new(x, MixingKind::LeastSquares))
}

/// `W_ij = 1/(1 + max(d_i, d_j))` on edges, remainder on the diagonal.
pub fn metropolis(graph: &GraphTopology) -> MixingMatrix {
    let n = graph.n();
    let mut w = DMatrix::zeros(n, n);
    for &(i, j) in graph.edges() {
        let v = 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        w[(i, i)] = 1.0 - w.row(i).sum();
    }
    MixingMatrix::new(w, MixingKind::Metropolis)
}

pub fn build_mixing(graph: &GraphTopology, kind: MixingKind, ls_start: &LsStart) -> Result<MixingMatrix> {
    match kind {
        MixingKind::Sinkhorn => sinkhorn_knopp(graph, 10_000, 1e-10),
        MixingKind::LeastSquares => least_squares_ds_from(graph, ls_start),
        MixingKind::Metropolis => Ok(metropolis(graph)),
    }
}

/// `θⁱ ← Σ_j W_ij θʲ + α δⁱ φ(s)` for every agent, synchronously.
/// Rows of `theta_rows` are agents.
pub fn consensus_td_step(
    theta_rows: &DMatrix<f64>,
    obs: &Observation,
    alpha: f64,
    mix: &MixingMatrix,
    features: &DMatrix<f64>,
    gamma: f64,
) -> DMatrix<f64> {
    let (n, q) = theta_rows.shape();
    let mut out = DMatrix::zeros(n, q);
    let mut th_i = vec![0.0; q];
    for i in 0..n {
        for c in 0..q {
            th_i[c] = theta_rows[(i, c)];
        }
        let delta = td_error(obs, i, &th_i, features, gamma);
        for c in 0..q {
            let mixed: f64 = mix.rows[i].iter().map(|&(j, wij)| wij * theta_rows[(j, c)]).sum();
            out[(i, c)] = mixed + alpha * delta * features[(obs.s, c)];
        }
    }
    out
}
