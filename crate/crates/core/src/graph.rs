//! Undirected communication graphs and their Laplacians.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{stream_rng, StreamRole};

/// Eigenvalues at most this fraction of `λ_max` count as zero.
pub const ZERO_EIG_TOL: f64 = 1e-10;
pub const ER_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Cycle,
    Star,
    Complete,
    Path,
    ErdosRenyi,
}

/// Graph section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub kind: GraphKind,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl GraphSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n == 0 {
            errs.push("graph.n must be at least 1".into());
        }
        match (self.kind, self.p) {
            (GraphKind::ErdosRenyi, None) => errs.push("graph.p is required for erdos_renyi".into()),
            (GraphKind::ErdosRenyi, Some(p)) if !(p > 0.0 && p <= 1.0) => {
                errs.push(format!("graph.p must be in (0, 1] (got {p})"))
            }
            _ => {}
        }
        errs
    }

    pub fn build(&self) -> Result<GraphTopology> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        make_graph(self.kind, self.n, self.p.unwrap_or(1.0), self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumSummary {
    /// `None` for a single agent, where `L = [0]` has no nonzero eigenvalue.
    pub lambda_min_pos: Option<f64>,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    laplacian: DMatrix<f64>,
    spectrum: SpectrumSummary,
}

impl GraphTopology {
    /// Build from an undirected edge list. Duplicates and orientation are normalised.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        let mut norm: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
            norm.push((i.min(j), i.max(j)));
        }
        norm.sort_unstable();
        norm.dedup();
        let mut neighbors = vec![Vec::new(); n];
        let mut laplacian = DMatrix::zeros(n, n);
        for &(i, j) in &norm {
            neighbors[i].push(j);
            neighbors[j].push(i);
            laplacian[(i, j)] = -1.0;
            laplacian[(j, i)] = -1.0;
            laplacian[(i, i)] += 1.0;
            laplacian[(j, j)] += 1.0;
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        let spectrum = spectrum_summary(&laplacian)?;
        Ok(Self { n, edges: norm, neighbors, laplacian, spectrum })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|i| self.degree(i)).max().unwrap_or(0)
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn spectrum(&self) -> SpectrumSummary {
        self.spectrum
    }

    pub fn lambda_max(&self) -> f64 {
        self.spectrum.lambda_max
    }

    pub fn lambda_min_pos(&self) -> Option<f64> {
        self.spectrum.lambda_min_pos
    }

    /// Single-agent graph: no edges, no algebraic connectivity.
    pub fn is_degenerate(&self) -> bool {
        self.n == 1
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }
}

/// `(λ⁺_min, λ_max)` from a full symmetric eigendecomposition of a Laplacian.
pub fn spectrum_summary(laplacian: &DMatrix<f64>) -> Result<SpectrumSummary> {
    let ev = linalg::sym_eigenvalues(laplacian);
    let lambda_max = ev.last().copied().unwrap_or(0.0).max(0.0);
    let cutoff = ZERO_EIG_TOL * lambda_max.max(1.0);
    let zeros = ev.iter().filter(|l| l.abs() <= cutoff).count();
    if zeros != 1 {
        return Err(Error::Disconnected(zeros));
    }
    let lambda_min_pos = ev.iter().copied().find(|&l| l > cutoff);
    Ok(SpectrumSummary { lambda_min_pos, lambda_max })
}

pub fn make_graph(kind: GraphKind, n: usize, p: f64, seed: u64) -> Result<GraphTopology> {
    if n == 0 {
        return Err(Error::InvalidGraph("n must be at least 1".into()));
    }
    let edges: Vec<(usize, usize)> = match kind {
        GraphKind::Cycle => match n {
            1 => vec![],
            2 => vec![(0, 1)],
            _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        },
        GraphKind::Path => (1..n).map(|i| (i - 1, i)).collect(),
        GraphKind::Star => (1..n).map(|i| (0, i)).collect(),
        GraphKind::Complete => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect(),
        GraphKind::ErdosRenyi => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidGraph(format!("edge probability {p} not in (0, 1]")));
            }
            let mut rng = stream_rng(seed, 0, StreamRole::Generator);
            for _ in 0..ER_RETRIES {
                let edges: Vec<(usize, usize)> = (0..n)
                    .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                    .filter(|_| rng.random::<f64>() < p)
                    .collect();
                match GraphTopology::from_edges(n, &edges) {
                    Ok(g) => return Ok(g),
                    Err(Error::Disconnected(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            return Err(Error::ConnectivityRetries { n, p, seed, retries: ER_RETRIES });
        }
    };
    GraphTopology::from_edges(n, &edges)
}

/// `L̄ = L ⊗ I_q` with its pseudoinverse and range projector.
#[derive(Debug, Clone)]
pub struct LiftedLaplacian {
    base: GraphTopology,
    q: usize,
    l_bar: DMatrix<f64>,
    pinv: DMatrix<f64>,
    projector: DMatrix<f64>,
}

pub fn lift(g: &GraphTopology, q: usize) -> Result<LiftedLaplacian> {
    if q == 0 {
        return Err(Error::Dimension("feature dimension q must be positive".into()));
    }
    let l_bar = linalg::kron_identity(g.laplacian(), q);
    // (L ⊗ I)† = L† ⊗ I, which avoids decomposing the larger matrix.
    let pinv = linalg::kron_identity(&linalg::pinv_sym(g.laplacian(), ZERO_EIG_TOL), q);
    let projector = &l_bar * &pinv;
    Ok(LiftedLaplacian { base: g.clone(), q, l_bar, pinv, projector })
}

impl LiftedLaplacian {
    pub fn base(&self) -> &GraphTopology {
        &self.base
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_agents(&self) -> usize {
        self.base.n()
    }

    pub fn dim(&self) -> usize {
        self.base.n() * self.q
    }

    pub fn l_bar(&self) -> &DMatrix<f64> {
        &self.l_bar
    }

    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn lambda_max(&self) -> f64 {
        self.base.lambda_max()
    }

    pub fn lambda_min_pos(&self) -> Option<f64> {
        self.base.lambda_min_pos()
    }

    /// `L̄ L̄† x`, computed by removing the agent average from each coordinate.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.base.n();
        let q = self.q;
        let mut mean = vec![0.0; q];
        for i in 0..n {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += x[i * q + c];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        DVector::from_fn(n * q, |k, _| x[k] - mean[k % q])
    }
}
