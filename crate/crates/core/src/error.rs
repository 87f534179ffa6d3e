use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("transition matrix is not ergodic: {0}")]
    NotErgodic(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("feature matrix is rank deficient: rank {rank} < {q}")]
    RankDeficient { rank: usize, q: usize },

    #[error("matrix A is numerically singular (condition number {0:e})")]
    IllConditioned(f64),

    #[error("graph is disconnected: zero eigenvalue has multiplicity {0}")]
    Disconnected(usize),

    #[error("no connected Erdos-Renyi graph after {retries} draws (n = {n}, p = {p}, seed = {seed})")]
    ConnectivityRetries { n: usize, p: f64, seed: u64, retries: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid primal-dual system: {0}")]
    InvalidSystem(String),

    #[error("step dt = {dt} exceeds the stability bound {bound} = 0.1/||H||")]
    StepTooLarge { dt: f64, bound: f64 },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("mixing profile did not reach tv <= {target:e} within {cap} steps (last {last:e})")]
    SlowMixing { cap: usize, target: f64, last: f64 },

    #[error("equilibrium right-hand side is not in range(L) (residual {0:e})")]
    NotInRange(f64),

    #[error("Sinkhorn-Knopp did not converge in {iterations} iterations (deviation {deviation:e})")]
    SinkhornNoConvergence { iterations: usize, deviation: f64 },

    #[error("least-squares doubly stochastic problem infeasible (residual {0:e})")]
    Infeasible(f64),

    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
