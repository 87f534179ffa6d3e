use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::config::{AlgorithmSpec, ExperimentConfig, Init};
use crate::baselines::{build_mixing, consensus_td_step, MixingMatrix};
use crate::error::Result;
use crate::exec::Execution;
use crate::graph::{lift, GraphTopology, LiftedLaplacian};
use crate::mdp::{build_matrices, EvaluationMatrices, MampdModel};
use crate::rng::{stream_rng, StreamRole};
use crate::sampler::Sampler;
use crate::td::{agent_step, equilibrium, error_metric, AgentEnsemble, Equilibrium};

/// Error values above this, or non-finite ones, end a repetition.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Everything a run needs that does not depend on the repetition.
pub struct Prepared {
    pub model: MampdModel,
    pub mats: EvaluationMatrices,
    pub graph: GraphTopology,
    pub lifted: LiftedLaplacian,
    pub eq: Equilibrium,
    pub mixing: Option<MixingMatrix>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.check()?;
    let model = match &cfg.model_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(Path::new(path), e))?;
            MampdModel::from_json(&text)?
        }
        None => cfg.model.generate()?,
    };
    let graph = cfg.graph.build()?;
    if graph.n() != model.n_agents() {
        return Err(crate::Error::Config(vec![format!(
            "graph has {} nodes but the model has {} agents",
            graph.n(),
            model.n_agents()
        )]));
    }
    let mats = build_matrices(&model)?;
    let lifted = lift(&graph, model.n_features())?;
    let eta = match &cfg.algorithm {
        AlgorithmSpec::Dtd { eta, .. } => *eta,
        AlgorithmSpec::Baseline { .. } => 1.0,
    };
    let eq = equilibrium(&mats, &lifted, eta)?;
    let mixing = match &cfg.algorithm {
        AlgorithmSpec::Baseline { mixing, ls_start, .. } => Some(build_mixing(&graph, *mixing, ls_start)?),
        AlgorithmSpec::Dtd { .. } => None,
    };
    Ok(Prepared { model, mats, graph, lifted, eq, mixing })
}

/// Logged iteration indices: `0, log_every, 2·log_every, …` plus the final one.
pub fn log_grid(iterations: usize, log_every: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..=iterations).step_by(log_every).collect();
    if *ks.last().unwrap() != iterations {
        ks.push(iterations);
    }
    ks
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionTrace {
    /// Errors on a prefix of the shared grid; shorter than the grid if diverged.
    pub errors: Vec<f64>,
    pub diverged: bool,
    /// Final per-agent θ (rows are agents); the last finite state if diverged.
    pub final_theta: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub ks: Vec<usize>,
    pub reps: Vec<RepetitionTrace>,
    pub theta_c: DVector<f64>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn diverged_count(&self) -> usize {
        self.reps.iter().filter(|r| r.diverged).count()
    }

    pub fn all_diverged(&self) -> bool {
        self.reps.iter().all(|r| r.diverged)
    }

    /// Time-averaged error over the final `fraction` of iterations, for one repetition.
    pub fn rep_plateau(&self, rep: usize, fraction: f64) -> Option<f64> {
        let r = &self.reps[rep];
        if r.diverged {
            return None;
        }
        let last = *self.ks.last().unwrap() as f64;
        let from = last * (1.0 - fraction);
        let vals: Vec<f64> = self.ks.iter().zip(&r.errors).filter(|(k, _)| **k as f64 >= from).map(|(_, e)| *e).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean of [`Self::rep_plateau`] over non-diverged repetitions.
    pub fn plateau(&self, fraction: f64) -> Option<f64> {
        let vals: Vec<f64> = (0..self.reps.len()).filter_map(|r| self.rep_plateau(r, fraction)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_with(cfg, Execution::default())
}

pub fn run_with(cfg: &ExperimentConfig, exec: Execution) -> Result<RunRecord> {
    let start = Instant::now();
    let prep = prepare(cfg)?;
    let ks = log_grid(cfg.iterations, cfg.log_every);
    let reps = exec.map(cfg.repetitions, |rep| run_repetition(cfg, &prep, &ks, rep as u64));
    Ok(RunRecord {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        ks,
        reps,
        theta_c: prep.mats.theta_c.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn initial(init: Init, n: usize, q: usize, eta: f64, seed: u64, rep: u64) -> AgentEnsemble {
    match init {
        Init::Zeros => AgentEnsemble::zeros(n, q, eta),
        Init::Gaussian(sigma) => {
            let mut rng = stream_rng(seed, rep, StreamRole::Initialisation);
            AgentEnsemble::gaussian(n, q, eta, sigma, &mut rng)
        }
    }
}

/// `(1/N)‖θ̄ − 1 ⊗ θ_c‖²`, the primal part of the error metric.
pub fn consensus_error(theta_rows: &DMatrix<f64>, theta_c: &DVector<f64>) -> f64 {
    let n = theta_rows.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for c in 0..theta_rows.ncols() {
            s += (theta_rows[(i, c)] - theta_c[c]).powi(2);
        }
    }
    s / n as f64
}

fn diverging(e: f64) -> bool {
    !(e <= DIVERGENCE_THRESHOLD)
}

pub fn run_repetition(cfg: &ExperimentConfig, prep: &Prepared, ks: &[usize], rep: u64) -> RepetitionTrace {
    let seed = cfg.sampler.seed;
    let model = &prep.model;
    let (n, q) = (model.n_agents(), model.n_features());
    let features = model.features();
    let gamma = model.gamma();
    let schedule = cfg.algorithm.schedule();
    let mut sampler = Sampler::new(
        model,
        &prep.mats.d,
        cfg.sampler.model,
        cfg.sampler.reward_noise,
        stream_rng(seed, rep, StreamRole::Observations),
    );
    let mut errors = Vec::with_capacity(ks.len());
    let mut next_log = 0;

    match &cfg.algorithm {
        AlgorithmSpec::Dtd { eta, init, .. } => {
            let mut ens = initial(*init, n, q, *eta, seed, rep);
            for k in 0..=cfg.iterations {
                if next_log < ks.len() && ks[next_log] == k {
                    let e = error_metric(ens.theta_bar(), ens.w_bar(), &prep.eq, &prep.lifted);
                    if diverging(e) || !ens.is_finite() {
                        return RepetitionTrace { errors, diverged: true, final_theta: ens.theta_rows() };
                    }
                    errors.push(e);
                    next_log += 1;
                }
                if k == cfg.iterations {
                    break;
                }
                let obs = sampler.next_observation();
                ens = agent_step(&ens, &obs, schedule.alpha(k), &prep.graph, features, gamma);
            }
            RepetitionTrace { errors, diverged: false, final_theta: ens.theta_rows() }
        }
        AlgorithmSpec::Baseline { init, .. } => {
            let mix = prep.mixing.as_ref().expect("baseline runs carry a mixing matrix");
            let mut theta = initial(*init, n, q, 1.0, seed, rep).theta_rows();
            for k in 0..=cfg.iterations {
                if next_log < ks.len() && ks[next_log] == k {
                    let e = consensus_error(&theta, &prep.mats.theta_c);
                    if diverging(e) {
                        return RepetitionTrace { errors, diverged: true, final_theta: theta };
                    }
                    errors.push(e);
                    next_log += 1;
                }
                if k == cfg.iterations {
                    break;
                }
                let obs = sampler.next_observation();
                theta = consensus_td_step(&theta, &obs, schedule.alpha(k), mix, features, gamma);
            }
            RepetitionTrace { errors, diverged: false, final_theta: theta }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alg: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "model": {{"n_states": 6, "n_agents": 4, "n_features": 2, "gamma": 0.8, "seed": 1}},
                "graph": {{"kind": "cycle", "n": 4}},
                "algorithm": {alg},
                "sampler": {{"seed": 3}},
                "iterations": 2000, "repetitions": 3, "log_every": 150
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn grid_includes_final_iteration() {
        assert_eq!(log_grid(10, 4), vec![0, 4, 8, 10]);
        assert_eq!(log_grid(8, 4), vec![0, 4, 8]);
    }

    #[test]
    fn deterministic_and_execution_independent() {
        let c = cfg(r#"{"kind": "dtd", "schedule": {"kind": "constant", "alpha": 0.05}, "init": "gaussian(1)"}"#);
        let a = run_with(&c, Execution::Sequential).unwrap();
        let b = run_with(&c, Execution::Parallel).unwrap();
        assert_eq!(a.reps, b.reps);
        assert_eq!(a.ks.len(), a.reps[0].errors.len());
        assert!(a.reps[0].errors.last().unwrap() < &a.reps[0].errors[0]);
    }

    #[test]
    fn baseline_runs_and_reports_plateau() {
        let c = cfg(r#"{"kind": "baseline", "mixing": "metropolis", "schedule": {"kind": "constant", "alpha": 0.05}}"#);
        let r = run(&c).unwrap();
        assert_eq!(r.diverged_count(), 0);
        assert!(r.plateau(0.2).unwrap() < r.reps[0].errors[0]);
    }

    #[test]
    fn divergent_repetition_is_flagged_not_fatal() {
        let c = cfg(r#"{"kind": "baseline", "mixing": "least_squares", "ls_start": "adjacency", "schedule": {"kind": "constant", "alpha": 0.125}, "init": "gaussian(1)"}"#);
        let r = run(&c).unwrap();
        assert!(r.all_diverged());
        assert!(r.plateau(0.2).is_none());
        assert!(r.reps[0].errors.len() < r.ks.len());
    }
}
