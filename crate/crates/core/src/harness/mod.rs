//! Experiment orchestration: configs, seeded repetitions, CSV/JSON output,
//! summary statistics and SVG plots.

pub mod config;
pub mod output;
pub mod plot;
pub mod runner;
pub mod stats;

use std::path::{Path, PathBuf};

pub use config::{set_path, AlgorithmSpec, BaselineKind, ExperimentConfig, Init};
pub use output::{load_run, write_run, LoadedRun, RunMeta};
pub use plot::{emit_plot, render_svg, tail_slope, PlotStyle};
pub use runner::{prepare, run, run_with, Prepared, RepetitionTrace, RunRecord, DIVERGENCE_THRESHOLD};
pub use stats::{slope_fit, slope_fit_range, summarize, SlopeFit, SummaryRow};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mdp::{verify_matrix_bounds, BoundReport};
use crate::pd::{make_certificate, verify_lyapunov_inequality, LyapunovCertificate, LyapunovReport};
use crate::td::{as_pd_system, make_td_certificate, verify_td_lyapunov};

/// Random unit states drawn per certificate check.
pub const CERTIFY_SAMPLES: usize = 1000;

#[derive(Debug, Clone)]
pub struct CertificateSummary {
    pub name: &'static str,
    pub beta: f64,
    pub kappa: f64,
    pub rate: f64,
    pub sandwich: bool,
    pub report: LyapunovReport,
}

impl CertificateSummary {
    fn new(name: &'static str, cert: &LyapunovCertificate, report: LyapunovReport) -> Self {
        Self { name, beta: cert.beta, kappa: cert.decrement, rate: cert.rate(), sandwich: cert.sandwich_holds(), report }
    }

    pub fn passed(&self) -> bool {
        self.sandwich && self.report.passed()
    }
}

#[derive(Debug, Clone)]
pub struct CertifyReport {
    pub bounds: BoundReport,
    pub certificates: Vec<CertificateSummary>,
}

impl CertifyReport {
    pub fn passed(&self) -> bool {
        self.bounds.all_passed() && self.certificates.iter().all(|c| c.passed())
    }
}

/// Build and sample-check the primal-dual and TD certificates for a config.
pub fn certify(cfg: &ExperimentConfig) -> Result<CertifyReport> {
    let prep = prepare(cfg)?;
    let eta = match &cfg.algorithm {
        AlgorithmSpec::Dtd { eta, .. } => *eta,
        AlgorithmSpec::Baseline { .. } => 1.0,
    };
    let seed = cfg.sampler.seed;
    let bounds = verify_matrix_bounds(&prep.mats, &prep.model);

    let sys = as_pd_system(&prep.mats, &prep.lifted, eta)?;
    let pd_cert = make_certificate(&sys)?;
    let pd_report = verify_lyapunov_inequality(&sys, &pd_cert, CERTIFY_SAMPLES, seed);

    let td_cert = make_td_certificate(&prep.mats, &prep.lifted, eta, prep.model.gamma())?;
    let td_report = verify_td_lyapunov(&td_cert, &prep.mats, &prep.lifted, eta, CERTIFY_SAMPLES, seed);

    Ok(CertifyReport {
        bounds,
        certificates: vec![
            CertificateSummary::new("primal_dual", &pd_cert, pd_report),
            CertificateSummary::new("td", &td_cert, td_report),
        ],
    })
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: serde_json::Value,
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub final_mean: Option<f64>,
    pub final_std: Option<f64>,
    /// Mean error over the last fifth of iterations.
    pub plateau: Option<f64>,
    pub diverged: usize,
    pub repetitions: usize,
}

/// Parse `a,b,c`; entries that are not JSON become strings.
pub fn parse_values(list: &str) -> Result<Vec<serde_json::Value>> {
    let vals: Vec<serde_json::Value> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| serde_json::from_str(s).unwrap_or_else(|_| serde_json::Value::String(s.to_string())))
        .collect();
    if vals.is_empty() {
        return Err(Error::Config(vec!["sweep needs at least one value".into()]));
    }
    Ok(vals)
}

/// Run one experiment per value of `param`, writing each run and a
/// `sweep.csv` index under the base config's output directory.
pub fn sweep(
    base: &serde_json::Value,
    param: &str,
    values: &[serde_json::Value],
    exec: Execution,
) -> Result<(PathBuf, Vec<SweepPoint>)> {
    let mut cfgs = Vec::with_capacity(values.len());
    let mut errs = Vec::new();
    for v in values {
        let mut doc = base.clone();
        set_path(&mut doc, param, v.clone())?;
        match ExperimentConfig::from_value(doc) {
            Ok(c) => cfgs.push(c),
            Err(Error::Config(e)) => errs.extend(e.into_iter().map(|m| format!("{param} = {v}: {m}"))),
            Err(e) => return Err(e),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let mut points = Vec::with_capacity(cfgs.len());
    for (cfg, v) in cfgs.iter().zip(values) {
        let record = run_with(cfg, exec)?;
        let dir = write_run(&record, &cfg.output_dir)?;
        let last = record.summary().into_iter().rfind(|r| r.k == *record.ks.last().unwrap());
        points.push(SweepPoint {
            value: v.clone(),
            run_dir: dir,
            config_hash: record.config_hash.clone(),
            final_mean: last.map(|r| r.mean),
            final_std: last.map(|r| r.std),
            plateau: record.plateau(0.2),
            diverged: record.diverged_count(),
            repetitions: record.reps.len(),
        });
    }
    let root = Path::new(&cfgs[0].output_dir);
    let path = root.join("sweep.csv");
    std::fs::write(&path, sweep_csv(param, &points)?).map_err(|e| Error::io(&path, e))?;
    Ok((path, points))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

pub fn sweep_csv(param: &str, points: &[SweepPoint]) -> Result<Vec<u8>> {
    let p = Path::new("sweep.csv");
    let wrap = |e: csv::Error| Error::io(p, std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([param, "config_hash", "final_mean", "final_std", "plateau", "diverged", "repetitions"])
        .map_err(wrap)?;
    for pt in points {
        let value = match &pt.value {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        w.write_record([
            value,
            pt.config_hash.clone(),
            opt(pt.final_mean),
            opt(pt.final_std),
            opt(pt.plateau),
            pt.diverged.to_string(),
            pt.repetitions.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.into_inner().map_err(|e| Error::io(p, e.into_error()))
}
