use std::collections::BTreeMap;

use dtdlab_core::exec::Execution;
use dtdlab_core::harness::output::{SUMMARY_FILE, TRACE_FILE};
use dtdlab_core::harness::stats::mean_std;
use dtdlab_core::harness::{
    emit_plot, load_run, prepare, run, run_with, sweep, write_run, ExperimentConfig, PlotStyle,
};
use dtdlab_core::rng::{stream_rng, StreamRole};
use dtdlab_core::sampler::Sampler;
use dtdlab_core::td::{agent_step, error_metric, td_h_mat, AgentEnsemble};
use dtdlab_core::Error;
use serde_json::{json, Value};

fn doc(alg: Value, iterations: usize) -> Value {
    json!({
        "model": {"n_states": 8, "n_agents": 5, "n_features": 3, "gamma": 0.85, "seed": 2},
        "graph": {"kind": "cycle", "n": 5},
        "algorithm": alg,
        "sampler": {"model": "markov", "seed": 17},
        "iterations": iterations,
        "repetitions": 4,
        "log_every": 100
    })
}

fn dtd_const(alpha: f64) -> Value {
    json!({"kind": "dtd", "schedule": {"kind": "constant", "alpha": alpha}, "init": "gaussian(0.5)"})
}

fn cfg(v: Value) -> ExperimentConfig {
    ExperimentConfig::from_value(v).unwrap()
}

#[test]
fn identical_configs_write_identical_csv() {
    let c = cfg(doc(dtd_const(0.05), 3000));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = write_run(&run_with(&c, Execution::Parallel).unwrap(), a.path()).unwrap();
    let db = write_run(&run_with(&c, Execution::Sequential).unwrap(), b.path()).unwrap();
    assert_eq!(da.file_name(), db.file_name());
    for f in [TRACE_FILE, SUMMARY_FILE] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn summary_is_recomputable_from_trace() {
    let c = cfg(doc(dtd_const(0.05), 3000));
    let dir = tempfile::tempdir().unwrap();
    let loaded = load_run(write_run(&run(&c).unwrap(), dir.path()).unwrap()).unwrap();
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for trace in &loaded.traces {
        for (k, e) in trace {
            by_k.entry(*k).or_default().push(*e);
        }
    }
    assert_eq!(by_k.len(), loaded.summary.len());
    for row in &loaded.summary {
        let (mean, std) = mean_std(&by_k[&row.k]);
        assert!((mean - row.mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((std - row.std).abs() <= 1e-12 * std.abs().max(1.0));
    }
    assert_eq!(loaded.meta.config, c);
    assert_eq!(loaded.meta.config_hash, c.hash());
}

#[test]
fn logged_error_is_the_td_error_metric() {
    let c = cfg(doc(dtd_const(0.05), 1000));
    let record = run(&c).unwrap();
    let prep = prepare(&c).unwrap();
    let model = &prep.model;
    let rep = 2u64;
    let mut init_rng = stream_rng(c.sampler.seed, rep, StreamRole::Initialisation);
    let mut ens = AgentEnsemble::gaussian(5, 3, 1.0, 0.5, &mut init_rng);
    let mut sampler = Sampler::new(
        model,
        &prep.mats.d,
        c.sampler.model,
        0.0,
        stream_rng(c.sampler.seed, rep, StreamRole::Observations),
    );
    let mut expected = Vec::new();
    for k in 0..=1000 {
        if k % 100 == 0 {
            expected.push(error_metric(ens.theta_bar(), ens.w_bar(), &prep.eq, &prep.lifted));
        }
        if k < 1000 {
            ens = agent_step(&ens, &sampler.next_observation(), 0.05, &prep.graph, model.features(), model.gamma());
        }
    }
    assert_eq!(record.reps[rep as usize].errors, expected);
}

#[test]
fn constant_step_plateau_orders_with_alpha() {
    let base = doc(dtd_const(0.125), 40_000);
    let dir = tempfile::tempdir().unwrap();
    let mut base = base;
    base["output_dir"] = json!(dir.path().to_str().unwrap());
    let values: Vec<Value> = [0.125, 0.0625, 0.03125, 0.015625].iter().map(|a| json!(a)).collect();
    let (csv_path, points) = sweep(&base, "algorithm.schedule.alpha", &values, Execution::Parallel).unwrap();
    let plateaus: Vec<f64> = points.iter().map(|p| p.plateau.unwrap()).collect();
    assert!(plateaus.windows(2).all(|w| w[0] > w[1]), "{plateaus:?}");
    let text = std::fs::read_to_string(csv_path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("algorithm.schedule.alpha,config_hash,"));
    for p in &points {
        assert!(p.run_dir.join(TRACE_FILE).exists());
    }
}

#[test]
fn sweep_reports_every_bad_value() {
    let base = doc(dtd_const(0.05), 100);
    match sweep(&base, "algorithm.eta", &[json!(-1.0), json!(0.0)], Execution::Sequential) {
        Err(Error::Config(errs)) => assert_eq!(errs.len(), 2, "{errs:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn plots_from_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = doc(dtd_const(0.05), 100_000);
    d["sampler"]["model"] = json!("iid");
    d["log_every"] = json!(500);
    // h1 = 2/ρ with ρ the slowest decay rate of the mean dynamics.
    let prep = prepare(&cfg(d.clone())).unwrap();
    let rho = td_h_mat(&prep.mats, &prep.lifted, 1.0)
        .complex_eigenvalues()
        .iter()
        .filter(|l| l.norm() > 1e-9)
        .map(|l| -l.re)
        .fold(f64::INFINITY, f64::min);
    let h1 = 2.0 / rho;
    d["algorithm"] = json!({"kind": "dtd", "schedule": {"kind": "diminishing", "h1": h1, "h2": 16.0 * h1}});
    d["repetitions"] = json!(20);
    let c = cfg(d);
    let run_dir = write_run(&run(&c).unwrap(), dir.path()).unwrap();
    let svg = std::fs::read_to_string(emit_plot(&run_dir, PlotStyle::LogLog).unwrap()).unwrap();
    assert!(svg.contains("class=\"band\""));
    let slope: f64 = svg
        .split("tail slope ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .expect("slope annotation");
    assert!((-1.3..=-0.7).contains(&slope), "{slope}");

    let linear = std::fs::read_to_string(emit_plot(&run_dir, PlotStyle::Linear).unwrap()).unwrap();
    assert!(!linear.contains("tail slope"));
}

#[test]
fn divergent_baseline_plot_is_annotated() {
    let alg = json!({"kind": "baseline", "mixing": "least_squares", "ls_start": "adjacency",
                     "schedule": {"kind": "constant", "alpha": 0.125}, "init": "gaussian(1)"});
    let mut d = doc(alg, 2000);
    d["graph"] = json!({"kind": "cycle", "n": 5});
    let c = cfg(d);
    let record = run(&c).unwrap();
    assert!(record.all_diverged());
    let dir = tempfile::tempdir().unwrap();
    let run_dir = write_run(&record, dir.path()).unwrap();
    let svg = std::fs::read_to_string(emit_plot(&run_dir, PlotStyle::LogLog).unwrap()).unwrap();
    assert!(svg.contains("all 4 repetitions diverged"));
    assert!(!svg.contains("class=\"band\""));
}

#[test]
fn unknown_fields_are_rejected() {
    let mut d = doc(dtd_const(0.05), 10);
    d["iteratons"] = json!(5);
    assert!(matches!(ExperimentConfig::from_value(d), Err(Error::Config(_))));
}
