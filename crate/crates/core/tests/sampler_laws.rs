mod common;

use dtdlab_core::mdp::{build_matrices, ModelSpec};
use dtdlab_core::rng::{stream_rng, StreamRole};
use dtdlab_core::sampler::{iid_step, markov_step, mixing_profile, Observation, Sampler, SamplerKind};
use dtdlab_core::td::{mean_drift, sampled_drift};
use nalgebra::{DMatrix, DVector};

fn within_three_sigma(counts: &[usize], d: &DVector<f64>, n: usize) -> bool {
    counts.iter().zip(d.iter()).all(|(&c, &p)| {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (c as f64 - n as f64 * p).abs() <= 3.0 * sd
    })
}

#[test]
fn iid_marginal_within_multinomial_band() {
    let model = ModelSpec { n_states: 4, n_features: 2, n_agents: 2, seed: 21, ..ModelSpec::default() }.generate().unwrap();
    let d = common::stationary(model.p_pi());
    let mut rng = stream_rng(21, 0, StreamRole::Observations);
    let n = 100_000;
    let mut counts = vec![0; 4];
    for _ in 0..n {
        counts[iid_step(&model, &d, &mut rng).s] += 1;
    }
    assert!(within_three_sigma(&counts, &d, n), "{counts:?} vs {d}");
}

#[test]
fn markov_occupancy_within_band() {
    let model = ModelSpec { n_states: 4, n_features: 2, n_agents: 1, seed: 22, ..ModelSpec::default() }.generate().unwrap();
    let d = common::stationary(model.p_pi());
    let mut rng = stream_rng(22, 0, StreamRole::Observations);
    let n = 100_000;
    let mut counts = vec![0; 4];
    let mut s = 0;
    for _ in 0..n {
        let obs = markov_step(&model, s, &mut rng);
        assert_eq!(obs.s, s);
        counts[s] += 1;
        s = obs.s_next;
    }
    assert!(within_three_sigma(&counts, &d, n), "{counts:?} vs {d}");
}

#[test]
fn restarted_chains_match_stationary_law_after_tau() {
    let model = ModelSpec { n_states: 10, laziness: 0.6, seed: 3, ..ModelSpec::default() }.generate().unwrap();
    let profile = mixing_profile(model.p_pi()).unwrap();
    let tau = profile.tau_of(1e-3).unwrap();
    let d = common::stationary(model.p_pi());
    let tv = common::tv_by_powers(model.p_pi(), &d, tau);
    assert!(tv[tau] <= 1e-3);
    assert!(tv[tau - 1] > 1e-3 || tau == 1);
}

#[test]
fn iid_drift_matches_exact_matrices() {
    let model = ModelSpec { n_states: 8, n_features: 3, n_agents: 3, seed: 5, ..ModelSpec::default() }.generate().unwrap();
    let mats = build_matrices(&model).unwrap();
    let theta = DVector::from_fn(9, |i, _| (i as f64 * 0.37).sin());
    let exact = mean_drift(&theta, &mats);
    let mut rng = stream_rng(5, 0, StreamRole::Observations);
    let n = 100_000;
    let mut sum = DVector::zeros(9);
    let mut sum_sq = DVector::zeros(9);
    for _ in 0..n {
        let g = sampled_drift(&iid_step(&model, &mats.d, &mut rng), &theta, model.features(), model.gamma());
        sum_sq += g.component_mul(&g);
        sum += g;
    }
    let nf = n as f64;
    let mean = &sum / nf;
    for c in 0..9 {
        let var = sum_sq[c] / nf - mean[c] * mean[c];
        assert!((mean[c] - exact[c]).abs() <= 5.0 * (var / nf).sqrt(), "coordinate {c}");
    }
}

#[test]
fn markov_noise_bias_decays_with_tv() {
    let model = ModelSpec { n_states: 6, n_features: 2, n_agents: 2, laziness: 0.5, seed: 9, ..ModelSpec::default() }
        .generate()
        .unwrap();
    let mats = build_matrices(&model).unwrap();
    let profile = mixing_profile(model.p_pi()).unwrap();
    let theta = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
    let mean = mean_drift(&theta, &mats);
    let n = model.n_states();
    let p = model.p_pi();
    let eps = |s: usize, t: usize| {
        let obs = Observation { s, s_next: t, rewards: model.rewards().iter().map(|r| r[(s, t)]).collect() };
        sampled_drift(&obs, &theta, model.features(), model.gamma()) - &mean
    };
    let mut sup: f64 = 0.0;
    let mut per_state = Vec::new();
    for s in 0..n {
        let mut row = DVector::zeros(theta.len());
        for t in 0..n {
            let e = eps(s, t);
            sup = sup.max(e.norm());
            row += e * p[(s, t)];
        }
        per_state.push(row);
    }
    for s0 in 0..n {
        let mut law = DMatrix::zeros(1, n);
        law[(0, s0)] = 1.0;
        for k in 0..40 {
            let bias: DVector<f64> = (0..n).map(|s| &per_state[s] * law[(0, s)]).sum();
            assert!(bias.norm() <= 2.0 * profile.tv(k) * sup + 1e-12, "s0 = {s0}, k = {k}");
            law = &law * p;
        }
    }
}

#[test]
fn identical_seeds_replay_identical_streams() {
    let model = ModelSpec::default().generate().unwrap();
    let d = common::stationary(model.p_pi());
    for kind in [SamplerKind::Iid, SamplerKind::Markov] {
        let mut a = Sampler::new(&model, &d, kind, 0.1, stream_rng(1, 2, StreamRole::Observations));
        let mut b = Sampler::new(&model, &d, kind, 0.1, stream_rng(1, 2, StreamRole::Observations));
        for _ in 0..1000 {
            assert_eq!(a.next_observation(), b.next_observation());
        }
    }
}
