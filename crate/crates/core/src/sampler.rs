//! Observation streams and exact mixing times.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{stationary_distribution, MampdModel};

/// Total-variation values below this are reported as exactly zero.
pub const TV_FLOOR: f64 = 1e-15;
pub const MIXING_TARGET: f64 = 1e-12;
pub const MIXING_CAP: usize = 1_000_000;

/// One shared transition plus every agent's private reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub s: usize,
    pub s_next: usize,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Iid,
    Markov,
}

/// Sampler section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub model: SamplerKind,
    pub reward_noise: f64,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn validate(&self) -> Vec<String> {
        if self.reward_noise >= 0.0 && self.reward_noise.is_finite() {
            vec![]
        } else {
            vec![format!("sampler.reward_noise must be finite and >= 0 (got {})", self.reward_noise)]
        }
    }
}

fn cumulative<'a>(weights: impl IntoIterator<Item = &'a f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Inverse-CDF draw. Falls back to the last positive-weight index if rounding
/// leaves the total slightly below `u`.
fn draw(cum: &[f64], rng: &mut impl Rng) -> usize {
    let total = *cum.last().expect("non-empty distribution");
    let u = rng.random::<f64>() * total;
    match cum.iter().position(|&c| u < c) {
        Some(i) => i,
        None => cum.iter().rposition(|&c| c < total).map_or(cum.len() - 1, |i| i + 1),
    }
}

fn emit(model: &MampdModel, s: usize, s_next: usize, noise: f64, rng: &mut impl Rng) -> Observation {
    let r_max = model.r_max();
    let rewards = model
        .rewards()
        .iter()
        .map(|r| {
            let base = r[(s, s_next)];
            if noise > 0.0 {
                (base + rng.random_range(-noise..=noise)).clamp(-r_max, r_max)
            } else {
                base
            }
        })
        .collect();
    Observation { s, s_next, rewards }
}

/// `s ~ d`, `s' ~ P(s, ·)`, noiseless rewards.
pub fn iid_step(model: &MampdModel, d: &DVector<f64>, rng: &mut impl Rng) -> Observation {
    let s = draw(&cumulative(d.iter()), rng);
    let s_next = draw(&cumulative(model.p_pi().row(s).iter()), rng);
    emit(model, s, s_next, 0.0, rng)
}

/// `s = current`, `s' ~ P(s, ·)`, noiseless rewards.
pub fn markov_step(model: &MampdModel, current: usize, rng: &mut impl Rng) -> Observation {
    let s_next = draw(&cumulative(model.p_pi().row(current).iter()), rng);
    emit(model, current, s_next, 0.0, rng)
}

/// Cached sampler for long runs. Produces the same draws as [`iid_step`] and
/// [`markov_step`] when `reward_noise` is zero.
pub struct Sampler<'a, R: Rng> {
    model: &'a MampdModel,
    kind: SamplerKind,
    noise: f64,
    cum_d: Vec<f64>,
    cum_rows: Vec<Vec<f64>>,
    state: usize,
    rng: R,
}

impl<'a, R: Rng> Sampler<'a, R> {
    /// The Markov chain starts from a uniformly drawn state.
    pub fn new(model: &'a MampdModel, d: &DVector<f64>, kind: SamplerKind, noise: f64, mut rng: R) -> Self {
        let n = model.n_states();
        let cum_rows = (0..n).map(|s| cumulative(model.p_pi().row(s).iter())).collect();
        let state = match kind {
            SamplerKind::Markov => rng.random_range(0..n),
            SamplerKind::Iid => 0,
        };
        Self { model, kind, noise, cum_d: cumulative(d.iter()), cum_rows, state, rng }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn next_observation(&mut self) -> Observation {
        let s = match self.kind {
            SamplerKind::Iid => draw(&self.cum_d, &mut self.rng),
            SamplerKind::Markov => self.state,
        };
        let s_next = draw(&self.cum_rows[s], &mut self.rng);
        self.state = s_next;
        emit(self.model, s, s_next, self.noise, &mut self.rng)
    }
}

/// Worst-case total-variation distance to stationarity as a function of time.
#[derive(Debug, Clone)]
pub struct MixingProfile {
    pub mu_inf: DVector<f64>,
    /// `tv_curve[k] = max_i TV(e_iᵀPᵏ, μ)`, computed until it reaches the target.
    pub tv_curve: Vec<f64>,
}

impl MixingProfile {
    pub fn tv(&self, k: usize) -> f64 {
        self.tv_curve.get(k).copied().unwrap_or(0.0)
    }

    /// `τ(δ) = min{k ≥ 1 : tv(k) ≤ δ}`; `None` if δ is below the computed range.
    pub fn tau_of(&self, delta: f64) -> Option<usize> {
        (1..self.tv_curve.len()).find(|&k| self.tv_curve[k] <= delta)
    }
}

pub fn total_variation(a: impl IntoIterator<Item = f64>, b: &DVector<f64>) -> f64 {
    0.5 * a.into_iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn mixing_profile(p_pi: &DMatrix<f64>) -> Result<MixingProfile> {
    mixing_profile_with(p_pi, MIXING_TARGET, MIXING_CAP)
}

pub fn mixing_profile_with(p_pi: &DMatrix<f64>, target: f64, cap: usize) -> Result<MixingProfile> {
    let mu = stationary_distribution(p_pi)?;
    let n = p_pi.nrows();
    let worst = |pk: &DMatrix<f64>| {
        let tv = (0..n)
            .map(|i| total_variation(pk.row(i).iter().copied(), &mu))
            .fold(0.0_f64, f64::max);
        if tv < TV_FLOOR {
            0.0
        } else {
            tv
        }
    };
    let mut pk = DMatrix::identity(n, n);
    let mut curve = vec![worst(&pk)];
    // k = 0 never counts towards τ, so at least one step is always computed.
    for _ in 0..cap {
        pk = &pk * p_pi;
        let tv = worst(&pk);
        curve.push(tv);
        if tv <= target {
            return Ok(MixingProfile { mu_inf: mu, tv_curve: curve });
        }
    }
    Err(Error::SlowMixing { cap, target, last: *curve.last().unwrap() })
}
