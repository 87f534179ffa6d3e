use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{LsStart, MixingKind};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::mdp::ModelSpec;
use crate::sampler::SamplerSpec;
use crate::td::StepSchedule;

/// Initial parameters: `"zeros"` or `"gaussian(σ)"`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Init {
    #[default]
    Zeros,
    Gaussian(f64),
}

impl TryFrom<String> for Init {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let t = s.trim();
        if t == "zeros" {
            return Ok(Init::Zeros);
        }
        if let Some(inner) = t.strip_prefix("gaussian(").and_then(|r| r.strip_suffix(')')) {
            let sigma: f64 = inner.trim().parse().map_err(|_| format!("bad sigma in {s:?}"))?;
            if sigma >= 0.0 && sigma.is_finite() {
                return Ok(Init::Gaussian(sigma));
            }
            return Err(format!("sigma must be finite and >= 0 in {s:?}"));
        }
        Err(format!("init must be \"zeros\" or \"gaussian(σ)\", got {s:?}"))
    }
}

impl From<Init> for String {
    fn from(i: Init) -> String {
        i.to_string()
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Zeros => write!(f, "zeros"),
            Init::Gaussian(s) => write!(f, "gaussian({s})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    #[default]
    ConsensusTd,
}

fn default_eta() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    Dtd {
        #[serde(default = "default_eta")]
        eta: f64,
        schedule: StepSchedule,
        #[serde(default)]
        init: Init,
    },
    Baseline {
        #[serde(default)]
        baseline: BaselineKind,
        mixing: MixingKind,
        #[serde(default)]
        ls_start: LsStart,
        schedule: StepSchedule,
        #[serde(default)]
        init: Init,
    },
}

impl AlgorithmSpec {
    pub fn schedule(&self) -> StepSchedule {
        match self {
            AlgorithmSpec::Dtd { schedule, .. } | AlgorithmSpec::Baseline { schedule, .. } => *schedule,
        }
    }

    pub fn init(&self) -> Init {
        match self {
            AlgorithmSpec::Dtd { init, .. } | AlgorithmSpec::Baseline { init, .. } => *init,
        }
    }
}

fn default_reps() -> usize {
    20
}

fn default_log_every() -> usize {
    100
}

fn default_output_dir() -> String {
    "runs".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSpec,
    /// Load the model from a JSON document instead of generating it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
    pub graph: GraphSpec,
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    pub iterations: usize,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl ExperimentConfig {
    /// Parse and validate, reporting every invalid field at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_json(&text)
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.model_path.is_none() {
            errs.extend(self.model.validate());
            if self.graph.n != self.model.n_agents {
                errs.push(format!(
                    "graph.n ({}) must equal model.n_agents ({})",
                    self.graph.n, self.model.n_agents
                ));
            }
        }
        errs.extend(self.graph.validate());
        errs.extend(self.sampler.validate());
        match &self.algorithm {
            AlgorithmSpec::Dtd { eta, .. } => {
                if !(*eta > 0.0 && eta.is_finite()) {
                    errs.push(format!("algorithm.eta must be positive (got {eta})"));
                }
            }
            AlgorithmSpec::Baseline { ls_start, mixing, .. } => {
                if *ls_start != LsStart::Normalized && *mixing != MixingKind::LeastSquares {
                    errs.push("algorithm.ls_start only applies to least_squares mixing".into());
                }
            }
        }
        if let Err(e) = self.algorithm.schedule().validate() {
            errs.push(format!("algorithm.schedule: {e}"));
        }
        if self.iterations == 0 {
            errs.push("iterations must be at least 1".into());
        }
        if self.repetitions == 0 {
            errs.push("repetitions must be at least 1".into());
        }
        if self.log_every == 0 {
            errs.push("log_every must be at least 1".into());
        }
        errs
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form, as hex.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Set `a.b.c` inside a JSON document, creating objects on the way.
pub fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(vec![format!("empty segment in parameter path {path:?}")]));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(vec![format!("{path:?}: {part:?} is not inside an object")]))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("split always yields at least one segment")
}
