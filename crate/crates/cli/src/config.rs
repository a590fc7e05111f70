//! Run configuration: a flat TOML file, then command-line flags on top.
//!
//! ```toml
//! backend = "toy"                 # toy | analytic | any registered key
//! classes = ["cat", "candle"]     # campaign classes; empty = every classifier class
//! class = "cat"                   # generate / sweep
//! prompt_template = "a high-quality image of a {class}"
//! mode = "untargeted"             # untargeted | targeted | ood_to_id | id_to_ood
//! target_label = 2
//! lambda = 0.0
//! metric = "euclidean"            # euclidean | cosine
//! msp_threshold = 0.5
//! lr = 0.001
//! steps = 20
//! variable = "class-token"        # class-token | text-embedding | latent
//! guidance_scale = 7.5
//! sampling_steps = 20             # default depends on the backend
//! stop_at_first_adversarial = false
//! seed = 0
//! prefilter = true
//! prefilter_samples = 100
//! accuracy_threshold = 0.9
//! latents_per_class = 10
//! oracle = "human"                # human | accept_all
//! magnitudes = [0.0, 1.0, 2.0, 4.0, 8.0]
//! workers = 4
//! out = "naegen-out"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use naegen_core::optimizer::{
    OptimizationConfig, VariableChoice, DEFAULT_GUIDANCE_SCALE, DEFAULT_LEARNING_RATE, DEFAULT_SAMPLING_STEPS,
    DEFAULT_STEPS, TOY_SAMPLING_STEPS,
};
use naegen_core::{AttackMode, AttackSpec, NaeError, RegularizerMetric};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{CliError, KeyProblem};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    /// Leave every candidate for human review.
    #[default]
    Human,
    /// Scripted stand-in that confirms every candidate.
    AcceptAll,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Config {
    pub backend: String,
    pub classes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
    pub mode: AttackMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_label: Option<usize>,
    pub lambda: f64,
    pub metric: RegularizerMetric,
    pub msp_threshold: f64,
    pub lr: f64,
    pub steps: usize,
    pub variable: VariableChoice,
    pub guidance_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling_steps: Option<usize>,
    pub stop_at_first_adversarial: bool,
    #[serde(serialize_with = "seed_to_toml")]
    pub seed: u64,
    pub prefilter: bool,
    pub prefilter_samples: usize,
    pub accuracy_threshold: f64,
    pub latents_per_class: usize,
    pub oracle: OracleChoice,
    pub magnitudes: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub out: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        let spec = AttackSpec::untargeted("", "", 0);
        Self {
            backend: "toy".into(),
            classes: Vec::new(),
            class: None,
            prompt_template: None,
            mode: AttackMode::Untargeted,
            target_label: None,
            lambda: spec.lambda,
            metric: spec.regularizer_metric,
            msp_threshold: spec.msp_threshold,
            lr: DEFAULT_LEARNING_RATE,
            steps: DEFAULT_STEPS,
            variable: VariableChoice::ClassToken,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            sampling_steps: None,
            stop_at_first_adversarial: false,
            seed: 0,
            prefilter: true,
            prefilter_samples: 100,
            accuracy_threshold: 0.9,
            latents_per_class: 10,
            oracle: OracleChoice::Human,
            magnitudes: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            workers: None,
            out: PathBuf::from("naegen-out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "backend",
    "classes",
    "class",
    "prompt_template",
    "mode",
    "target_label",
    "lambda",
    "metric",
    "msp_threshold",
    "lr",
    "steps",
    "variable",
    "guidance_scale",
    "sampling_steps",
    "stop_at_first_adversarial",
    "seed",
    "prefilter",
    "prefilter_samples",
    "accuracy_threshold",
    "latents_per_class",
    "oracle",
    "magnitudes",
    "workers",
    "out",
];

/// Command-line values; `None` leaves the configured value alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub backend: Option<String>,
    pub class: Option<String>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub metric: Option<String>,
    pub variable: Option<String>,
    pub guidance_scale: Option<f64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub magnitudes: Option<Vec<f64>>,
}

impl Overrides {
    fn entries(&self) -> Vec<(&'static str, Value)> {
        let mut v = Vec::new();
        let int = |n: u64| Value::Integer(n as i64);
        if let Some(x) = &self.backend {
            v.push(("backend", Value::String(x.clone())));
        }
        if let Some(x) = &self.class {
            v.push(("class", Value::String(x.clone())));
        }
        if let Some(x) = self.seed {
            // Seeds above i64::MAX do not fit a TOML integer; carry them as text.
            v.push(("seed", Value::String(x.to_string())));
        }
        if let Some(x) = self.steps {
            v.push(("steps", int(x as u64)));
        }
        if let Some(x) = self.lr {
            v.push(("lr", Value::Float(x)));
        }
        if let Some(x) = self.lambda {
            v.push(("lambda", Value::Float(x)));
        }
        if let Some(x) = &self.metric {
            v.push(("metric", Value::String(x.clone())));
        }
        if let Some(x) = &self.variable {
            v.push(("variable", Value::String(x.clone())));
        }
        if let Some(x) = self.guidance_scale {
            v.push(("guidance_scale", Value::Float(x)));
        }
        if let Some(x) = self.workers {
            v.push(("workers", int(x as u64)));
        }
        if let Some(x) = &self.out {
            v.push(("out", Value::String(x.display().to_string())));
        }
        if let Some(x) = &self.magnitudes {
            v.push(("magnitudes", Value::Array(x.iter().map(|m| Value::Float(*m)).collect())));
        }
        v
    }
}

impl Config {
    /// Defaults, then `path` (if any), then `overrides`. Every bad key is reported.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| NaeError::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| {
                    CliError::Config(vec![KeyProblem { key: String::new(), message: format!("{}: {e}", p.display()) }])
                })?
            }
            None => toml::Table::new(),
        };
        Self::from_table(&table, overrides)
    }

    pub fn from_table(table: &toml::Table, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        for (key, value) in table {
            if !KEYS.contains(&key.as_str()) {
                problems.push(KeyProblem { key: key.clone(), message: "unknown key".into() });
            } else if let Err(message) = cfg.set(key, value) {
                problems.push(KeyProblem { key: key.clone(), message });
            }
        }
        for (key, value) in overrides.entries() {
            // A flag fixes the key, so any complaint about the file's value is moot.
            problems.retain(|p| p.key != key);
            if let Err(message) = cfg.set(key, &value) {
                problems.push(KeyProblem { key: format!("--{}", key.replace('_', "-")), message });
            }
        }
        if problems.is_empty() {
            problems.extend(cfg.check());
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<(), String> {
        match key {
            "backend" => self.backend = string(v)?,
            "classes" => self.classes = strings(v)?,
            "class" => self.class = Some(string(v)?),
            "prompt_template" => self.prompt_template = Some(string(v)?),
            "mode" => self.mode = parse_mode(&string(v)?)?,
            "target_label" => self.target_label = Some(count(v)?),
            "lambda" => self.lambda = real(v)?,
            "metric" => self.metric = string(v)?.parse().map_err(inner)?,
            "msp_threshold" => self.msp_threshold = real(v)?,
            "lr" => self.lr = real(v)?,
            "steps" => self.steps = count(v)?,
            "variable" => self.variable = string(v)?.parse().map_err(inner)?,
            "guidance_scale" => self.guidance_scale = real(v)?,
            "sampling_steps" => self.sampling_steps = Some(count(v)?),
            "stop_at_first_adversarial" => self.stop_at_first_adversarial = boolean(v)?,
            "seed" => self.seed = seed(v)?,
            "prefilter" => self.prefilter = boolean(v)?,
            "prefilter_samples" => self.prefilter_samples = count(v)?,
            "accuracy_threshold" => self.accuracy_threshold = real(v)?,
            "latents_per_class" => self.latents_per_class = count(v)?,
            "oracle" => {
                self.oracle = match string(v)?.replace('-', "_").as_str() {
                    "human" => OracleChoice::Human,
                    "accept_all" => OracleChoice::AcceptAll,
                    o => return Err(format!("unknown oracle `{o}` (expected human or accept_all)")),
                }
            }
            "magnitudes" => self.magnitudes = reals(v)?,
            "workers" => self.workers = Some(count(v)?),
            "out" => self.out = PathBuf::from(string(v)?),
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Range checks that need the whole configuration.
    fn check(&self) -> Vec<KeyProblem> {
        let mut p = Vec::new();
        let mut bad = |key: &str, ok: bool, message: &str| {
            if !ok {
                p.push(KeyProblem { key: key.into(), message: message.into() });
            }
        };
        bad("lr", self.lr > 0.0 && self.lr.is_finite(), "must be a positive number");
        bad("lambda", self.lambda >= 0.0 && self.lambda.is_finite(), "must be >= 0");
        bad("guidance_scale", self.guidance_scale.is_finite(), "must be finite");
        bad("sampling_steps", self.sampling_steps != Some(0), "must be >= 1");
        bad("msp_threshold", (0.0..=1.0).contains(&self.msp_threshold), "must be in [0, 1]");
        bad(
            "accuracy_threshold",
            self.accuracy_threshold > 0.0 && self.accuracy_threshold <= 1.0,
            "must be in (0, 1]",
        );
        bad("prefilter_samples", self.prefilter_samples >= 1, "must be >= 1");
        bad("latents_per_class", self.latents_per_class >= 1, "must be >= 1");
        bad("workers", self.workers != Some(0), "must be >= 1");
        bad("magnitudes", self.magnitudes.iter().all(|m| *m >= 0.0 && m.is_finite()), "must be finite and >= 0");
        bad("magnitudes", self.magnitudes.windows(2).all(|w| w[0] <= w[1]), "must be non-decreasing");
        let needs_label = matches!(self.mode, AttackMode::Targeted | AttackMode::OodToId);
        bad("target_label", !needs_label || self.target_label.is_some(), "required by this mode");
        if let Some(t) = &self.prompt_template {
            bad("prompt_template", t.contains("{class}"), "must contain {class}");
        }
        p
    }

    pub fn optimization(&self) -> OptimizationConfig {
        OptimizationConfig {
            learning_rate: self.lr,
            steps: self.steps,
            variable_choice: self.variable,
            guidance_scale: self.guidance_scale,
            sampling_steps: self.sampling_steps.unwrap_or_else(|| default_sampling_steps(&self.backend)),
            seed: self.seed,
            stop_at_first_adversarial: self.stop_at_first_adversarial,
        }
    }

    pub fn prompt_template(&self) -> String {
        self.prompt_template.clone().unwrap_or_else(|| default_prompt_template(&self.backend).into())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Internal(e.to_string()))
    }
}

/// The toy generator was trained for a 5-step sampler; everything else gets the standard 20.
pub fn default_sampling_steps(backend: &str) -> usize {
    match backend {
        "toy" => TOY_SAMPLING_STEPS,
        _ => DEFAULT_SAMPLING_STEPS,
    }
}

pub fn default_prompt_template(backend: &str) -> &'static str {
    match backend {
        "toy" => "a high-quality image of a {class}",
        "analytic" => "a photo of {class}",
        _ => "a photo of a {class}",
    }
}

fn parse_mode(s: &str) -> Result<AttackMode, String> {
    match s.replace('-', "_").as_str() {
        "untargeted" => Ok(AttackMode::Untargeted),
        "targeted" => Ok(AttackMode::Targeted),
        "ood_to_id" => Ok(AttackMode::OodToId),
        "id_to_ood" => Ok(AttackMode::IdToOod),
        _ => Err(format!("unknown mode `{s}` (expected untargeted, targeted, ood_to_id or id_to_ood)")),
    }
}

fn inner(e: NaeError) -> String {
    match e {
        NaeError::InvalidConfig(m) => m,
        other => other.to_string(),
    }
}

fn string(v: &Value) -> Result<String, String> {
    v.as_str().map(str::to_string).ok_or_else(|| format!("expected a string, got {}", v.type_str()))
}

fn strings(v: &Value) -> Result<Vec<String>, String> {
    let arr = v.as_array().ok_or_else(|| format!("expected an array of strings, got {}", v.type_str()))?;
    arr.iter().map(string).collect()
}

fn real(v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {}", other.type_str())),
    }
}

fn reals(v: &Value) -> Result<Vec<f64>, String> {
    let arr = v.as_array().ok_or_else(|| format!("expected an array of numbers, got {}", v.type_str()))?;
    arr.iter().map(real).collect()
}

fn count(v: &Value) -> Result<usize, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        Value::Integer(i) => Err(format!("expected a non-negative integer, got {i}")),
        other => Err(format!("expected an integer, got {}", other.type_str())),
    }
}

fn seed(v: &Value) -> Result<u64, String> {
    match v {
        Value::String(s) => s.parse().map_err(|_| format!("`{s}` is not a 64-bit unsigned seed")),
        other => count(other).map(|n| n as u64),
    }
}

fn seed_to_toml<S: serde::Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
    match i64::try_from(*seed) {
        Ok(n) => s.serialize_i64(n),
        Err(_) => s.serialize_str(&seed.to_string()),
    }
}

fn boolean(v: &Value) -> Result<bool, String> {
    v.as_bool().ok_or_else(|| format!("expected true or false, got {}", v.type_str()))
}
