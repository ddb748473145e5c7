//! Run configuration: layered merge of flags, environment and a JSON file.
//!
//! Precedence is flags > env > file > defaults, field by field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ChatParams, Policy};
use crate::collage::Grid;
use crate::dataset::Split;
use crate::pipeline::{PipelineKind, UnparseablePolicy};
use crate::questions::QuestionSet;

pub const ENV_BACKEND_URL: &str = "GULLY_BACKEND_URL";
pub const ENV_CACHE_DIR: &str = "GULLY_CACHE_DIR";

pub const DEFAULT_URL: &str = "http://localhost:11434/api/chat";
pub const DEFAULT_VLM: &str = "llama3.2-vision";
pub const DEFAULT_LLM: &str = "llama3.2";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("cannot read config file {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {} is not valid JSON", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        field: field.into(),
        reason: reason.into(),
    }
}

/// A partial configuration. Every layer (flags, env, file) has this shape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigLayer {
    pub pipeline: Option<String>,
    pub split: Option<String>,
    pub questions: Option<String>,
    pub vlm_model: Option<String>,
    pub vlm_url: Option<String>,
    pub llm_model: Option<String>,
    pub llm_url: Option<String>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
    pub cache_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub retries: Option<u32>,
    pub timeout_s: Option<f64>,
    pub unparseable: Option<String>,
    pub grid: Option<String>,
    pub separator: Option<u32>,
    pub images_per_location: Option<usize>,
    pub output: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl ConfigLayer {
    /// Fields set in `top` win over fields in `self`.
    pub fn overlay(&self, top: &ConfigLayer) -> ConfigLayer {
        let mut out = self.clone();
        overlay!(out, top; pipeline, split, questions, vlm_model, vlm_url, llm_model, llm_url,
            temperature, seed, max_tokens, cache_dir, jobs, retries, timeout_s, unparseable,
            grid, separator, images_per_location, output);
        out
    }

    /// The environment layer: only the backend URL and cache dir are read.
    pub fn from_env_map(env: &BTreeMap<String, String>) -> ConfigLayer {
        let get = |k: &str| env.get(k).filter(|v| !v.is_empty()).cloned();
        ConfigLayer {
            vlm_url: get(ENV_BACKEND_URL),
            llm_url: get(ENV_BACKEND_URL),
            cache_dir: get(ENV_CACHE_DIR).map(PathBuf::from),
            ..Default::default()
        }
    }

    pub fn from_process_env() -> ConfigLayer {
        let env = [ENV_BACKEND_URL, ENV_CACHE_DIR]
            .iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
            .collect();
        Self::from_env_map(&env)
    }

    pub fn from_file(path: &Path) -> Result<ConfigLayer, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub model: String,
    pub url: String,
}

impl Endpoint {
    pub fn is_mock(&self) -> bool {
        self.url.starts_with("mock:")
    }
}

/// Fully resolved configuration, embedded in every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pipeline: PipelineKind,
    pub split: Split,
    pub questions: QuestionSet,
    pub vlm: Endpoint,
    pub llm: Endpoint,
    pub params: ChatParams,
    pub cache_dir: Option<PathBuf>,
    pub jobs: usize,
    pub retries: u32,
    pub timeout_s: f64,
    pub unparseable: UnparseablePolicy,
    pub grid: Grid,
    pub separator: u32,
    pub images_per_location: usize,
    pub output: Option<PathBuf>,
    pub config_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        resolve(&ConfigLayer::default(), &ConfigLayer::default(), None).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn policy(&self) -> Policy {
        Policy {
            timeout_s: self.timeout_s,
            retries: self.retries,
            max_in_flight: self.jobs,
            ..Policy::default()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("RunConfig serializes")
    }
}

/// Checks `url` parses and uses a supported scheme.
pub fn validate_url(field: &str, raw: &str) -> Result<String, ConfigError> {
    let parsed = url::Url::parse(raw).map_err(|e| invalid(field, format!("`{raw}`: {e}")))?;
    match parsed.scheme() {
        "http" | "https" | "mock" => Ok(raw.to_string()),
        other => Err(invalid(field, format!("unsupported scheme `{other}`"))),
    }
}

/// Splits `model@url`; a bare value is a model name.
pub fn parse_model_arg(arg: &str) -> (String, Option<String>) {
    match arg.split_once('@') {
        Some((m, u)) => (m.to_string(), Some(u.to_string())),
        None => (arg.to_string(), None),
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, raw: Option<&String>, default: T) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match raw {
        None => Ok(default),
        Some(s) => s.parse().map_err(|e: T::Err| invalid(field, e.to_string())),
    }
}

/// Merge the three layers over the defaults.
pub fn resolve(
    flags: &ConfigLayer,
    env: &ConfigLayer,
    file: Option<(&Path, &ConfigLayer)>,
) -> Result<RunConfig, ConfigError> {
    let base = file.map(|(_, l)| l.clone()).unwrap_or_default();
    let m = base.overlay(env).overlay(flags);

    let pipeline = parse_field("pipeline", m.pipeline.as_ref(), PipelineKind::A)?;
    let split = parse_field("split", m.split.as_ref(), Split::Test)?;
    let unparseable = parse_field("unparseable", m.unparseable.as_ref(), UnparseablePolicy::Negative)?;
    let grid = parse_field("grid", m.grid.as_ref(), Grid::default())?;
    let questions = QuestionSet::resolve(m.questions.as_deref().unwrap_or("q15"))
        .map_err(|e| invalid("questions", e.to_string()))?;

    let endpoint = |field: &str, model: &Option<String>, url: &Option<String>, dm: &str| {
        let (name, inline) = parse_model_arg(model.as_deref().unwrap_or(dm));
        if name.trim().is_empty() {
            return Err(invalid(field, "empty model name"));
        }
        let raw = inline.or_else(|| url.clone()).unwrap_or_else(|| DEFAULT_URL.to_string());
        Ok(Endpoint {
            model: name,
            url: validate_url(&format!("{field}_url"), &raw)?,
        })
    };
    let vlm = endpoint("vlm", &m.vlm_model, &m.vlm_url, DEFAULT_VLM)?;
    let llm = endpoint("llm", &m.llm_model, &m.llm_url, DEFAULT_LLM)?;

    let defaults = ChatParams::default();
    let params = ChatParams {
        temperature: m.temperature.unwrap_or(defaults.temperature),
        seed: m.seed.unwrap_or(defaults.seed),
        max_tokens: m.max_tokens.unwrap_or(defaults.max_tokens),
    };
    if !params.temperature.is_finite() || params.temperature < 0.0 {
        return Err(invalid("temperature", "must be a finite non-negative number"));
    }
    if params.max_tokens == 0 {
        return Err(invalid("max_tokens", "must be at least 1"));
    }

    let policy = Policy::default();
    let jobs = m.jobs.unwrap_or(policy.max_in_flight);
    if jobs == 0 {
        return Err(invalid("jobs", "must be at least 1"));
    }
    let retries = m.retries.unwrap_or(policy.retries);
    if retries == 0 {
        return Err(invalid("retries", "must be at least 1"));
    }
    let timeout_s = m.timeout_s.unwrap_or(policy.timeout_s);
    if !(timeout_s.is_finite() && timeout_s > 0.0) {
        return Err(invalid("timeout_s", "must be a positive number of seconds"));
    }
    let images_per_location = m.images_per_location.unwrap_or(6);
    if images_per_location == 0 || images_per_location > grid.cells() {
        return Err(invalid(
            "images_per_location",
            format!("must be in 1..={} for grid {grid}", grid.cells()),
        ));
    }

    Ok(RunConfig {
        pipeline,
        split,
        questions,
        vlm,
        llm,
        params,
        cache_dir: m.cache_dir,
        jobs,
        retries,
        timeout_s,
        unparseable,
        grid,
        separator: m.separator.unwrap_or(0),
        images_per_location,
        output: m.output,
        config_file: file.map(|(p, _)| p.to_path_buf()),
    })
}
