//! Layered run configuration: typed defaults, a flat dotted-key JSON file,
//! then command-line overrides, merged in that order. The merged flat view
//! is what gets snapshotted into the run directory and digested.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use blockrank_core::corpus::{SyntheticTaskConfig, TemplateConfig};
use blockrank_core::evaluation::{BenchmarkSpec, EvalOptions};
use blockrank_core::model::{AttentionMode, ModelConfig};
use blockrank_core::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub template: TemplateConfig,
    pub task: SyntheticTaskConfig,
    pub eval: EvalOptions,
    pub bench: BenchmarkSpec,
    /// Examples produced by `gen-data`.
    pub n_examples: usize,
    /// Accepted for compatibility with run scripts: execution is
    /// deterministic by construction (fixed reduction orders everywhere),
    /// so the flag changes nothing.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: desk_model(),
            train: TrainConfig::default(),
            template: TemplateConfig::default(),
            task: SyntheticTaskConfig::default(),
            eval: EvalOptions::default(),
            bench: BenchmarkSpec::default(),
            n_examples: 1000,
            deterministic: true,
        }
    }
}

/// Desk-scale model: 2 blocks of 2 heads at d=64. `vocab_size = 0` means
/// "resolve from the dataset vocabulary".
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 64,
        head_dim: 32,
        vocab_size: 0,
        mlp_hidden: 128,
        rotary_base: 10_000.0,
        max_position: 16_384,
        attention_mode: AttentionMode::Blockwise,
    }
}

/// The reference hyperparameters at full scale, kept as a named profile for
/// documentation and comparison runs: lambda 0.1, tau 0.05, the auxiliary
/// layer at 20 of 32, 160-token chunks (384 for long passages), query offset
/// 8192, peak learning rate 3e-7, batch 32, candidate lists of 30.
pub fn paper_scale() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.n_layers = 32;
    cfg.model.n_heads = 32;
    cfg.model.d_model = 4096;
    cfg.model.head_dim = 128;
    cfg.model.mlp_hidden = 14336;
    cfg.train.l_star = 20;
    cfg.train.lambda = 0.1;
    cfg.train.tau = 0.05;
    cfg.train.l_chunk = 160;
    cfg.train.query_offset = 8192;
    cfg.train.lr_peak = 3e-7;
    cfg.train.warmup_steps = 50;
    cfg.train.batch_size = 32;
    cfg.train.n_candidates = 30;
    cfg.eval.l_star = 20;
    cfg.eval.l_chunk = 160;
    cfg
}

pub fn profile(name: &str) -> Option<RunConfig> {
    match name {
        "desk" => Some(RunConfig::default()),
        "paper_scale" | "paper-scale" => Some(paper_scale()),
        _ => None,
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Flat dotted-key view of a config.
pub fn flatten(cfg: &RunConfig) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", &serde_json::to_value(cfg).expect("config serializes"), &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = serde_json::Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut map = &mut root;
        for part in &parts[..parts.len() - 1] {
            map = map
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(serde_json::Map::new()))
                .as_object_mut()
                .expect("intermediate object");
        }
        map.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    Value::Object(root)
}

#[derive(Debug)]
pub enum ConfigError {
    /// The dotted key does not exist in the schema (usage error).
    UnknownKey(String),
    /// The key exists but the value does not fit (validation error).
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::UnknownKey(k) => write!(f, "unknown config key {k:?}"),
            ConfigError::Invalid(m) => write!(f, "{m}"),
        }
    }
}

/// Parses an override value: JSON when it parses, bare string otherwise.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Builds the effective config: defaults (or profile), the flat JSON file,
/// then dotted CLI overrides, validated back into the typed form.
pub fn resolve_config(
    base: RunConfig,
    file_flat: Option<&BTreeMap<String, Value>>,
    overrides: &[(String, Value)],
) -> Result<(RunConfig, BTreeMap<String, Value>), ConfigError> {
    let mut flat = flatten(&base);
    if let Some(file) = file_flat {
        for (k, v) in file {
            if !flat.contains_key(k) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
            flat.insert(k.clone(), v.clone());
        }
    }
    for (k, v) in overrides {
        if !flat.contains_key(k) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        flat.insert(k.clone(), v.clone());
    }
    let nested = unflatten(&flat);
    let cfg: RunConfig = serde_json::from_value(nested)
        .map_err(|e| ConfigError::Invalid(format!("config validation failed: {e}")))?;
    Ok((cfg, flat))
}

/// Parses a flat dotted-key config file body.
pub fn parse_flat_config_file(bytes: &[u8]) -> Result<BTreeMap<String, Value>, ConfigError> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| ConfigError::Invalid(format!("config file is not valid JSON: {e}")))?;
    let map = value
        .as_object()
        .ok_or_else(|| ConfigError::Invalid("config file must hold a JSON object".into()))?;
    let mut out = BTreeMap::new();
    for (k, v) in map {
        // Accept nested objects too by flattening them.
        flatten_into(k, v, &mut out);
    }
    Ok(out)
}

/// Full pipeline used by fuzzing: bytes -> flat file -> typed config.
pub fn run_config_from_bytes(bytes: &[u8]) -> Result<RunConfig, ConfigError> {
    let flat = parse_flat_config_file(bytes)?;
    resolve_config(RunConfig::default(), Some(&flat), &[]).map(|(cfg, _)| cfg)
}

/// Canonical snapshot body (sorted flat keys) and its digest.
pub fn snapshot(flat: &BTreeMap<String, Value>) -> (String, String) {
    let body = serde_json::to_string_pretty(flat).expect("flat map serializes");
    let mut hasher = Sha256::new();
    hasher.update(body.as_bytes());
    let digest: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    (body, digest)
}
