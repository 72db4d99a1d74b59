//! Run configuration: one JSON file with model / train / data sections,
//! dotted-path `--set` overrides applied on the raw JSON, and an
//! effective-config snapshot that reproduces the run when re-fed.

use std::fs;
use std::path::{Path, PathBuf};

use milo::corpus::{generate_zipf_corpus, load_token_cache};
use milo::model::ModelConfig;
use milo::trainer::TrainConfig;
use milo::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Root seed; when set it overrides the per-section seeds, so one
    /// value pins initialization, data order, and synthetic corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: None,
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_tokens: usize,
    pub vocab_size: usize,
    #[serde(default = "default_exponent")]
    pub zipf_exponent: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_markov_order")]
    pub markov_order: u8,
}

fn default_exponent() -> f64 {
    1.1
}

fn default_markov_order() -> u8 {
    1
}

/// Applies one `dotted.path=value` override onto the raw JSON. Values
/// parse as JSON where possible and fall back to strings, so
/// `loss.kind=mile` and `train.peak_lr=3e-4` both work. A bare `loss.`
/// prefix is an alias for `train.loss.`.
pub fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(format!("--set expects dotted.path=value, got '{spec}'"))
    })?;
    let path = if path == "loss" || path.starts_with("loss.") {
        format!("train.{path}")
    } else {
        path.to_string()
    };
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!(
            "--set path '{path}' has an empty segment"
        )));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("--set path '{path}' descends into a non-object"))
        })?;
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| {
        Error::InvalidConfig(format!("--set path '{path}' descends into a non-object"))
    })?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    obj.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

pub fn load_config(path: &Path, sets: &[String]) -> Result<AppConfig> {
    let text = fs::read_to_string(path)?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))?;
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let mut cfg: AppConfig = serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))?;
    if let Some(seed) = cfg.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        if let Some(s) = &mut cfg.data.synthetic {
            s.seed = seed;
        }
    }
    Ok(cfg)
}

/// Writes the resolved configuration next to the run's outputs.
pub fn write_snapshot(dir: &Path, cfg: &AppConfig) -> Result<PathBuf> {
    let path = dir.join("effective-config.json");
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format {
        what: "config snapshot",
        detail: e.to_string(),
    })?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

/// Loads the token stream: a cache file or a synthetic corpus, exactly
/// one of which must be configured.
pub fn load_tokens(data: &DataConfig) -> Result<Vec<u32>> {
    match (&data.tokens, &data.synthetic) {
        (Some(path), None) => load_token_cache(path),
        (None, Some(s)) => generate_zipf_corpus(
            s.n_tokens,
            s.vocab_size,
            s.zipf_exponent,
            s.seed,
            s.markov_order,
        ),
        (Some(_), Some(_)) => Err(Error::InvalidConfig(
            "data.tokens and data.synthetic are mutually exclusive".into(),
        )),
        (None, None) => Err(Error::InvalidConfig(
            "data requires either tokens or synthetic".into(),
        )),
    }
}
