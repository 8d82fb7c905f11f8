//! Line-oriented `key = value` configuration. Relative paths resolve
//! against the directory holding the configuration file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::embedding::DEFAULT_SCALE;
use crate::fusion::FuserKind;
use crate::retrieval::DEFAULT_K;
use crate::train::TrainConfig;

pub const DEFAULT_HOLDOUT: usize = 869;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: line {line}: {message}")]
    Syntax {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("configuration key {key}: {message}")]
    Value { key: String, message: String },
    #[error("configuration is missing required key {0}")]
    Missing(&'static str),
    #[error("{key}: file {path} does not exist")]
    MissingFile { key: &'static str, path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub inventory: Option<PathBuf>,
    /// Context embeddings for gloss matching, keyed by sample id or text hash.
    pub contexts: Option<PathBuf>,
    /// Gloss embeddings keyed by synset id or text hash.
    pub glosses: Option<PathBuf>,
    /// Prompt embeddings keyed by sample id or text hash.
    pub prompts: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub provider: Option<String>,
    pub provider_id: Option<String>,
    pub cache_dir: Option<PathBuf>,
    /// Expected embedding width; checked against every store.
    pub dim: Option<usize>,
    pub fuser: FuserKind,
    pub scale: f64,
    pub k: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub holdout: usize,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub dropout: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: None,
            gold: None,
            inventory: None,
            contexts: None,
            glosses: None,
            prompts: None,
            candidates: None,
            corpus: None,
            provider: None,
            provider_id: None,
            cache_dir: None,
            dim: None,
            fuser: FuserKind::Average,
            scale: DEFAULT_SCALE,
            k: DEFAULT_K,
            seed: 0,
            checkpoint: None,
            history: None,
            holdout: DEFAULT_HOLDOUT,
            epochs: None,
            learning_rate: None,
            batch_size: None,
            dropout: 0.0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        message: format!("{value:?}: {e}"),
    })
}

impl PipelineConfig {
    /// Parses configuration text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    path: origin.to_path_buf(),
                    line: n + 1,
                    message: format!("expected key = value, got {line:?}"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let path = || Some(base.join(value));
            match key {
                "data" => cfg.data = path(),
                "gold" => cfg.gold = path(),
                "inventory" => cfg.inventory = path(),
                "contexts" => cfg.contexts = path(),
                "glosses" => cfg.glosses = path(),
                "prompts" => cfg.prompts = path(),
                "candidates" => cfg.candidates = path(),
                "corpus" => cfg.corpus = path(),
                "cache_dir" => cfg.cache_dir = path(),
                "checkpoint" => cfg.checkpoint = path(),
                "history" => cfg.history = path(),
                "provider" => cfg.provider = Some(value.to_string()),
                "provider_id" => cfg.provider_id = Some(value.to_string()),
                "dim" => cfg.dim = Some(parse_value(key, value)?),
                "fuser" => cfg.fuser = parse_value(key, value)?,
                "scale" => cfg.scale = parse_value(key, value)?,
                "k" => cfg.k = parse_value(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "holdout" => cfg.holdout = parse_value(key, value)?,
                "epochs" => cfg.epochs = Some(parse_value(key, value)?),
                "learning_rate" => cfg.learning_rate = Some(parse_value(key, value)?),
                "batch_size" => cfg.batch_size = Some(parse_value(key, value)?),
                "dropout" => cfg.dropout = parse_value(key, value)?,
                other => {
                    return Err(ConfigError::Syntax {
                        path: origin.to_path_buf(),
                        line: n + 1,
                        message: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Checks value ranges and that every configured input file exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::Value {
                key: "k".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(ConfigError::Value {
                key: "scale".into(),
                message: format!("must be positive, got {}", self.scale),
            });
        }
        let inputs = [
            ("data", &self.data),
            ("gold", &self.gold),
            ("inventory", &self.inventory),
            ("contexts", &self.contexts),
            ("glosses", &self.glosses),
            ("prompts", &self.prompts),
            ("candidates", &self.candidates),
            ("corpus", &self.corpus),
        ];
        for (key, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::MissingFile {
                        key,
                        path: p.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn require<'a>(&self, key: &'static str, value: &'a Option<PathBuf>) -> Result<&'a Path, ConfigError> {
        value.as_deref().ok_or(ConfigError::Missing(key))
    }

    /// Training settings: defaults for the fuser kind, overridden by any
    /// values given in the file.
    pub fn train_config(&self) -> Result<TrainConfig, crate::train::TrainError> {
        let mut t = TrainConfig::for_kind(self.fuser)?;
        t.seed = self.seed;
        t.scale = self.scale;
        t.dropout = self.dropout;
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            t.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        t.validate()?;
        Ok(t)
    }
}
