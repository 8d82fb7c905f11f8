//! Parameter checkpoints.
//!
//! Tensors are flattened row-major and split into equal-width records of an
//! [`EmbeddingStore`], with ids `<tensor name>#<chunk>`. The architecture is
//! recorded in a one-line sidecar `<checkpoint>.manifest` of `key=value`
//! pairs. Values are stored as `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{FuserKind, FuserModel, FusionError, MlpConfig, MlpParams, TransformerConfig, TransformerParams};
use crate::autodiff::{ParamSet, Tensor};
use crate::store::{EmbeddingStore, StoreError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("checkpoint manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("checkpoint is missing tensor chunk {0}")]
    MissingChunk(String),
    #[error("fuser {0} has no parameters to checkpoint")]
    NotTrainable(FuserKind),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A loaded checkpoint: the model and the logit scale it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FuserModel,
    pub scale: f64,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn params_to_store(params: &ParamSet) -> Result<EmbeddingStore, StoreError> {
    let width = params
        .tensors()
        .iter()
        .fold(0, |g, t| gcd(g, t.data().len()));
    let mut store = EmbeddingStore::new(width)?;
    for (name, tensor) in params.iter() {
        for (i, chunk) in tensor.data().chunks(width).enumerate() {
            let values: Vec<f32> = chunk.iter().map(|&x| x as f32).collect();
            store.insert(format!("{name}#{i}"), &values)?;
        }
    }
    Ok(store)
}

fn tensor_from_store(
    store: &EmbeddingStore,
    name: &str,
    shape: (usize, usize),
) -> Result<Tensor, CheckpointError> {
    let n = shape.0 * shape.1;
    let width = store.dim();
    let mut data = Vec::with_capacity(n);
    for i in 0..n.div_ceil(width) {
        let id = format!("{name}#{i}");
        let chunk = store.get(&id).ok_or(CheckpointError::MissingChunk(id))?;
        data.extend(chunk.iter().map(|&x| x as f64));
    }
    if data.len() != n {
        return Err(CheckpointError::MissingChunk(format!("{name}: {} of {n} values", data.len())));
    }
    Ok(Tensor::from_vec(shape.0, shape.1, data))
}

fn manifest_line(model: &FuserModel, scale: f64) -> Result<String, CheckpointError> {
    match model {
        FuserModel::Mlp(p) => {
            let c = p.config();
            Ok(format!("kind=mlp dim={} hidden={} scale={scale}", c.dim, c.hidden))
        }
        FuserModel::Transformer(p) => {
            let c = p.config();
            Ok(format!(
                "kind=transformer dim={} heads={} layers={} ff={} dropout={} scale={scale}",
                c.dim, c.heads, c.layers, c.ff_dim, c.dropout
            ))
        }
        other => Err(CheckpointError::NotTrainable(other.kind())),
    }
}

/// Writes the parameters of a trainable model and its manifest.
pub fn save(path: &Path, model: &FuserModel, scale: f64) -> Result<(), CheckpointError> {
    let line = manifest_line(model, scale)?;
    let params = match model {
        FuserModel::Mlp(p) => super::TrainableFuser::params(p),
        FuserModel::Transformer(p) => super::TrainableFuser::params(p),
        other => return Err(CheckpointError::NotTrainable(other.kind())),
    };
    params_to_store(params)?.save(path)?;
    fs::write(manifest_path(path), format!("{line}\n"))?;
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<BTreeMap<String, String>, CheckpointError> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath)?;
    let bad = |message: String| CheckpointError::Manifest {
        path: mpath.clone(),
        message,
    };
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| bad("empty manifest".into()))?;
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))
        })
        .collect()
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let fields = parse_manifest(path)?;
    let mpath = manifest_path(path);
    let get = |key: &str| -> Result<&str, CheckpointError> {
        fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Manifest {
                path: mpath.clone(),
                message: format!("missing {key}"),
            })
    };
    let num = |key: &str| -> Result<usize, CheckpointError> {
        get(key)?.parse().map_err(|_| CheckpointError::Manifest {
            path: mpath.clone(),
            message: format!("invalid {key}"),
        })
    };
    let scale: f64 = get("scale")?.parse().map_err(|_| CheckpointError::Manifest {
        path: mpath.clone(),
        message: "invalid scale".into(),
    })?;
    let kind: FuserKind = get("kind")?.parse()?;
    let store = EmbeddingStore::load(path)?;
    let collect = |expected: Vec<(String, (usize, usize))>| -> Result<ParamSet, CheckpointError> {
        let mut params = ParamSet::new();
        for (name, shape) in expected {
            let t = tensor_from_store(&store, &name, shape)?;
            params.push(name, t);
        }
        Ok(params)
    };
    let model = match kind {
        FuserKind::Mlp => {
            let config = MlpConfig {
                dim: num("dim")?,
                hidden: num("hidden")?,
            };
            FuserModel::Mlp(MlpParams::from_params(config, collect(config.expected())?)?)
        }
        FuserKind::Transformer => {
            let dropout: f64 = get("dropout")?.parse().map_err(|_| CheckpointError::Manifest {
                path: mpath.clone(),
                message: "invalid dropout".into(),
            })?;
            let config = TransformerConfig {
                dim: num("dim")?,
                heads: num("heads")?,
                layers: num("layers")?,
                ff_dim: num("ff")?,
                dropout,
            };
            config.validate()?;
            FuserModel::Transformer(TransformerParams::from_params(
                config,
                collect(config.expected())?,
            )?)
        }
        other => return Err(CheckpointError::NotTrainable(other)),
    };
    Ok(Checkpoint { model, scale })
}
