//! Client for an external text-embedding service.
//!
//! Protocol: `POST <endpoint>/embed` with `{"texts": [...]}`; a 200 response
//! carries `{"dim": D, "embeddings": [[...], ...]}` in request order.
//! Results are cached in a store file keyed by the SHA-256 of each text.

use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::store::{EmbeddingStore, StoreError};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("embedding provider request failed after {attempts} attempts: {message}")]
    Http { attempts: u32, message: String },
    #[error("embedding provider protocol error: {0}")]
    Protocol(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Store id of a text: hex SHA-256 of its UTF-8 bytes.
pub fn content_id(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    url: String,
    pub expected_dim: Option<usize>,
    pub cache_path: Option<PathBuf>,
    /// Retries after the first failed attempt.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
    pub timeout: Duration,
    /// Texts per request.
    pub batch_size: usize,
}

impl EmbeddingProvider {
    pub fn new(endpoint: &str) -> Self {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/embed") {
            base.to_string()
        } else {
            format!("{base}/embed")
        };
        Self {
            url,
            expected_dim: None,
            cache_path: None,
            retries: 3,
            backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(60),
            batch_size: 256,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn request(&self, agent: &ureq::Agent, texts: &[&str]) -> Result<EmbedResponse, ProviderError> {
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                log::warn!("provider attempt {attempt} failed ({last}); retrying in {delay:?}");
                thread::sleep(delay);
                delay *= 2;
            }
            let mut resp = match agent.post(&self.url).send_json(&EmbedRequest { texts }) {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            if resp.status().as_u16() != 200 {
                last = format!("HTTP status {}", resp.status().as_u16());
                continue;
            }
            return resp
                .body_mut()
                .read_json::<EmbedResponse>()
                .map_err(|e| ProviderError::Protocol(format!("invalid response body: {e}")));
        }
        Err(ProviderError::Http {
            attempts: self.retries + 1,
            message: last,
        })
    }

    /// One vector per distinct text, id = [`content_id`], in first-seen
    /// order. Texts already in the cache are not sent.
    pub fn fetch_embeddings<S: AsRef<str>>(&self, texts: &[S]) -> Result<EmbeddingStore, ProviderError> {
        let mut cache = match &self.cache_path {
            Some(p) if p.exists() => Some(EmbeddingStore::load(p)?),
            _ => None,
        };
        if let (Some(c), Some(d)) = (&cache, self.expected_dim) {
            if c.dim() != d {
                return Err(ProviderError::DimensionMismatch {
                    expected: d,
                    got: c.dim(),
                });
            }
        }

        let mut wanted: Vec<(String, &str)> = Vec::new();
        for t in texts {
            let id = content_id(t.as_ref());
            if !wanted.iter().any(|(w, _)| *w == id) {
                wanted.push((id, t.as_ref()));
            }
        }
        let missing: Vec<&(String, &str)> = wanted
            .iter()
            .filter(|(id, _)| !cache.as_ref().is_some_and(|c| c.contains(id)))
            .collect();

        if !missing.is_empty() {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(self.timeout))
                .http_status_as_error(false)
                .build()
                .into();
            for chunk in missing.chunks(self.batch_size.max(1)) {
                let batch: Vec<&str> = chunk.iter().map(|(_, t)| *t).collect();
                let resp = self.request(&agent, &batch)?;
                if resp.embeddings.len() != batch.len() {
                    return Err(ProviderError::Protocol(format!(
                        "asked for {} embeddings, received {}",
                        batch.len(),
                        resp.embeddings.len()
                    )));
                }
                let expected = self
                    .expected_dim
                    .or(cache.as_ref().map(EmbeddingStore::dim))
                    .unwrap_or(resp.dim);
                if resp.dim != expected {
                    return Err(ProviderError::DimensionMismatch {
                        expected,
                        got: resp.dim,
                    });
                }
                let store = cache.get_or_insert(EmbeddingStore::new(expected)?);
                for ((id, _), v) in chunk.iter().zip(&resp.embeddings) {
                    if v.len() != expected {
                        return Err(ProviderError::DimensionMismatch {
                            expected,
                            got: v.len(),
                        });
                    }
                    store.insert(id.clone(), v)?;
                }
            }
            if let (Some(path), Some(c)) = (&self.cache_path, &cache) {
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(StoreError::Io)?;
                }
                c.save(path)?;
            }
        }

        let dim = cache
            .as_ref()
            .map(EmbeddingStore::dim)
            .or(self.expected_dim)
            .unwrap_or(crate::embedding::DEFAULT_DIM);
        let mut out = EmbeddingStore::new(dim)?;
        if let Some(c) = &cache {
            for (id, _) in &wanted {
                out.insert(id.clone(), c.get(id).expect("fetched above"))?;
            }
        }
        Ok(out)
    }
}
