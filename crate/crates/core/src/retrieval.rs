//! Exact top-k cosine retrieval over an image-embedding corpus.
//!
//! The corpus is scanned in fixed-size partitions, each keeping a bounded
//! heap of its best hits; partition winners are merged with the same total
//! order (score descending, then insertion order), so the result is exactly
//! that of a full sort.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{self, VectorError};
use crate::store::{EmbeddingStore, StoreError};

pub const DEFAULT_K: usize = 3;
const PARTITION: usize = 4096;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("image corpus is empty")]
    EmptyCorpus,
    #[error("image {0:?} has a zero embedding")]
    ZeroVector(String),
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query has zero norm")]
    ZeroQuery,
    #[error("missing prompt embeddings for samples: {}", .0.join(", "))]
    MissingPrompts(Vec<String>),
    #[error("retrieval cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalized image embeddings in corpus insertion order.
#[derive(Debug, Clone)]
pub struct ImageIndex {
    store: EmbeddingStore,
    corpus_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Hits in descending score order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    position: usize,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    /// Greater means better: higher score, then earlier position.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.position.cmp(&self.position))
    }
}

/// Score used for ranking: `f64` dot product of the unit query with a
/// stored unit vector.
pub fn unit_score(query: &[f32], row: &[f32]) -> f64 {
    query
        .iter()
        .zip(row)
        .map(|(&q, &x)| q as f64 * x as f64)
        .sum()
}

impl ImageIndex {
    /// Normalizes every vector of `store`; rejects empty corpora and zero
    /// vectors.
    pub fn build(store: EmbeddingStore) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let corpus_hash = store.content_hash();
        let store = store.normalized().map_err(|e| match e {
            StoreError::ZeroVector(id) => RetrievalError::ZeroVector(id),
            other => other.into(),
        })?;
        Ok(Self { store, corpus_hash })
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    /// SHA-256 of the corpus as loaded (before normalization).
    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.store.get(id)
    }

    fn unit_query(&self, query: &[f32]) -> Result<Vec<f32>, RetrievalError> {
        if query.len() != self.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        embedding::l2_normalize(query).map_err(|e| match e {
            VectorError::ZeroNorm => RetrievalError::ZeroQuery,
            _ => RetrievalError::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            },
        })
    }

    /// The `k` highest-cosine images (all of them if `k` exceeds the corpus).
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<RetrievalResult, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let q = self.unit_query(query)?;
        let k = k.min(self.len());
        let partitions: Vec<Vec<Scored>> = (0..self.len())
            .step_by(PARTITION)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let end = (start + PARTITION).min(self.len());
                let mut heap: BinaryHeap<Reverse<Scored>> = BinaryHeap::with_capacity(k + 1);
                for position in start..end {
                    let s = Scored {
                        score: unit_score(&q, self.store.row(position)),
                        position,
                    };
                    if heap.len() < k {
                        heap.push(Reverse(s));
                    } else if let Some(Reverse(worst)) = heap.peek() {
                        if s > *worst {
                            heap.pop();
                            heap.push(Reverse(s));
                        }
                    }
                }
                heap.into_iter().map(|Reverse(s)| s).collect()
            })
            .collect();
        let mut merged: Vec<Scored> = partitions.into_iter().flatten().collect();
        merged.sort_unstable_by(|a, b| b.cmp(a));
        merged.truncate(k);
        Ok(RetrievalResult {
            hits: merged
                .into_iter()
                .map(|s| Hit {
                    id: self.store.ids()[s.position].clone(),
                    score: s.score,
                })
                .collect(),
        })
    }
}

/// One batch retrieval request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptQuery {
    pub sample_id: String,
    /// Key of the prompt embedding in the prompt store.
    pub prompt_id: String,
}

/// On-disk retrieval cache.
///
/// For each `(corpus hash, k)` pair there is a store file holding the
/// embeddings of every retrieved image and a sidecar manifest with one line
/// per prompt: `prompt_id <TAB> query fingerprint <TAB> (image_id <TAB> score)*`.
#[derive(Debug, Clone)]
pub struct RetrievalCache {
    dir: PathBuf,
}

#[derive(Debug, Clone)]
struct CachedEntry {
    fingerprint: String,
    result: RetrievalResult,
}

impl RetrievalCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn store_path(&self, corpus_hash: &str, k: usize) -> PathBuf {
        self.dir
            .join(format!("retrieval-{}-k{k}.vwse", &corpus_hash[..16.min(corpus_hash.len())]))
    }

    pub fn manifest_path(&self, corpus_hash: &str, k: usize) -> PathBuf {
        let mut p = self.store_path(corpus_hash, k).into_os_string();
        p.push(".manifest");
        p.into()
    }

    fn load_manifest(&self, path: &Path) -> Result<HashMap<String, CachedEntry>, RetrievalError> {
        let mut out = HashMap::new();
        if !path.exists() {
            return Ok(out);
        }
        let bad = |message: String| RetrievalError::Cache {
            path: path.to_path_buf(),
            message,
        };
        for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() % 2 != 0 {
                return Err(bad(format!("line {}: wrong field count", n + 1)));
            }
            let hits = fields[2..]
                .chunks(2)
                .map(|pair| {
                    let score = pair[1]
                        .parse::<f64>()
                        .map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
                    Ok(Hit {
                        id: pair[0].to_string(),
                        score,
                    })
                })
                .collect::<Result<Vec<_>, RetrievalError>>()?;
            out.insert(
                fields[0].to_string(),
                CachedEntry {
                    fingerprint: fields[1].to_string(),
                    result: RetrievalResult { hits },
                },
            );
        }
        Ok(out)
    }

    /// Embeddings of every image referenced by the cache for `(corpus, k)`.
    pub fn load_images(&self, corpus_hash: &str, k: usize) -> Result<Option<EmbeddingStore>, RetrievalError> {
        let path = self.store_path(corpus_hash, k);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(EmbeddingStore::load(path)?))
    }
}

fn fingerprint(query: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in query {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn check_field(value: &str) -> Result<(), RetrievalError> {
    if value.contains(['\t', '\n', '\r']) {
        return Err(RetrievalError::Cache {
            path: PathBuf::new(),
            message: format!("id {value:?} contains a tab or newline"),
        });
    }
    Ok(())
}

/// Runs `top_k` for every query, reusing and extending `cache` when given.
/// Output is keyed by sample id and identical to a sequential run.
pub fn retrieve_for_samples(
    index: &ImageIndex,
    prompts: &EmbeddingStore,
    queries: &[PromptQuery],
    k: usize,
    cache: Option<&RetrievalCache>,
) -> Result<BTreeMap<String, RetrievalResult>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !prompts.contains(&q.prompt_id))
        .map(|q| q.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(RetrievalError::MissingPrompts(missing));
    }

    let manifest_path = cache.map(|c| c.manifest_path(index.corpus_hash(), k));
    let mut cached = match (cache, &manifest_path) {
        (Some(c), Some(p)) => c.load_manifest(p)?,
        _ => HashMap::new(),
    };

    let results: Vec<(String, String, String, RetrievalResult, bool)> = queries
        .par_iter()
        .map(|q| {
            let vector = prompts.get(&q.prompt_id).expect("checked above");
            let fp = fingerprint(vector);
            if let Some(entry) = cached.get(&q.prompt_id) {
                if entry.fingerprint == fp {
                    return Ok((q.sample_id.clone(), q.prompt_id.clone(), fp, entry.result.clone(), false));
                }
            }
            let result = index.top_k(vector, k)?;
            Ok((q.sample_id.clone(), q.prompt_id.clone(), fp, result, true))
        })
        .collect::<Result<_, RetrievalError>>()?;

    let mut out = BTreeMap::new();
    let mut dirty = false;
    for (sample_id, prompt_id, fp, result, fresh) in results {
        if fresh {
            dirty = true;
            cached.insert(
                prompt_id,
                CachedEntry {
                    fingerprint: fp,
                    result: result.clone(),
                },
            );
        }
        out.insert(sample_id, result);
    }

    if let (Some(cache), Some(manifest_path), true) = (cache, manifest_path, dirty) {
        write_cache(cache, index, k, &manifest_path, &cached)?;
    }
    Ok(out)
}

fn write_cache(
    cache: &RetrievalCache,
    index: &ImageIndex,
    k: usize,
    manifest_path: &Path,
    entries: &HashMap<String, CachedEntry>,
) -> Result<(), RetrievalError> {
    fs::create_dir_all(&cache.dir)?;
    let mut prompt_ids: Vec<&String> = entries.keys().collect();
    prompt_ids.sort();

    let mut images = EmbeddingStore::new(index.dim())?;
    let mut manifest = String::new();
    for pid in prompt_ids {
        check_field(pid)?;
        let entry = &entries[pid];
        manifest.push_str(pid);
        manifest.push('\t');
        manifest.push_str(&entry.fingerprint);
        for hit in &entry.result.hits {
            check_field(&hit.id)?;
            manifest.push_str(&format!("\t{}\t{:?}", hit.id, hit.score));
            if !images.contains(&hit.id) {
                if let Some(v) = index.get(&hit.id) {
                    images.insert(hit.id.clone(), v)?;
                }
            }
        }
        manifest.push('\n');
    }
    images.save(cache.store_path(index.corpus_hash(), k))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&cache.dir)?;
    tmp.write_all(manifest.as_bytes())?;
    tmp.persist(manifest_path).map_err(|e| RetrievalError::Io(e.error))?;
    Ok(())
}
