//! Python bindings for the vwsd engine.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use vwsd_core::disambiguation::{self as dis, GlossMatch};
use vwsd_core::embedding;
use vwsd_core::evaluation;
use vwsd_core::fusion::{self, FuserKind, FusedScore, FusionInput};
use vwsd_core::pipeline::{self, PipelineConfig};
use vwsd_core::retrieval;
use vwsd_core::store::{self, StoreError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn store_err(e: StoreError) -> PyErr {
    match e {
        StoreError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    }
}

/// Fixed-width vectors keyed by string id, in insertion order.
#[pyclass(module = "vwsd", skip_from_py_object)]
#[derive(Clone)]
struct EmbeddingStore {
    inner: store::EmbeddingStore,
}

#[pymethods]
impl EmbeddingStore {
    #[new]
    fn new(dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: store::EmbeddingStore::new(dim).map_err(store_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: store::EmbeddingStore::load(path).map_err(store_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: store::EmbeddingStore::read_from(data).map_err(store_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(store_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn insert(&mut self, id: String, values: Vec<f32>) -> PyResult<()> {
        self.inner.insert(id, &values).map_err(store_err)
    }

    fn get(&self, id: &str) -> Option<Vec<f32>> {
        self.inner.get(id).map(<[f32]>::to_vec)
    }

    fn __getitem__(&self, id: &str) -> PyResult<Vec<f32>> {
        self.get(id).ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, id: &str) -> bool {
        self.inner.contains(id)
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingStore(dim={}, len={})", self.inner.dim(), self.inner.len())
    }
}

#[pyfunction]
fn cosine_similarity(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    embedding::cosine_similarity(&a, &b).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (scores, scale = embedding::DEFAULT_SCALE))]
fn softmax(scores: Vec<f64>, scale: f64) -> PyResult<Vec<f64>> {
    embedding::softmax(&scores, scale).map_err(value_err)
}

#[pyfunction]
fn l2_normalize(v: Vec<f32>) -> PyResult<Vec<f32>> {
    embedding::l2_normalize(&v).map_err(value_err)
}

/// SHA-256 hex digest used to key text embeddings.
#[pyfunction]
fn content_id(text: &str) -> String {
    pipeline::content_id(text)
}

#[pyfunction]
fn lemma_key(word: &str) -> String {
    dis::lemma_key(word)
}

/// One sense of a lemma.
#[pyclass(module = "vwsd", get_all, from_py_object)]
#[derive(Clone)]
struct SenseEntry {
    synset_id: String,
    gloss: String,
    synonyms: Vec<String>,
}

#[pymethods]
impl SenseEntry {
    #[new]
    #[pyo3(signature = (synset_id, gloss, synonyms = Vec::new()))]
    fn new(synset_id: String, gloss: String, synonyms: Vec<String>) -> Self {
        Self {
            synset_id,
            gloss,
            synonyms,
        }
    }

    fn __repr__(&self) -> String {
        format!("SenseEntry({:?})", self.synset_id)
    }
}

impl From<&dis::SenseEntry> for SenseEntry {
    fn from(e: &dis::SenseEntry) -> Self {
        Self {
            synset_id: e.synset_id.clone(),
            gloss: e.gloss.clone(),
            synonyms: e.synonyms.clone(),
        }
    }
}

impl From<&SenseEntry> for dis::SenseEntry {
    fn from(e: &SenseEntry) -> Self {
        Self {
            synset_id: e.synset_id.clone(),
            gloss: e.gloss.clone(),
            synonyms: e.synonyms.clone(),
        }
    }
}

/// Lemma to senses, read from JSON lines.
#[pyclass(module = "vwsd")]
struct SenseInventory {
    inner: dis::SenseInventory,
}

#[pymethods]
impl SenseInventory {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dis::SenseInventory::parse(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dis::SenseInventory::load(path).map_err(value_err)?,
        })
    }

    fn senses(&self, word: &str) -> Vec<SenseEntry> {
        self.inner.senses(word).iter().map(SenseEntry::from).collect()
    }

    fn lemma_count(&self) -> usize {
        self.inner.lemma_count()
    }

    fn sense_count(&self) -> usize {
        self.inner.sense_count()
    }
}

/// Cosine 1-NN over the gloss embeddings. Returns `(index, similarity)`,
/// or `None` when `senses` is empty.
#[pyfunction]
fn match_gloss(
    context: Vec<f32>,
    glosses: Vec<Vec<f32>>,
    senses: Vec<SenseEntry>,
) -> PyResult<Option<(usize, f64)>> {
    let entries: Vec<dis::SenseEntry> = senses.iter().map(Into::into).collect();
    match dis::match_gloss(&context, &glosses, &entries).map_err(value_err)? {
        GlossMatch::Matched {
            index, similarity, ..
        } => Ok(Some((index, similarity))),
        GlossMatch::Unmatched => Ok(None),
    }
}

/// Augmented prompt; `sense=None` gives the fallback.
#[pyfunction]
#[pyo3(signature = (context, target, sense = None))]
fn build_prompt(context: &str, target: &str, sense: Option<SenseEntry>) -> String {
    let matched = match &sense {
        Some(s) => GlossMatch::Matched {
            index: 0,
            entry: s.into(),
            similarity: 1.0,
        },
        None => GlossMatch::Unmatched,
    };
    dis::build_prompt(context, target, &matched)
}

/// Exact cosine top-k index over an image corpus.
#[pyclass(module = "vwsd")]
struct ImageIndex {
    inner: retrieval::ImageIndex,
}

#[pymethods]
impl ImageIndex {
    #[new]
    fn new(store: &EmbeddingStore) -> PyResult<Self> {
        Ok(Self {
            inner: retrieval::ImageIndex::build(store.inner.clone()).map_err(value_err)?,
        })
    }

    /// `[(id, score), ...]` by descending cosine.
    fn top_k(&self, py: Python<'_>, query: Vec<f32>, k: usize) -> PyResult<Vec<(String, f64)>> {
        let r = py.detach(|| self.inner.top_k(&query, k)).map_err(value_err)?;
        Ok(r.hits.into_iter().map(|h| (h.id, h.score)).collect())
    }

    #[getter]
    fn corpus_hash(&self) -> String {
        self.inner.corpus_hash().to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn fusion_input(context: &[f32], retrieved: &[Vec<f32>], candidates: &[Vec<f32>]) -> PyResult<FusionInput> {
    FusionInput::new(context, retrieved, candidates, None).map_err(value_err)
}

/// Mean of the context and retrieved-image softmaxes over the candidates.
#[pyfunction]
#[pyo3(signature = (context, retrieved, candidates, scale = embedding::DEFAULT_SCALE))]
fn average_fuse(
    context: Vec<f32>,
    retrieved: Vec<Vec<f32>>,
    candidates: Vec<Vec<f32>>,
    scale: f64,
) -> PyResult<Vec<f64>> {
    let input = fusion_input(&context, &retrieved, &candidates)?;
    Ok(fusion::average_fuse(&input, scale).map_err(value_err)?.probabilities)
}

/// Softmax of the context embedding alone.
#[pyfunction]
#[pyo3(signature = (context, candidates, scale = embedding::DEFAULT_SCALE))]
fn context_only_fuse(context: Vec<f32>, candidates: Vec<Vec<f32>>, scale: f64) -> PyResult<Vec<f64>> {
    let input = fusion_input(&context, &[], &candidates)?;
    Ok(fusion::context_only_fuse(&input, scale).map_err(value_err)?.probabilities)
}

/// Candidate indices by descending probability, ties by index.
#[pyfunction]
fn rank_candidates(probabilities: Vec<f64>) -> Vec<usize> {
    fusion::rank_candidates(&FusedScore {
        probabilities,
        fused: None,
    })
}

#[pyfunction]
fn hit_at_1(ranks: Vec<usize>) -> PyResult<f64> {
    evaluation::hit_at_1(&ranks).map_err(value_err)
}

#[pyfunction]
fn mrr(ranks: Vec<usize>) -> PyResult<f64> {
    evaluation::mrr(&ranks).map_err(value_err)
}

/// Runs the pipeline described by a configuration file and returns
/// `{"n", "hit_at_1", "mrr", "records": [(sample_id, gold_rank, top1)]}`.
#[pyfunction]
#[pyo3(signature = (config, fuser = None))]
fn run_eval<'py>(py: Python<'py>, config: PathBuf, fuser: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = PipelineConfig::load(&config).map_err(value_err)?;
    if let Some(f) = fuser {
        cfg.fuser = f.parse::<FuserKind>().map_err(value_err)?;
    }
    let run = py
        .detach(|| {
            let model = pipeline::load_model(&cfg)?;
            pipeline::run_pipeline(&cfg, &model)
        })
        .map_err(|e| match e {
            pipeline::PipelineError::Provider(p) => PyIOError::new_err(p.to_string()),
            other => value_err(other),
        })?;
    let out = PyDict::new(py);
    out.set_item("n", run.report.records.len())?;
    out.set_item("hit_at_1", run.report.hit_at_1)?;
    out.set_item("mrr", run.report.mrr)?;
    let records: Vec<(String, usize, String)> = run
        .report
        .records
        .into_iter()
        .map(|r| (r.sample_id, r.gold_rank, r.top1))
        .collect();
    out.set_item("records", records)?;
    out.set_item("skipped", run.skipped)?;
    Ok(out)
}

#[pymodule]
fn vwsd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<EmbeddingStore>()?;
    m.add_class::<SenseEntry>()?;
    m.add_class::<SenseInventory>()?;
    m.add_class::<ImageIndex>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(content_id, m)?)?;
    m.add_function(wrap_pyfunction!(lemma_key, m)?)?;
    m.add_function(wrap_pyfunction!(match_gloss, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(average_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(context_only_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(rank_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(hit_at_1, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add("FORMAT_VERSION", store::FORMAT_VERSION)?;
    Ok(())
}
