use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::PipelineConfig;
use super::dataset::{load_dataset, Dataset, Sample};
use super::provider::{content_id, EmbeddingProvider};
use super::trace::{GlossTrace, StageTrace};
use super::PipelineError;
use crate::disambiguation::{build_prompt, match_gloss, GlossMatch, SenseInventory};
use crate::evaluation::{rank_of_gold, RankRecord, RankReport};
use crate::fusion::{
    average_fuse, checkpoint, context_only_fuse, rank_candidates, FuserKind, FuserModel,
    FusionInput, CANDIDATES,
};
use crate::retrieval::{retrieve_for_samples, ImageIndex, PromptQuery, RetrievalCache, RetrievalResult};
use crate::store::EmbeddingStore;
use crate::train::{self, TrainReport};

/// A text-keyed embedding source: a store looked up by primary id or text
/// hash, plus anything fetched from the provider.
#[derive(Debug, Default)]
struct TextEmbeddings {
    store: Option<EmbeddingStore>,
    fetched: Option<EmbeddingStore>,
}

impl TextEmbeddings {
    fn get(&self, primary: &str, text: &str) -> Option<&[f32]> {
        let hash = || content_id(text);
        self.store
            .as_ref()
            .and_then(|s| s.get(primary).or_else(|| s.get(&hash())))
            .or_else(|| self.fetched.as_ref().and_then(|s| s.get(&hash())))
    }

    fn dim(&self) -> Option<usize> {
        self.store.as_ref().or(self.fetched.as_ref()).map(EmbeddingStore::dim)
    }

    /// Fetches every `(primary, text)` not yet resolvable.
    fn fill(
        &mut self,
        provider: Option<&EmbeddingProvider>,
        wanted: &[(&str, &str)],
    ) -> Result<(), PipelineError> {
        let Some(provider) = provider else {
            return Ok(());
        };
        let missing: Vec<&str> = wanted
            .iter()
            .filter(|(p, t)| self.get(p, t).is_none())
            .map(|(_, t)| *t)
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let mut provider = provider.clone();
        if provider.expected_dim.is_none() {
            provider.expected_dim = self.dim();
        }
        self.fetched = Some(provider.fetch_embeddings(&missing)?);
        Ok(())
    }
}

fn load_store(path: &Path) -> Result<EmbeddingStore, PipelineError> {
    EmbeddingStore::load(path).map_err(|source| PipelineError::Store {
        path: path.to_path_buf(),
        source,
    })
}

fn load_optional(path: &Option<PathBuf>) -> Result<Option<EmbeddingStore>, PipelineError> {
    path.as_deref().map(load_store).transpose()
}

/// Everything loaded from a configuration.
pub struct Resources {
    pub config: PipelineConfig,
    pub dataset: Dataset,
    pub inventory: SenseInventory,
    contexts: TextEmbeddings,
    glosses: TextEmbeddings,
    prompts: TextEmbeddings,
    candidates: EmbeddingStore,
    index: ImageIndex,
    provider: Option<EmbeddingProvider>,
}

/// Output of gloss matching and prompting for one sample.
#[derive(Debug, Clone)]
pub struct PromptStage {
    pub sample: Sample,
    pub senses: usize,
    pub gloss: GlossMatch,
    pub prompt: String,
}

/// A sample after every stage up to fusion.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub stage: PromptStage,
    pub retrieved: RetrievalResult,
    pub input: FusionInput,
}

/// Result of an evaluation run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: RankReport,
    pub traces: Vec<StageTrace>,
    pub skipped: usize,
}

fn provider_cache(config: &PipelineConfig, name: &str) -> Option<PathBuf> {
    config.cache_dir.as_ref().map(|d| d.join(format!("provider-{name}.vwse")))
}

impl Resources {
    pub fn load(config: &PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let data = config.require("data", &config.data)?;
        let dataset = load_dataset(data, config.gold.as_deref())?;
        let inventory = match &config.inventory {
            Some(p) => SenseInventory::load(p)?,
            None => SenseInventory::new(),
        };
        let candidates = load_store(config.require("candidates", &config.candidates)?)?;
        let corpus = load_store(config.require("corpus", &config.corpus)?)?;
        let index = ImageIndex::build(corpus)?;
        let image_dim = config.dim.unwrap_or(index.dim());
        for (what, dim) in [("corpus", index.dim()), ("candidates", candidates.dim())] {
            if dim != image_dim {
                return Err(PipelineError::Dimension {
                    what,
                    expected: image_dim,
                    got: dim,
                });
            }
        }
        let prompts = TextEmbeddings {
            store: load_optional(&config.prompts)?,
            fetched: None,
        };
        if let Some(d) = prompts.dim() {
            if d != image_dim {
                return Err(PipelineError::Dimension {
                    what: "prompts",
                    expected: image_dim,
                    got: d,
                });
            }
        }
        let contexts = TextEmbeddings {
            store: load_optional(&config.contexts)?,
            fetched: None,
        };
        let glosses = TextEmbeddings {
            store: load_optional(&config.glosses)?,
            fetched: None,
        };
        let provider = config.provider.as_deref().map(EmbeddingProvider::new);
        Ok(Self {
            config: config.clone(),
            dataset,
            inventory,
            contexts,
            glosses,
            prompts,
            candidates,
            index,
            provider,
        })
    }

    fn text_provider(&self, cache: &str, dim: Option<usize>) -> Option<EmbeddingProvider> {
        self.provider.clone().map(|mut p| {
            p.cache_path = provider_cache(&self.config, cache);
            p.expected_dim = dim;
            p
        })
    }

    pub fn index(&self) -> &ImageIndex {
        &self.index
    }

    /// Gloss matching and prompt construction for every sample.
    pub fn prompt_stages(&mut self) -> Result<Vec<PromptStage>, PipelineError> {
        let samples = &self.dataset.samples;
        let inventory = &self.inventory;
        let mut ctx_wanted = Vec::new();
        let mut gloss_wanted = Vec::new();
        for s in samples {
            let senses = inventory.senses(&s.target);
            if !senses.is_empty() {
                ctx_wanted.push((s.id.as_str(), s.context.as_str()));
                gloss_wanted.extend(senses.iter().map(|e| (e.synset_id.as_str(), e.gloss.as_str())));
            }
        }
        let provider = self.text_provider("contexts", None);
        self.contexts.fill(provider.as_ref(), &ctx_wanted)?;
        let provider = self.text_provider("glosses", self.contexts.dim());
        self.glosses.fill(provider.as_ref(), &gloss_wanted)?;

        let (contexts, glosses) = (&self.contexts, &self.glosses);
        samples
            .par_iter()
            .map(|s| {
                let senses = inventory.senses(&s.target);
                let gloss = if senses.is_empty() {
                    GlossMatch::Unmatched
                } else {
                    let ctx = contexts.get(&s.id, &s.context).ok_or_else(|| {
                        PipelineError::MissingEmbedding {
                            sample: s.id.clone(),
                            stage: "context",
                            key: s.id.clone(),
                        }
                    })?;
                    let embs = senses
                        .iter()
                        .map(|e| {
                            glosses.get(&e.synset_id, &e.gloss).ok_or_else(|| {
                                PipelineError::MissingEmbedding {
                                    sample: s.id.clone(),
                                    stage: "gloss",
                                    key: e.synset_id.clone(),
                                }
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    match_gloss(ctx, &embs, senses).map_err(|source| PipelineError::Match {
                        sample: s.id.clone(),
                        source,
                    })?
                };
                Ok(PromptStage {
                    prompt: build_prompt(&s.context, &s.target, &gloss),
                    senses: senses.len(),
                    sample: s.clone(),
                    gloss,
                })
            })
            .collect()
    }

    /// Top-k retrieval for every prompt, through the on-disk cache when a
    /// cache directory is configured.
    pub fn retrieve(&mut self, stages: &[PromptStage]) -> Result<BTreeMap<String, RetrievalResult>, PipelineError> {
        let wanted: Vec<(&str, &str)> = stages
            .iter()
            .map(|s| (s.sample.id.as_str(), s.prompt.as_str()))
            .collect();
        let provider = self.text_provider("prompts", Some(self.index.dim()));
        self.prompts.fill(provider.as_ref(), &wanted)?;

        let mut queries = Vec::with_capacity(stages.len());
        let mut store = EmbeddingStore::new(self.index.dim())
            .map_err(|source| PipelineError::Store {
                path: PathBuf::new(),
                source,
            })?;
        for s in stages {
            let id = &s.sample.id;
            let key = match self.prompts.store.as_ref().filter(|st| st.contains(id)) {
                Some(_) => id.clone(),
                None => content_id(&s.prompt),
            };
            let v = self.prompts.get(id, &s.prompt).ok_or_else(|| PipelineError::MissingEmbedding {
                sample: id.clone(),
                stage: "prompt",
                key: key.clone(),
            })?;
            if !store.contains(&key) {
                store.insert(key.clone(), v).map_err(|source| PipelineError::Store {
                    path: PathBuf::new(),
                    source,
                })?;
            }
            queries.push(PromptQuery {
                sample_id: id.clone(),
                prompt_id: key,
            });
        }
        let cache = self.config.cache_dir.as_ref().map(RetrievalCache::new);
        Ok(retrieve_for_samples(&self.index, &store, &queries, self.config.k, cache.as_ref())?)
    }

    /// Runs every stage up to fusion.
    pub fn prepare(&mut self) -> Result<Vec<PreparedSample>, PipelineError> {
        let stages = self.prompt_stages()?;
        let mut retrieved = self.retrieve(&stages)?;
        let prompts = &self.prompts;
        let (index, candidates) = (&self.index, &self.candidates);
        let with_hits: Vec<(PromptStage, RetrievalResult)> = stages
            .into_iter()
            .map(|s| {
                let r = retrieved.remove(&s.sample.id).unwrap_or_default();
                (s, r)
            })
            .collect();
        with_hits
            .into_par_iter()
            .map(|(stage, hits)| {
                let s = &stage.sample;
                let missing = |stage: &'static str, key: &str| PipelineError::MissingEmbedding {
                    sample: s.id.clone(),
                    stage,
                    key: key.to_string(),
                };
                let prompt = prompts.get(&s.id, &stage.prompt).ok_or_else(|| missing("prompt", &s.id))?;
                let images = hits
                    .ids()
                    .map(|id| index.get(id).ok_or_else(|| missing("retrieval", id)))
                    .collect::<Result<Vec<_>, _>>()?;
                let cands = s
                    .candidates
                    .iter()
                    .map(|id| candidates.get(id).ok_or_else(|| missing("candidates", id)))
                    .collect::<Result<Vec<_>, _>>()?;
                let input = FusionInput::new(prompt, &images, &cands, s.gold_index()).map_err(|source| {
                    PipelineError::Fusion {
                        sample: s.id.clone(),
                        source,
                    }
                })?;
                Ok(PreparedSample {
                    stage,
                    retrieved: hits,
                    input,
                })
            })
            .collect()
    }

    fn context_source(&self, id: &str) -> String {
        let from_store = self.contexts.store.as_ref().is_some_and(|s| s.contains(id));
        match (&self.config.provider_id, &self.config.provider, from_store) {
            (_, _, true) | (_, None, _) => "store".into(),
            (Some(pid), Some(_), false) => pid.clone(),
            (None, Some(url), false) => url.clone(),
        }
    }
}

/// The model selected by the configuration; trainable fusers are loaded
/// from the configured checkpoint.
pub fn load_model(config: &PipelineConfig) -> Result<FuserModel, PipelineError> {
    match config.fuser {
        FuserKind::Average => Ok(FuserModel::Average),
        FuserKind::ClipAug => Ok(FuserModel::ClipAug),
        kind => {
            let path = config.require("checkpoint", &config.checkpoint)?;
            let ck = checkpoint::load(path)?;
            if ck.model.kind() != kind {
                return Err(PipelineError::CheckpointKind {
                    expected: kind,
                    got: ck.model.kind(),
                });
            }
            if ck.scale != config.scale {
                log::warn!(
                    "checkpoint was trained at scale {}, evaluating at {}",
                    ck.scale,
                    config.scale
                );
            }
            Ok(ck.model)
        }
    }
}

/// Full pipeline with the given model: match, prompt, retrieve, fuse, rank.
pub fn run_pipeline(config: &PipelineConfig, model: &FuserModel) -> Result<PipelineRun, PipelineError> {
    let mut res = Resources::load(config)?;
    let prepared = res.prepare()?;
    let scale = config.scale;
    let fuse_err = |sample: &str| {
        let sample = sample.to_string();
        move |source| PipelineError::Fusion { sample, source }
    };
    let scored: Vec<(RankRecord, StageTrace)> = prepared
        .par_iter()
        .map(|p| {
            let s = &p.stage.sample;
            let gold = s.gold_index().ok_or_else(|| PipelineError::MissingGold(s.id.clone()))?;
            let score = model.score(&p.input, scale).map_err(fuse_err(&s.id))?;
            let order = rank_candidates(&score);
            let gold_rank = rank_of_gold(&order, gold)?;
            let mut probabilities = BTreeMap::new();
            probabilities.insert(
                FuserKind::ClipAug.name().to_string(),
                context_only_fuse(&p.input, scale).map_err(fuse_err(&s.id))?.probabilities,
            );
            probabilities.insert(
                FuserKind::Average.name().to_string(),
                average_fuse(&p.input, scale).map_err(fuse_err(&s.id))?.probabilities,
            );
            probabilities.insert(model.kind().name().to_string(), score.probabilities.clone());
            let ranking: Vec<String> = order.iter().map(|&i| s.candidates[i].clone()).collect();
            let record = RankRecord {
                sample_id: s.id.clone(),
                gold_rank,
                top1: ranking[0].clone(),
            };
            let trace = StageTrace {
                sample_id: s.id.clone(),
                target: s.target.clone(),
                context: s.context.clone(),
                context_source: res.context_source(&s.id),
                gloss: GlossTrace::new(p.stage.senses, &p.stage.gloss),
                prompt: p.stage.prompt.clone(),
                retrieved: p.retrieved.hits.clone(),
                probabilities,
                ranking,
                gold: s.gold.clone(),
                gold_rank: Some(gold_rank),
            };
            Ok((record, trace))
        })
        .collect::<Result<_, PipelineError>>()?;
    let (records, traces): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    Ok(PipelineRun {
        report: RankReport::new(records, CANDIDATES)?,
        traces,
        skipped: res.dataset.skipped.len(),
    })
}

/// Splits sample positions into (train, validation) with a seeded shuffle.
/// Both lists keep dataset order.
pub fn holdout_split(n: usize, holdout: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    if holdout >= n && n > 0 {
        return Err(PipelineError::Holdout { holdout, samples: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);
    let mut val = order[..holdout.min(n)].to_vec();
    let mut train = order[holdout.min(n)..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Where the training history goes when not configured.
pub fn history_path(config: &PipelineConfig, checkpoint: &Path) -> PathBuf {
    config.history.clone().unwrap_or_else(|| {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".history.jsonl");
        PathBuf::from(s)
    })
}

/// Trains the configured fuser, writes the checkpoint and the per-epoch
/// history. With `resume`, training continues from the existing checkpoint.
pub fn run_training(config: &PipelineConfig, resume: bool) -> Result<TrainReport<FuserModel>, PipelineError> {
    let tc = config.train_config()?;
    let ckpt = config.require("checkpoint", &config.checkpoint)?.to_path_buf();
    let mut res = Resources::load(config)?;
    let prepared = res.prepare()?;
    if let Some(p) = prepared.iter().find(|p| p.input.gold().is_none()) {
        return Err(PipelineError::MissingGold(p.stage.sample.id.clone()));
    }
    let (train_idx, val_idx) = holdout_split(prepared.len(), config.holdout, config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| prepared[i].input.clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&train_idx), pick(&val_idx));

    let model = if resume {
        let ck = checkpoint::load(&ckpt)?;
        if ck.model.kind() != tc.kind {
            return Err(PipelineError::CheckpointKind {
                expected: tc.kind,
                got: ck.model.kind(),
            });
        }
        ck.model
    } else {
        let dim = res.index().dim();
        train::init_model(&tc, dim)?
    };
    let report = train::train_model(model, &tc, &train_set, &val_set)?;
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    checkpoint::save(&ckpt, &report.fuser, tc.scale)?;
    let hist = history_path(config, &ckpt);
    let mut text = Vec::new();
    for r in &report.history {
        serde_json::to_writer(&mut text, r).expect("history serializes");
        text.push(b'\n');
    }
    fs::File::create(&hist)
        .and_then(|mut f| f.write_all(&text))
        .map_err(|source| PipelineError::Io { path: hist, source })?;
    Ok(report)
}
