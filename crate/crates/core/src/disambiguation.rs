//! Gloss matching against a sense inventory and prompt construction.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, VectorError};

#[derive(Debug, Error)]
pub enum InventoryError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate synset {synset_id:?} for lemma {lemma:?}")]
    DuplicateSense {
        line: usize,
        lemma: String,
        synset_id: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("{glosses} gloss embeddings for {entries} sense entries")]
    LengthMismatch { glosses: usize, entries: usize },
    #[error(transparent)]
    Vector(#[from] VectorError),
}

/// One sense of a lemma: a synset with its definition and synonyms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseEntry {
    pub synset_id: String,
    pub gloss: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InventoryRecord {
    lemma: String,
    synset_id: String,
    gloss: String,
    synonyms: Vec<String>,
}

/// Inventory lookup key: lowercased, spaces replaced by underscores.
pub fn lemma_key(word: &str) -> String {
    word.trim().to_lowercase().replace(' ', "_")
}

/// Lemma → senses, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SenseInventory {
    lemmas: BTreeMap<String, Vec<SenseEntry>>,
}

impl SenseInventory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses line-delimited JSON records. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, InventoryError> {
        let mut inv = Self::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let rec: InventoryRecord =
                serde_json::from_str(trimmed).map_err(|e| InventoryError::Malformed {
                    line,
                    message: e.to_string(),
                })?;
            if rec.gloss.trim().is_empty() {
                return Err(InventoryError::Malformed {
                    line,
                    message: "empty gloss".into(),
                });
            }
            let key = lemma_key(&rec.lemma);
            if key.is_empty() || rec.synset_id.is_empty() {
                return Err(InventoryError::Malformed {
                    line,
                    message: "empty lemma or synset_id".into(),
                });
            }
            if !seen.insert((key.clone(), rec.synset_id.clone())) {
                return Err(InventoryError::DuplicateSense {
                    line,
                    lemma: key,
                    synset_id: rec.synset_id,
                });
            }
            inv.lemmas.entry(key).or_default().push(SenseEntry {
                synset_id: rec.synset_id,
                gloss: rec.gloss,
                synonyms: rec.synonyms,
            });
        }
        Ok(inv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InventoryError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, lemma: &str, entry: SenseEntry) {
        self.lemmas.entry(lemma_key(lemma)).or_default().push(entry);
    }

    /// Senses for `word` (case-insensitive); empty when the lemma is unknown.
    pub fn senses(&self, word: &str) -> &[SenseEntry] {
        self.lemmas
            .get(&lemma_key(word))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn lemma_count(&self) -> usize {
        self.lemmas.len()
    }

    pub fn sense_count(&self) -> usize {
        self.lemmas.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[SenseEntry])> {
        self.lemmas.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Outcome of gloss matching for one context.
#[derive(Debug, Clone, PartialEq)]
pub enum GlossMatch {
    Matched {
        index: usize,
        entry: SenseEntry,
        similarity: f64,
    },
    /// The lemma has no senses in the inventory.
    Unmatched,
}

impl GlossMatch {
    pub fn is_matched(&self) -> bool {
        matches!(self, GlossMatch::Matched { .. })
    }

    pub fn entry(&self) -> Option<&SenseEntry> {
        match self {
            GlossMatch::Matched { entry, .. } => Some(entry),
            GlossMatch::Unmatched => None,
        }
    }

    pub fn similarity(&self) -> Option<f64> {
        match self {
            GlossMatch::Matched { similarity, .. } => Some(*similarity),
            GlossMatch::Unmatched => None,
        }
    }
}

/// Cosine 1-NN of `context` over `glosses`; ties go to the lowest index.
pub fn match_gloss<G: AsRef<[f32]>>(
    context: &[f32],
    glosses: &[G],
    entries: &[SenseEntry],
) -> Result<GlossMatch, MatchError> {
    if glosses.len() != entries.len() {
        return Err(MatchError::LengthMismatch {
            glosses: glosses.len(),
            entries: entries.len(),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in glosses.iter().enumerate() {
        let sim = cosine_similarity(context, g.as_ref())?;
        if best.is_none_or(|(_, s)| sim > s) {
            best = Some((i, sim));
        }
    }
    Ok(match best {
        Some((index, similarity)) => GlossMatch::Matched {
            index,
            entry: entries[index].clone(),
            similarity,
        },
        None => GlossMatch::Unmatched,
    })
}

pub const PROMPT_PREFIX: &str = "This is a picture of ";

/// Builds the augmented context.
///
/// Matched: `This is a picture of {context}, also known as {synonyms}, where
/// {target} refers to {gloss}.` The synonym clause is dropped when no
/// synonyms remain after removing the target word itself. Unmatched:
/// `This is a picture of {context}`.
pub fn build_prompt(context: &str, target: &str, matched: &GlossMatch) -> String {
    let mut prompt = format!("{PROMPT_PREFIX}{context}");
    if let Some(entry) = matched.entry() {
        let underscored = target.replace(' ', "_");
        let synonyms: Vec<&str> = entry
            .synonyms
            .iter()
            .map(String::as_str)
            .filter(|s| *s != target && *s != underscored)
            .collect();
        if !synonyms.is_empty() {
            prompt.push_str(", also known as ");
            prompt.push_str(&synonyms.join(", "));
        }
        prompt.push_str(", where ");
        prompt.push_str(target);
        prompt.push_str(" refers to ");
        prompt.push_str(&entry.gloss);
        prompt.push('.');
    }
    prompt
}
