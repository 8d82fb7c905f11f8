//! Per-sample record of every pipeline stage.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::disambiguation::GlossMatch;
use crate::retrieval::Hit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlossTrace {
    pub matched: bool,
    /// Number of senses the inventory lists for the target.
    pub senses: usize,
    pub synset_id: Option<String>,
    pub gloss: Option<String>,
    pub similarity: Option<f64>,
}

impl GlossTrace {
    pub fn new(senses: usize, m: &GlossMatch) -> Self {
        Self {
            matched: m.is_matched(),
            senses,
            synset_id: m.entry().map(|e| e.synset_id.clone()),
            gloss: m.entry().map(|e| e.gloss.clone()),
            similarity: m.similarity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub sample_id: String,
    pub target: String,
    pub context: String,
    /// Where the context embedding came from.
    pub context_source: String,
    pub gloss: GlossTrace,
    pub prompt: String,
    pub retrieved: Vec<Hit>,
    /// Candidate probabilities keyed by fuser name.
    pub probabilities: BTreeMap<String, Vec<f64>>,
    /// Candidate ids, best first, under the selected fuser.
    pub ranking: Vec<String>,
    pub gold: Option<String>,
    pub gold_rank: Option<usize>,
}

impl StageTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

/// One JSON line per trace.
pub fn write_traces<W: Write>(traces: &[StageTrace], mut out: W) -> std::io::Result<()> {
    for t in traces {
        out.write_all(t.to_json().as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
