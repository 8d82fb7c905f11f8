//! Gold ranks, HIT@1, MRR and polysemy statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disambiguation::SenseInventory;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no rank records")]
    Empty,
    #[error("gold index {0} not found in ranking")]
    GoldAbsent(usize),
    #[error("ranking is not a permutation of 0..{0}")]
    InvalidRanking(usize),
    #[error("rank {rank} out of range for sample {sample_id}")]
    InvalidRank { sample_id: String, rank: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// 1-based position of `gold` in `ranking`.
pub fn rank_of_gold(ranking: &[usize], gold: usize) -> Result<usize, EvalError> {
    let mut seen = vec![false; ranking.len()];
    for &r in ranking {
        if r >= ranking.len() || std::mem::replace(&mut seen[r], true) {
            return Err(EvalError::InvalidRanking(ranking.len()));
        }
    }
    ranking
        .iter()
        .position(|&r| r == gold)
        .map(|p| p + 1)
        .ok_or(EvalError::GoldAbsent(gold))
}

/// Fraction of ranks equal to 1.
pub fn hit_at_1(ranks: &[usize]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = ranks.iter().filter(|&&r| r == 1).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    Ok(sum / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub sample_id: String,
    pub gold_rank: usize,
    /// Id of the top-ranked candidate.
    pub top1: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub hit_at_1: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub records: Vec<RankRecord>,
    pub hit_at_1: f64,
    pub mrr: f64,
}

#[derive(Serialize)]
struct SummaryLine {
    summary: Summary,
}

impl RankReport {
    /// Computes metrics over `records`, which must hold ranks in `1..=candidates`.
    pub fn new(records: Vec<RankRecord>, candidates: usize) -> Result<Self, EvalError> {
        if let Some(bad) = records
            .iter()
            .find(|r| r.gold_rank == 0 || r.gold_rank > candidates)
        {
            return Err(EvalError::InvalidRank {
                sample_id: bad.sample_id.clone(),
                rank: bad.gold_rank,
            });
        }
        let ranks: Vec<usize> = records.iter().map(|r| r.gold_rank).collect();
        Ok(Self {
            hit_at_1: hit_at_1(&ranks)?,
            mrr: mrr(&ranks)?,
            records,
        })
    }

    pub fn summary(&self) -> Summary {
        Summary {
            n: self.records.len(),
            hit_at_1: self.hit_at_1,
            mrr: self.mrr,
        }
    }

    /// One JSON line per record, then a `{"summary": ...}` line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), EvalError> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &SummaryLine { summary: self.summary() })?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

/// Sample counts by number of senses of the target lemma.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolysemyStats {
    pub one: usize,
    pub two: usize,
    pub three_or_more: usize,
    pub not_in_inventory: usize,
}

impl PolysemyStats {
    pub fn total(&self) -> usize {
        self.one + self.two + self.three_or_more + self.not_in_inventory
    }

    /// Percentages of all samples, in bucket order
    /// `[1 sense, 2 senses, >=3 senses, not in inventory]`.
    pub fn percentages(&self) -> [f64; 4] {
        let n = self.total();
        if n == 0 {
            return [0.0; 4];
        }
        let pct = |c: usize| 100.0 * c as f64 / n as f64;
        [
            pct(self.one),
            pct(self.two),
            pct(self.three_or_more),
            pct(self.not_in_inventory),
        ]
    }
}

pub fn polysemy_stats<'a>(
    targets: impl IntoIterator<Item = &'a str>,
    inventory: &SenseInventory,
) -> PolysemyStats {
    let mut stats = PolysemyStats::default();
    for t in targets {
        match inventory.senses(t).len() {
            0 => stats.not_in_inventory += 1,
            1 => stats.one += 1,
            2 => stats.two += 1,
            _ => stats.three_or_more += 1,
        }
    }
    stats
}
