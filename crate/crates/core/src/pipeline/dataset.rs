//! Tab-separated samples: target word, context, ten candidate image ids.
//! An optional gold file holds one image id per data row.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fusion::CANDIDATES;

pub const COLUMNS: usize = CANDIDATES + 2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: row {row}: expected {COLUMNS} columns, found {found}")]
    ColumnCount {
        path: PathBuf,
        row: usize,
        found: usize,
    },
    #[error("{path}: row {row}: {message}")]
    Invalid {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("gold file has {gold} rows but data file has {data}")]
    GoldLength { gold: usize, data: usize },
    #[error("row {row}: gold image {gold:?} is not among the candidates")]
    GoldNotCandidate { row: usize, gold: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub target: String,
    pub context: String,
    pub candidates: Vec<String>,
    pub gold: Option<String>,
}

impl Sample {
    pub fn gold_index(&self) -> Option<usize> {
        let g = self.gold.as_ref()?;
        self.candidates.iter().position(|c| c == g)
    }
}

/// A row left out of the dataset, with its 1-based row number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRow {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub skipped: Vec<SkippedRow>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.samples.len() + self.skipped.len()
    }
}

/// Identifier of the sample on 1-based data row `row`.
pub fn sample_id(row: usize) -> String {
    format!("{row:06}")
}

/// Non-empty lines as raw bytes, without trailing `\r`.
fn rows(bytes: &[u8]) -> Vec<&[u8]> {
    bytes
        .split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
        .collect()
}

fn has_control(s: &str) -> bool {
    s.chars().any(|c| c.is_control() && c != '\t')
}

/// Parses dataset bytes. Rows that are not valid UTF-8 or contain control
/// characters are skipped and reported; structural problems are errors.
pub fn parse_dataset(
    data: &[u8],
    gold: Option<&[u8]>,
    data_path: &Path,
) -> Result<Dataset, DatasetError> {
    let data_rows = rows(data);
    let gold_rows = gold.map(rows);
    if let Some(g) = &gold_rows {
        if g.len() != data_rows.len() {
            return Err(DatasetError::GoldLength {
                gold: g.len(),
                data: data_rows.len(),
            });
        }
    }
    let mut out = Dataset::default();
    for (i, raw) in data_rows.iter().enumerate() {
        let row = i + 1;
        let skip = |reason: &str| SkippedRow {
            row,
            reason: reason.to_string(),
        };
        let Ok(line) = std::str::from_utf8(raw) else {
            log::warn!("{}: row {row}: skipped, not valid UTF-8", data_path.display());
            out.skipped.push(skip("invalid UTF-8"));
            continue;
        };
        if has_control(line) {
            log::warn!("{}: row {row}: skipped, control characters", data_path.display());
            out.skipped.push(skip("control characters"));
            continue;
        }
        let gold_id = match gold_rows.as_ref().map(|g| std::str::from_utf8(g[i])) {
            None => None,
            Some(Ok(g)) => Some(g.trim().to_string()),
            Some(Err(_)) => {
                log::warn!("gold row {row}: skipped, not valid UTF-8");
                out.skipped.push(skip("invalid UTF-8 in gold file"));
                continue;
            }
        };

        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != COLUMNS {
            return Err(DatasetError::ColumnCount {
                path: data_path.to_path_buf(),
                row,
                found: cols.len(),
            });
        }
        let invalid = |message: String| DatasetError::Invalid {
            path: data_path.to_path_buf(),
            row,
            message,
        };
        let (target, context) = (cols[0], cols[1]);
        if target.is_empty() || context.is_empty() {
            return Err(invalid("empty target word or context".into()));
        }
        let candidates: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
        if candidates.iter().any(String::is_empty) {
            return Err(invalid("empty candidate image id".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = candidates.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(invalid(format!("duplicate candidate {dup:?}")));
        }
        if !context
            .split_whitespace()
            .any(|tok| tok.eq_ignore_ascii_case(target))
            && !context.to_lowercase().contains(&target.to_lowercase())
        {
            log::warn!("row {row}: context {context:?} does not contain target {target:?}");
        }
        if let Some(g) = &gold_id {
            if !candidates.contains(g) {
                return Err(DatasetError::GoldNotCandidate { row, gold: g.clone() });
            }
        }
        out.samples.push(Sample {
            id: sample_id(row),
            target: target.to_string(),
            context: context.to_string(),
            candidates,
            gold: gold_id,
        });
    }
    Ok(out)
}

pub fn load_dataset(data_path: &Path, gold_path: Option<&Path>) -> Result<Dataset, DatasetError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|source| DatasetError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let data = read(data_path)?;
    let gold = gold_path.map(read).transpose()?;
    parse_dataset(&data, gold.as_deref(), data_path)
}
