//! Parallel gloss/text corpus handling: ingestion, normalization, splits,
//! and merging of machine-generated (silver) pairs into the training set.
//!
//! Normalization is fixed once here and reused by every other module: text is
//! lowercased, internal whitespace is collapsed, and leading/trailing
//! whitespace is stripped. Punctuation is kept. Gloss labels keep their case
//! and are treated as atomic tokens.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column '{column}' in header")]
    MissingColumn { column: String },
    #[error("empty corpus: {path} contains no data rows")]
    EmptyCorpus { path: String },
    #[error("line {line}: expected {expected} '|'-delimited fields, found {found}")]
    MalformedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: missing tab separator")]
    MissingTab { line: usize },
    #[error("line {line}: empty {field} field")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: unknown origin tag '{tag}'")]
    UnknownOrigin { line: usize, tag: String },
    #[error("duplicate pair id '{id}' in split {split}")]
    DuplicateId { id: String, split: SplitName },
    #[error("split {split} admits only gold pairs, but pair '{id}' has origin {origin}")]
    NonGoldInEvalSplit {
        split: SplitName,
        id: String,
        origin: Origin,
    },
    #[error("merge_silver rejects gold-origin pair '{id}'")]
    GoldInSilver { id: String },
}

/// Provenance of a parallel pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Origin {
    Gold,
    SilverParaphrase,
    SilverBacktranslation,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Gold => "gold",
            Origin::SilverParaphrase => "silver_paraphrase",
            Origin::SilverBacktranslation => "silver_backtranslation",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "gold" => Some(Origin::Gold),
            "silver_paraphrase" => Some(Origin::SilverParaphrase),
            "silver_backtranslation" => Some(Origin::SilverBacktranslation),
            _ => None,
        }
    }

    pub fn is_silver(self) -> bool {
        !matches!(self, Origin::Gold)
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "train" => Some(SplitName::Train),
            "dev" => Some(SplitName::Dev),
            "test" => Some(SplitName::Test),
            _ => None,
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One gloss sequence with its spoken-text sentence.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParallelPair {
    pub id: String,
    /// Gloss labels in source order, case preserved.
    pub gloss: Vec<String>,
    /// Normalized spoken sentence (lowercase, single spaces).
    pub text: String,
    pub origin: Origin,
}

impl ParallelPair {
    /// Gloss side as a single whitespace-joined string.
    pub fn gloss_joined(&self) -> String {
        self.gloss.join(" ")
    }

    /// Content key used for exact-duplicate detection.
    pub fn content_key(&self) -> (String, String) {
        (self.gloss_joined(), self.text.clone())
    }
}

/// Lowercases, collapses internal whitespace, and trims.
pub fn normalize_text(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Collapses whitespace into atomic gloss labels, case preserved.
pub fn normalize_gloss(raw: &str) -> Vec<String> {
    raw.split_whitespace().map(str::to_owned).collect()
}

/// A named, validated sequence of parallel pairs.
///
/// Immutable after construction. Dev and test splits only admit gold pairs
/// and pair ids are unique within a split; both are enforced by [`CorpusSplit::new`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    name: SplitName,
    pairs: Vec<ParallelPair>,
}

impl CorpusSplit {
    pub fn new(name: SplitName, pairs: Vec<ParallelPair>) -> Result<Self, CorpusError> {
        let mut ids = HashSet::with_capacity(pairs.len());
        for pair in &pairs {
            if !ids.insert(pair.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: pair.id.clone(),
                    split: name,
                });
            }
            if name != SplitName::Train && pair.origin != Origin::Gold {
                return Err(CorpusError::NonGoldInEvalSplit {
                    split: name,
                    id: pair.id.clone(),
                    origin: pair.origin,
                });
            }
        }
        drop(ids);
        Ok(Self { name, pairs })
    }

    pub fn name(&self) -> SplitName {
        self.name
    }

    pub fn pairs(&self) -> &[ParallelPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// All sentences of both sides, gloss side first. The tokenizer trains on this union.
    pub fn all_sentences(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 * self.pairs.len());
        out.extend(self.pairs.iter().map(ParallelPair::gloss_joined));
        out.extend(self.pairs.iter().map(|p| p.text.clone()));
        out
    }
}

/// Loads one split of a PHOENIX-style annotation file: '|'-delimited with a
/// header row naming at least the `orth` (gloss) and `translation` columns.
pub fn load_phoenix(path: &Path, name: SplitName) -> Result<CorpusSplit, CorpusError> {
    let display = path.display().to_string();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut lines = raw.lines();
    let header = match lines.next() {
        Some(h) if !h.trim().is_empty() => h,
        _ => return Err(CorpusError::EmptyCorpus { path: display }),
    };
    let columns: Vec<&str> = header.split('|').collect();
    let col = |wanted: &str| -> Result<usize, CorpusError> {
        columns
            .iter()
            .position(|c| c.trim() == wanted)
            .ok_or_else(|| CorpusError::MissingColumn {
                column: wanted.to_owned(),
            })
    };
    let gloss_col = col("orth")?;
    let text_col = col("translation")?;
    let id_col = columns.iter().position(|c| c.trim() == "name");

    let mut pairs = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2; // header is line 1
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != columns.len() {
            return Err(CorpusError::MalformedRow {
                line: line_no,
                expected: columns.len(),
                found: fields.len(),
            });
        }
        let gloss = normalize_gloss(fields[gloss_col]);
        if gloss.is_empty() {
            return Err(CorpusError::EmptyField {
                line: line_no,
                field: "gloss",
            });
        }
        let text = normalize_text(fields[text_col]);
        if text.is_empty() {
            return Err(CorpusError::EmptyField {
                line: line_no,
                field: "text",
            });
        }
        let id = match id_col {
            Some(c) if !fields[c].trim().is_empty() => fields[c].trim().to_owned(),
            _ => format!("{}-{:06}", name, pairs.len() + 1),
        };
        pairs.push(ParallelPair {
            id,
            gloss,
            text,
            origin: Origin::Gold,
        });
    }
    if pairs.is_empty() {
        return Err(CorpusError::EmptyCorpus { path: display });
    }
    CorpusSplit::new(name, pairs)
}

/// Loads a two- or three-column TSV: `gloss TAB text [TAB origin]`.
///
/// Pair ids are the 1-based row number, zero padded, so a save/load round
/// trip reproduces the split exactly.
pub fn load_tsv(path: &Path, name: SplitName) -> Result<CorpusSplit, CorpusError> {
    let display = path.display().to_string();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(CorpusError::MissingTab { line: line_no });
        }
        let gloss = normalize_gloss(fields[0]);
        if gloss.is_empty() {
            return Err(CorpusError::EmptyField {
                line: line_no,
                field: "gloss",
            });
        }
        let text = normalize_text(fields[1]);
        if text.is_empty() {
            return Err(CorpusError::EmptyField {
                line: line_no,
                field: "text",
            });
        }
        let origin = match fields.get(2) {
            Some(tag) if !tag.trim().is_empty() => {
                Origin::parse(tag.trim()).ok_or_else(|| CorpusError::UnknownOrigin {
                    line: line_no,
                    tag: (*tag).to_owned(),
                })?
            }
            _ => Origin::Gold,
        };
        pairs.push(ParallelPair {
            id: format!("{:06}", pairs.len() + 1),
            gloss,
            text,
            origin,
        });
    }
    if pairs.is_empty() {
        return Err(CorpusError::EmptyCorpus { path: display });
    }
    CorpusSplit::new(name, pairs)
}

/// Writes a split as `gloss TAB text TAB origin` rows, Unix newlines.
pub fn save_tsv(split: &CorpusSplit, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for pair in split.pairs() {
        out.push_str(&pair.gloss_joined());
        out.push('\t');
        out.push_str(&pair.text);
        out.push('\t');
        out.push_str(pair.origin.as_str());
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Counts distinct gloss labels and distinct text words across a split.
pub fn vocab_stats(split: &CorpusSplit) -> (usize, usize) {
    let mut glosses = HashSet::new();
    let mut words = HashSet::new();
    for pair in split.pairs() {
        for label in &pair.gloss {
            glosses.insert(label.as_str());
        }
        for word in pair.text.split_whitespace() {
            words.insert(word);
        }
    }
    (glosses.len(), words.len())
}

/// Appends silver pairs to a gold training split, dropping exact duplicates
/// (same normalized gloss and text as any pair already kept).
pub fn merge_silver(
    gold_train: &CorpusSplit,
    silver: &[ParallelPair],
) -> Result<CorpusSplit, CorpusError> {
    let mut seen: HashSet<(String, String)> = gold_train
        .pairs()
        .iter()
        .map(ParallelPair::content_key)
        .collect();
    let mut merged = gold_train.pairs().to_vec();
    for pair in silver {
        if pair.origin == Origin::Gold {
            return Err(CorpusError::GoldInSilver {
                id: pair.id.clone(),
            });
        }
        if seen.insert(pair.content_key()) {
            merged.push(pair.clone());
        }
    }
    CorpusSplit::new(gold_train.name(), merged)
}
