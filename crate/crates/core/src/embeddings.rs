//! Word vectors and the thresholded cosine-similarity index.
//!
//! Vectors load from the plain text format: a `count dim` header line, then
//! one `word v1 .. vdim` row per word. The index stores, per vocabulary word,
//! every other word whose cosine reaches the threshold. Pairs are computed
//! once and mirrored, so the index is exactly symmetric.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum EmbeddingError {
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
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("header declares {declared} vectors, file holds {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("duplicate word '{word}' at line {line}")]
    DuplicateWord { word: String, line: usize },
    #[error("vector table is empty")]
    Empty,
    #[error("similarity threshold {0} is outside [-1, 1]")]
    BadThreshold(f32),
    #[error("malformed index file: {0}")]
    Malformed(String),
}

/// Dense word vectors with O(1) lookup by surface form.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f32>,
    norms: Vec<f32>,
}

impl WordEmbeddingTable {
    pub fn from_pairs(pairs: Vec<(String, Vec<f32>)>) -> Result<Self, EmbeddingError> {
        let Some(dim) = pairs.first().map(|(_, v)| v.len()) else {
            return Err(EmbeddingError::Empty);
        };
        let mut words = Vec::with_capacity(pairs.len());
        let mut index = HashMap::with_capacity(pairs.len());
        let mut vectors = Array2::zeros((pairs.len(), dim));
        for (row, (word, values)) in pairs.into_iter().enumerate() {
            if values.len() != dim {
                return Err(EmbeddingError::Parse {
                    line: row + 2,
                    message: format!("expected {dim} components, found {}", values.len()),
                });
            }
            if index.insert(word.clone(), row).is_some() {
                return Err(EmbeddingError::DuplicateWord {
                    word,
                    line: row + 2,
                });
            }
            for (col, v) in values.iter().enumerate() {
                vectors[[row, col]] = *v;
            }
            words.push(word);
        }
        let norms = vectors
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt() as f32)
            .collect();
        Ok(Self {
            words,
            index,
            vectors,
            norms,
        })
    }

    /// Reads the `count dim` header format with one vector per line.
    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let display = path.display().to_string();
        let raw = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: display,
            source,
        })?;
        let mut lines = raw.lines().enumerate();
        let (_, header) = lines.next().ok_or(EmbeddingError::Empty)?;
        let header_fields: Vec<&str> = header.split_whitespace().collect();
        let [count, dim] = header_fields[..] else {
            return Err(EmbeddingError::Parse {
                line: 1,
                message: "header must be 'count dim'".into(),
            });
        };
        let declared: usize = count.parse().map_err(|_| EmbeddingError::Parse {
            line: 1,
            message: format!("bad vector count '{count}'"),
        })?;
        let dim: usize = dim.parse().map_err(|_| EmbeddingError::Parse {
            line: 1,
            message: format!("bad dimension '{dim}'"),
        })?;
        if dim == 0 {
            return Err(EmbeddingError::Parse {
                line: 1,
                message: "dimension must be positive".into(),
            });
        }
        let mut pairs = Vec::with_capacity(declared);
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().expect("non-empty line").to_owned();
            let values: Vec<f32> = fields
                .map(|f| {
                    let v: f32 = f.parse().map_err(|_| EmbeddingError::Parse {
                        line: line_no,
                        message: format!("bad float '{f}'"),
                    })?;
                    if !v.is_finite() {
                        return Err(EmbeddingError::Parse {
                            line: line_no,
                            message: format!("non-finite component '{f}'"),
                        });
                    }
                    Ok(v)
                })
                .collect::<Result<_, _>>()?;
            if values.len() != dim {
                return Err(EmbeddingError::Parse {
                    line: line_no,
                    message: format!("expected {dim} components, found {}", values.len()),
                });
            }
            pairs.push((word, values));
        }
        if pairs.len() != declared {
            return Err(EmbeddingError::CountMismatch {
                declared,
                found: pairs.len(),
            });
        }
        Self::from_pairs(pairs)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let mut out = format!("{} {}\n", self.len(), self.dim());
        for (row, word) in self.words.iter().enumerate() {
            out.push_str(word);
            for v in self.vectors.row(row) {
                out.push(' ');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| EmbeddingError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn vector(&self, word: &str) -> Option<ArrayView1<'_, f32>> {
        self.index.get(word).map(|&row| self.vectors.row(row))
    }

    /// Cosine similarity, None when either word lacks a vector. A zero-norm
    /// vector is similar to nothing, including itself.
    pub fn cosine(&self, a: &str, b: &str) -> Option<f32> {
        let (&ra, &rb) = (self.index.get(a)?, self.index.get(b)?);
        Some(self.cosine_rows(ra, rb))
    }

    fn cosine_rows(&self, ra: usize, rb: usize) -> f32 {
        let (na, nb) = (f64::from(self.norms[ra]), f64::from(self.norms[rb]));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = self
            .vectors
            .row(ra)
            .iter()
            .zip(self.vectors.row(rb))
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum();
        (dot / (na * nb)) as f32
    }
}

/// Per-word neighbor lists under a fixed cosine threshold, excluding the word
/// itself. Symmetric by construction: `b` lists `a` iff `a` lists `b`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimilarityIndex {
    threshold: f32,
    neighbors: HashMap<String, Vec<(String, f32)>>,
}

impl SimilarityIndex {
    /// Scores all pairs of `words` that have vectors. Each unordered pair is
    /// computed once and mirrored into both lists, so symmetry is exact.
    pub fn build(
        table: &WordEmbeddingTable,
        words: &[String],
        threshold: f32,
    ) -> Result<Self, EmbeddingError> {
        if !(-1.0..=1.0).contains(&threshold) || threshold.is_nan() {
            return Err(EmbeddingError::BadThreshold(threshold));
        }
        let mut seen = HashSet::new();
        let covered: Vec<&String> = words
            .iter()
            .filter(|w| table.contains(w) && seen.insert(w.as_str()))
            .collect();
        let rows: Vec<usize> = covered.iter().map(|w| table.index[w.as_str()]).collect();

        // Upper triangle in parallel, then a sequential mirror pass.
        let hits: Vec<Vec<(usize, f32)>> = par::map_indexed(covered.len(), |i| {
            let mut row_hits = Vec::new();
            for j in (i + 1)..covered.len() {
                let cos = table.cosine_rows(rows[i], rows[j]);
                if cos >= threshold {
                    row_hits.push((j, cos));
                }
            }
            row_hits
        });
        let mut neighbors: HashMap<String, Vec<(String, f32)>> = HashMap::new();
        for (i, row_hits) in hits.iter().enumerate() {
            for &(j, cos) in row_hits {
                neighbors
                    .entry(covered[i].clone())
                    .or_default()
                    .push((covered[j].clone(), cos));
                neighbors
                    .entry(covered[j].clone())
                    .or_default()
                    .push((covered[i].clone(), cos));
            }
        }
        for list in neighbors.values_mut() {
            list.sort_by(|(wa, ca), (wb, cb)| cb.total_cmp(ca).then_with(|| wa.cmp(wb)));
        }
        Ok(Self {
            threshold,
            neighbors,
        })
    }

    pub fn empty(threshold: f32) -> Self {
        Self {
            threshold,
            neighbors: HashMap::new(),
        }
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    /// Neighbors sorted by similarity descending, then word ascending.
    pub fn neighbors(&self, word: &str) -> &[(String, f32)] {
        self.neighbors.get(word).map_or(&[], Vec::as_slice)
    }

    pub fn word_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let json = serde_json::to_string_pretty(self).expect("index serializes");
        fs::write(path, json).map_err(|source| EmbeddingError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let raw = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|e| EmbeddingError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, &[f32])]) -> WordEmbeddingTable {
        WordEmbeddingTable::from_pairs(
            entries
                .iter()
                .map(|(w, v)| ((*w).to_owned(), v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_hand_values() {
        let t = table(&[
            ("east", &[1.0, 0.0]),
            ("north", &[0.0, 1.0]),
            ("east2", &[2.0, 0.0]),
            ("west", &[-1.0, 0.0]),
        ]);
        assert!((t.cosine("east", "north").unwrap() - 0.0).abs() < 1e-6);
        assert!((t.cosine("east", "east2").unwrap() - 1.0).abs() < 1e-6);
        assert!((t.cosine("east", "west").unwrap() + 1.0).abs() < 1e-6);
        assert!((t.cosine("east", "east").unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(t.cosine("east", "missing"), None);
    }

    #[test]
    fn zero_vector_is_similar_to_nothing() {
        let t = table(&[("zero", &[0.0, 0.0]), ("one", &[1.0, 0.0])]);
        assert_eq!(t.cosine("zero", "one"), Some(0.0));
        assert_eq!(t.cosine("zero", "zero"), Some(0.0));
    }

    #[test]
    fn load_parses_header_format() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "2 3\nhaus 1.0 0.0 0.5\ngarten 0.5 0.5 0.5\n").unwrap();
        let t = WordEmbeddingTable::load(f.path()).unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        assert!(t.contains("haus") && t.contains("garten"));
        assert_eq!(t.vector("haus").unwrap()[2], 0.5);
    }

    #[test]
    fn load_rejects_declared_count_mismatch() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "3 2\na 1 0\nb 0 1\n").unwrap();
        assert!(matches!(
            WordEmbeddingTable::load(f.path()),
            Err(EmbeddingError::CountMismatch {
                declared: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn load_rejects_ragged_rows_with_line_number() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "2 3\na 1 0 0\nb 0 1\n").unwrap();
        match WordEmbeddingTable::load(f.path()) {
            Err(EmbeddingError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_duplicates_and_non_finite() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "2 2\na 1 0\na 0 1\n").unwrap();
        assert!(matches!(
            WordEmbeddingTable::load(f.path()),
            Err(EmbeddingError::DuplicateWord { .. })
        ));
        std::fs::write(f.path(), "1 2\na 1 NaN\n").unwrap();
        assert!(matches!(
            WordEmbeddingTable::load(f.path()),
            Err(EmbeddingError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let t = table(&[("haus", &[1.0, 0.25]), ("baum", &[-0.5, 2.0])]);
        let f = tempfile::NamedTempFile::new().unwrap();
        t.save(f.path()).unwrap();
        let back = WordEmbeddingTable::load(f.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.vector("baum").unwrap().to_vec(), vec![-0.5, 2.0]);
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| (*w).to_owned()).collect()
    }

    #[test]
    fn index_thresholds_and_excludes_self() {
        let t = table(&[
            ("regen", &[1.0, 0.0]),
            ("schauer", &[0.9, 0.2]),
            ("sonne", &[-1.0, 0.1]),
        ]);
        let idx =
            SimilarityIndex::build(&t, &words(&["regen", "schauer", "sonne"]), 0.6).unwrap();
        let n = idx.neighbors("regen");
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].0, "schauer");
        assert!(n[0].1 >= 0.6);
        assert!(idx.neighbors("sonne").is_empty());
        assert!(idx.neighbors("regen").iter().all(|(w, _)| w != "regen"));
    }

    #[test]
    fn index_skips_words_without_vectors() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[1.0, 0.0])]);
        let idx = SimilarityIndex::build(&t, &words(&["a", "b", "ghost"]), 0.5).unwrap();
        assert_eq!(idx.neighbors("a").len(), 1);
        assert!(idx.neighbors("ghost").is_empty());
    }

    #[test]
    fn index_rejects_bad_threshold() {
        let t = table(&[("a", &[1.0])]);
        assert!(SimilarityIndex::build(&t, &words(&["a"]), 1.5).is_err());
        assert!(SimilarityIndex::build(&t, &words(&["a"]), f32::NAN).is_err());
    }

    #[test]
    fn index_round_trips_through_json() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.8, 0.6]), ("c", &[0.0, 1.0])]);
        let idx = SimilarityIndex::build(&t, &words(&["a", "b", "c"]), 0.3).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        idx.save(f.path()).unwrap();
        let back = SimilarityIndex::load(f.path()).unwrap();
        assert_eq!(back.threshold(), idx.threshold());
        assert_eq!(back.neighbors("a"), idx.neighbors("a"));
        assert_eq!(back.neighbors("b"), idx.neighbors("b"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_table() -> impl Strategy<Value = WordEmbeddingTable> {
            proptest::collection::vec(
                proptest::collection::vec(-1.0f32..1.0, 3),
                2..10,
            )
            .prop_map(|rows| {
                WordEmbeddingTable::from_pairs(
                    rows.into_iter()
                        .enumerate()
                        .map(|(i, v)| (format!("w{i}"), v))
                        .collect(),
                )
                .unwrap()
            })
        }

        proptest! {
            #[test]
            fn index_is_exactly_symmetric(t in arb_table(), threshold in -0.5f32..0.9) {
                let all: Vec<String> = (0..t.len()).map(|i| format!("w{i}")).collect();
                let idx = SimilarityIndex::build(&t, &all, threshold).unwrap();
                for w in &all {
                    for (other, cos) in idx.neighbors(w) {
                        prop_assert!(*cos >= threshold);
                        prop_assert_ne!(other, w);
                        let mirrored = idx
                            .neighbors(other)
                            .iter()
                            .find(|(back, _)| back == w)
                            .map(|(_, c)| *c);
                        prop_assert_eq!(mirrored, Some(*cos));
                    }
                }
            }

            #[test]
            fn cosine_is_bounded(t in arb_table()) {
                for i in 0..t.len() {
                    for j in 0..t.len() {
                        let c = t.cosine(&format!("w{i}"), &format!("w{j}")).unwrap();
                        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
                    }
                }
            }
        }
    }
}
