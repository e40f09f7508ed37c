//! Byte-pair tokenizer over whitespace-split words, with word-start tracking.
//!
//! Pair statistics are collected on raw substrings, ignoring position inside
//! the word, so one merge table serves both positions. The vocabulary stores
//! word-start and continuation occurrences of a substring as distinct ids;
//! continuation surfaces carry a leading `#`. The marker character is
//! reserved: a literal `#` in input text always encodes to the unknown id.
//!
//! Encoding replays merges lowest rank first, left to right within a word,
//! and skips an occurrence when the merged substring was never seen at that
//! position during training, so every produced id exists in the vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const MARKER: char = '#';

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary budget {requested} cannot hold {minimum} specials and base symbols")]
    VocabTooSmall { minimum: usize, requested: usize },
    #[error("cannot train a tokenizer on an empty corpus")]
    EmptyCorpus,
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
    #[error("malformed tokenizer file: {0}")]
    Malformed(String),
}

/// Token ids with a per-position flag telling whether the token begins a word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub word_start: Vec<bool>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// In-word symbol during training and encoding. `known` is false only for the
/// reserved marker character, which can never become a vocabulary item.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Sym {
    raw: String,
    start: bool,
    known: bool,
}

fn word_symbols(word: &str) -> Vec<Sym> {
    word.chars()
        .enumerate()
        .map(|(i, c)| Sym {
            raw: c.to_string(),
            start: i == 0,
            known: c != MARKER,
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ModelFile {
    vocab_budget: usize,
    surfaces: Vec<String>,
    merges: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct BpeModel {
    vocab_budget: usize,
    /// Surface per id; continuation variants are stored with a `#` prefix.
    surfaces: Vec<String>,
    /// (raw substring, begins word) to id.
    variant_ids: HashMap<(String, bool), u32>,
    /// Merge rules in rank order, raw substrings.
    merges: Vec<(String, String)>,
}

impl BpeModel {
    /// Learns merges from whitespace-split sentences until the id budget is
    /// reached or no adjacent pair remains.
    pub fn train(sentences: &[String], vocab_budget: usize) -> Result<Self, TokenizerError> {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for sentence in sentences {
            for word in sentence.split_whitespace() {
                *freq.entry(word).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        // Sorted so iteration order, and with it id assignment, is reproducible.
        let mut words: Vec<(Vec<Sym>, u64)> = {
            let mut entries: Vec<(&str, u64)> = freq.into_iter().collect();
            entries.sort_unstable();
            entries
                .into_iter()
                .map(|(w, n)| (word_symbols(w), n))
                .collect()
        };

        let mut surfaces: Vec<String> = SPECIALS.iter().map(|s| (*s).to_owned()).collect();
        let mut variant_ids: HashMap<(String, bool), u32> = HashMap::new();
        let base: BTreeSet<(String, bool)> = words
            .iter()
            .flat_map(|(syms, _)| syms.iter())
            .filter(|s| s.known)
            .map(|s| (s.raw.clone(), !s.start))
            .collect();
        for (raw, cont) in base {
            register(&mut surfaces, &mut variant_ids, raw, !cont);
        }
        let minimum = surfaces.len();
        if vocab_budget < minimum {
            return Err(TokenizerError::VocabTooSmall {
                minimum,
                requested: vocab_budget,
            });
        }

        let mut merges: Vec<(String, String)> = Vec::new();
        while surfaces.len() < vocab_budget {
            let Some((left, right)) = best_pair(&words) else {
                break;
            };
            // Dry run over application sites: which positions would the merged
            // substring occupy, and how many fresh ids does that cost?
            let mut starts = BTreeSet::new();
            for (syms, _) in &words {
                scan_merge(syms, &left, &right, |at| {
                    starts.insert(syms[at].start);
                });
            }
            let merged_raw = format!("{left}{right}");
            let fresh = starts
                .iter()
                .filter(|s| !variant_ids.contains_key(&(merged_raw.clone(), **s)))
                .count();
            if surfaces.len() + fresh > vocab_budget {
                break;
            }
            for start in starts.iter().rev() {
                if !variant_ids.contains_key(&(merged_raw.clone(), *start)) {
                    register(&mut surfaces, &mut variant_ids, merged_raw.clone(), *start);
                }
            }
            for (syms, _) in &mut words {
                *syms = apply_merge(syms, &left, &right, None);
            }
            merges.push((left, right));
        }

        Ok(Self {
            vocab_budget,
            surfaces,
            variant_ids,
            merges,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn vocab_budget(&self) -> usize {
        self.vocab_budget
    }

    pub fn merge_rules(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    /// Whether an id renders at the start of a word. Specials return None.
    pub fn id_starts_word(&self, id: u32) -> Option<bool> {
        if id < SPECIALS.len() as u32 {
            return None;
        }
        self.surface(id).map(|s| !s.starts_with(MARKER))
    }

    fn encode_word(&self, word: &str) -> Vec<(u32, bool)> {
        let mut syms = word_symbols(word);
        for (left, right) in &self.merges {
            syms = apply_merge(&syms, left, right, Some(&self.variant_ids));
        }
        syms.iter()
            .map(|s| {
                let id = if s.known {
                    self.variant_ids
                        .get(&(s.raw.clone(), s.start))
                        .copied()
                        .unwrap_or(UNK)
                } else {
                    UNK
                };
                (id, s.start)
            })
            .collect()
    }

    pub fn encode_sentence(&self, sentence: &str) -> TokenizedSequence {
        let mut ids = Vec::new();
        let mut word_start = Vec::new();
        for word in sentence.split_whitespace() {
            for (id, start) in self.encode_word(word) {
                ids.push(id);
                word_start.push(start);
            }
        }
        TokenizedSequence { ids, word_start }
    }

    /// First id a word encodes to. UNK when the word is empty or opens with an
    /// unknown character.
    pub fn first_token_of(&self, word: &str) -> u32 {
        self.encode_word(word).first().map_or(UNK, |(id, _)| *id)
    }

    /// Reassembles text. Pad, sequence delimiters, and unknowns vanish except
    /// that an unknown at word-start renders as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            if id == UNK {
                words.push("<unk>".to_owned());
                continue;
            }
            let Some(surface) = self.surface(id) else {
                continue;
            };
            match surface.strip_prefix(MARKER) {
                Some(rest) => match words.last_mut() {
                    Some(w) => w.push_str(rest),
                    None => words.push(rest.to_owned()),
                },
                None => words.push(surface.to_owned()),
            }
        }
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let file = ModelFile {
            vocab_budget: self.vocab_budget,
            surfaces: self.surfaces.clone(),
            merges: self.merges.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("tokenizer model serializes");
        fs::write(path, json).map_err(|source| TokenizerError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let raw = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ModelFile =
            serde_json::from_str(&raw).map_err(|e| TokenizerError::Malformed(e.to_string()))?;
        if file.surfaces.len() < SPECIALS.len()
            || file.surfaces[..SPECIALS.len()] != SPECIALS.map(str::to_owned)
        {
            return Err(TokenizerError::Malformed(
                "special ids 0..4 must be <pad>, <bos>, <eos>, <unk>".into(),
            ));
        }
        let mut variant_ids = HashMap::new();
        for (id, surface) in file.surfaces.iter().enumerate().skip(SPECIALS.len()) {
            let (raw, start) = match surface.strip_prefix(MARKER) {
                Some(rest) => (rest.to_owned(), false),
                None => (surface.clone(), true),
            };
            if raw.is_empty() {
                return Err(TokenizerError::Malformed(format!("empty surface at id {id}")));
            }
            if variant_ids.insert((raw, start), id as u32).is_some() {
                return Err(TokenizerError::Malformed(format!(
                    "duplicate surface '{surface}'"
                )));
            }
        }
        Ok(Self {
            vocab_budget: file.vocab_budget,
            surfaces: file.surfaces,
            variant_ids,
            merges: file.merges,
        })
    }
}

fn register(
    surfaces: &mut Vec<String>,
    variant_ids: &mut HashMap<(String, bool), u32>,
    raw: String,
    start: bool,
) {
    let surface = if start {
        raw.clone()
    } else {
        format!("{MARKER}{raw}")
    };
    let id = surfaces.len() as u32;
    surfaces.push(surface);
    variant_ids.insert((raw, start), id);
}

/// Highest-count adjacent pair; ties break toward the lexicographically
/// smaller concatenation, then the smaller pair.
fn best_pair(words: &[(Vec<Sym>, u64)]) -> Option<(String, String)> {
    let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
    for (syms, n) in words {
        for window in syms.windows(2) {
            if window[0].known && window[1].known {
                *counts
                    .entry((window[0].raw.as_str(), window[1].raw.as_str()))
                    .or_insert(0) += n;
            }
        }
    }
    counts
        .into_iter()
        .min_by(|((al, ar), an), ((bl, br), bn)| {
            bn.cmp(an)
                .then_with(|| format!("{al}{ar}").cmp(&format!("{bl}{br}")))
                .then_with(|| (al, ar).cmp(&(bl, br)))
        })
        .map(|((l, r), _)| (l.to_owned(), r.to_owned()))
}

/// Calls `site` for each position a greedy left-to-right pass would merge.
fn scan_merge(syms: &[Sym], left: &str, right: &str, mut site: impl FnMut(usize)) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i].known && syms[i + 1].known && syms[i].raw == left && syms[i + 1].raw == right {
            site(i);
            i += 2;
        } else {
            i += 1;
        }
    }
}

/// Applies one merge rule greedily left to right. With `vocab` given, an
/// occurrence is merged only if the result exists at that word position.
fn apply_merge(
    syms: &[Sym],
    left: &str,
    right: &str,
    vocab: Option<&HashMap<(String, bool), u32>>,
) -> Vec<Sym> {
    let mut out: Vec<Sym> = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        let here = &syms[i];
        if i + 1 < syms.len()
            && here.known
            && syms[i + 1].known
            && here.raw == left
            && syms[i + 1].raw == right
        {
            let merged = format!("{left}{right}");
            let admitted = match vocab {
                Some(v) => v.contains_key(&(merged.clone(), here.start)),
                None => true,
            };
            if admitted {
                out.push(Sym {
                    raw: merged,
                    start: here.start,
                    known: true,
                });
                i += 2;
                continue;
            }
        }
        out.push(here.clone());
        i += 1;
    }
    out
}
