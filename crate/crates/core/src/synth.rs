//! Deterministic synthetic corpora, embeddings, and similarity structure
//! for capability checks and benches. The main task is word-order reversal:
//! the gloss side of each pair is the text side uppercased and reversed, so
//! translation quality is exactly measurable and the data needs no files.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Origin, ParallelPair};
use crate::embeddings::{SimilarityIndex, WordEmbeddingTable};

/// Lowercase vocabulary in similarity groups: words in one group get nearby
/// embedding vectors, words across groups get independent ones.
const WORD_GROUPS: &[&[&str]] = &[
    &["regen", "schauer"],
    &["sonne", "sonnig"],
    &["wind", "sturm"],
    &["wolke", "nebel"],
    &["schnee", "frost"],
    &["morgen", "frueh"],
    &["abend", "nacht"],
    &["warm", "heiss"],
    &["kalt", "kuehl"],
    &["nord", "ost"],
    &["sued", "west"],
    &["heute"],
    &["montag"],
    &["dienstag"],
    &["gewitter"],
    &["grad"],
    &["temperatur"],
    &["himmel"],
    &["land"],
    &["berg"],
];

/// All vocabulary words in declaration order.
pub fn vocabulary() -> Vec<String> {
    WORD_GROUPS
        .iter()
        .flat_map(|g| g.iter().map(|w| w.to_string()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<ParallelPair>,
    pub dev: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
}

impl SynthCorpus {
    /// Both sides of every pair, for tokenizer training.
    pub fn all_sentences(&self) -> Vec<String> {
        let mut out = Vec::new();
        for pair in self
            .train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
        {
            out.push(pair.text.clone());
            out.push(pair.gloss_joined());
        }
        out
    }
}

/// Unique word-index sequences of length 3 to 8, deterministic in the seed.
fn word_sequences(total: usize, seed: u64) -> Vec<Vec<usize>> {
    let vocab = vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut sequences = Vec::with_capacity(total);
    while sequences.len() < total {
        let len = rng.random_range(3..=8);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab.len())).collect();
        if seen.insert(seq.clone()) {
            sequences.push(seq);
        }
    }
    sequences
}

fn build_corpus(total: usize, seed: u64, gloss_of: impl Fn(&[&str]) -> Vec<String>) -> SynthCorpus {
    assert!(total >= 30, "corpus needs room for dev and test splits");
    let vocab = vocabulary();
    let held = (total / 10).clamp(10, 30);
    let pairs: Vec<ParallelPair> = word_sequences(total, seed)
        .into_iter()
        .enumerate()
        .map(|(i, seq)| {
            let words: Vec<&str> = seq.iter().map(|&w| vocab[w].as_str()).collect();
            ParallelPair {
                id: format!("synth-{i:04}"),
                gloss: gloss_of(&words),
                text: words.join(" "),
                origin: Origin::Gold,
            }
        })
        .collect();
    let train_end = total - 2 * held;
    SynthCorpus {
        train: pairs[..train_end].to_vec(),
        dev: pairs[train_end..train_end + held].to_vec(),
        test: pairs[train_end + held..].to_vec(),
    }
}

/// Gloss-to-text reversal task: the gloss is the text uppercased with word
/// order reversed. Splits are disjoint because every text is unique.
pub fn reversal_corpus(total: usize, seed: u64) -> SynthCorpus {
    build_corpus(total, seed, |words| {
        words.iter().rev().map(|w| w.to_uppercase()).collect()
    })
}

/// Bilingual pivot task for the self-pivot paraphraser: the "pivot
/// language" side is the text with word order reversed, case unchanged.
pub fn pivot_corpus(total: usize, seed: u64) -> SynthCorpus {
    build_corpus(total, seed, |words| {
        words.iter().rev().map(|w| w.to_string()).collect()
    })
}

/// Unit-norm embeddings where words sharing a group stay close (cosine near
/// one) and other pairs are near-orthogonal. Each word's uppercase form
/// carries the identical vector, so either translation direction can smooth
/// over its target vocabulary.
pub fn synthetic_embeddings(dim: usize, seed: u64) -> WordEmbeddingTable {
    assert!(dim >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = |base: Option<&Vec<f32>>| -> Vec<f32> {
        let jitter = if base.is_some() { 0.15 } else { 1.0 };
        let mut v: Vec<f32> = (0..dim)
            .map(|j| {
                let noise = rng.random_range(-1.0f32..1.0) * jitter;
                base.map_or(0.0, |b| b[j]) + noise
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };
    let mut entries = Vec::new();
    for group in WORD_GROUPS {
        let base = unit(None);
        for word in *group {
            let vector = unit(Some(&base));
            entries.push((word.to_string(), vector.clone()));
            entries.push((word.to_uppercase(), vector));
        }
    }
    WordEmbeddingTable::from_pairs(entries).expect("constant vocabulary is well formed")
}

/// Similarity index over the whole synthetic vocabulary, both cases.
pub fn synthetic_index(threshold: f32, seed: u64) -> SimilarityIndex {
    let table = synthetic_embeddings(16, seed);
    let mut words = vocabulary();
    let upper: Vec<String> = words.iter().map(|w| w.to_uppercase()).collect();
    words.extend(upper);
    SimilarityIndex::build(&table, &words, threshold).expect("threshold in range")
}
