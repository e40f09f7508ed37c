//! Sequence preparation and token-budget batching. Pairs are encoded once
//! up front; batches group pairs of similar target length under a token
//! budget and are reshuffled every epoch from the run seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::ParallelPair;
use crate::tokenizer::{BpeModel, BOS, EOS};

/// Which way the pair is translated. The reverse direction drives
/// back-translation models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    GlossToText,
    TextToGloss,
}

impl Direction {
    /// (source text, target text) for one pair under this direction.
    pub fn sides(self, pair: &ParallelPair) -> (String, String) {
        match self {
            Direction::GlossToText => (pair.gloss_joined(), pair.text.clone()),
            Direction::TextToGloss => (pair.text.clone(), pair.gloss_joined()),
        }
    }
}

/// One training pair encoded for teacher forcing: the source ends with the
/// end marker, the decoder input starts with the start marker, and
/// `tgt_out[i]` is the prediction target for position i. `starts[i]` says
/// whether that target token begins a word (the end marker does not).
#[derive(Debug, Clone)]
pub struct PackedPair {
    pub index: usize,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub starts: Vec<bool>,
}

impl PackedPair {
    pub fn token_cost(&self) -> usize {
        self.src.len() + self.tgt_in.len()
    }
}

pub fn pack_pair(
    tokenizer: &BpeModel,
    index: usize,
    source: &str,
    target: &str,
) -> PackedPair {
    let src_seq = tokenizer.encode_sentence(source);
    let tgt_seq = tokenizer.encode_sentence(target);
    let mut src = src_seq.ids;
    src.push(EOS);
    let mut tgt_in = Vec::with_capacity(tgt_seq.ids.len() + 1);
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(&tgt_seq.ids);
    let mut tgt_out = tgt_seq.ids;
    tgt_out.push(EOS);
    let mut starts = tgt_seq.word_start;
    starts.push(false);
    PackedPair {
        index,
        src,
        tgt_in,
        tgt_out,
        starts,
    }
}

pub fn pack_pairs(
    tokenizer: &BpeModel,
    pairs: &[ParallelPair],
    direction: Direction,
) -> Vec<PackedPair> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let (source, target) = direction.sides(pair);
            pack_pair(tokenizer, i, &source, &target)
        })
        .collect()
}

/// Groups pair indices into batches of at most `budget` combined source and
/// decoder-input tokens. A pair larger than the budget still gets its own
/// batch. Composition varies by epoch, length grouping is preserved, and
/// the result depends only on (pairs, budget, seed, epoch).
pub fn make_batches(
    pairs: &[PackedPair],
    budget: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
    order.shuffle(&mut rng);
    // Stable sort by coarse target length keeps the shuffle's variety inside
    // each length group.
    order.sort_by_key(|&i| pairs[i].tgt_in.len() / 4);
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0;
    for i in order {
        let cost = pairs[i].token_cost();
        if !current.is_empty() && used + cost > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += cost;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}
