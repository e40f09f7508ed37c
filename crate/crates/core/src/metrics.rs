//! Corpus evaluation: BLEU-1..4, ROUGE-L, chrF++, token-length ratio, and
//! bucketed F-measure tables.
//!
//! All metrics tokenize by whitespace on already-normalized text; nothing is
//! retokenized here. Per-pair statistics are gathered in parallel and reduced
//! in pair order, so scores do not depend on thread count.

use std::collections::HashMap;

use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("got {hyps} hypotheses for {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("n-gram order {0} outside 1..=4")]
    BadOrder(usize),
}

const BLEU_ORDERS: usize = 4;
const CHAR_ORDERS: usize = 6;
const WORD_ORDERS: usize = 2;
const CHRF_ORDERS: usize = CHAR_ORDERS + WORD_ORDERS;
const ROUGE_BETA_SQ: f64 = 1.2 * 1.2;
const CHRF_BETA_SQ: f64 = 2.0 * 2.0;

/// Corpus-level scores, each in [0, 100] except the ratio.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub chrf_pp: f64,
    /// Output token total over reference token total.
    pub length_ratio: f64,
    pub out_tokens: usize,
    pub ref_tokens: usize,
}

impl EvalReport {
    pub fn bleu(&self, n: usize) -> f64 {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4][n - 1]
    }

    /// Flat `key = value` rendering.
    pub fn to_text(&self) -> String {
        format!(
            "bleu1 = {:.2}\nbleu2 = {:.2}\nbleu3 = {:.2}\nbleu4 = {:.2}\n\
             rouge_l = {:.2}\nchrf_pp = {:.2}\nlength_ratio = {:.4}\n\
             out_tokens = {}\nref_tokens = {}\n",
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l,
            self.chrf_pp,
            self.length_ratio,
            self.out_tokens,
            self.ref_tokens,
        )
    }
}

#[derive(Debug, Clone, Default)]
struct PairStats {
    bleu_matches: [u64; BLEU_ORDERS],
    bleu_totals: [u64; BLEU_ORDERS],
    hyp_tokens: u64,
    ref_tokens: u64,
    rouge_f: f64,
    chrf_matches: [u64; CHRF_ORDERS],
    chrf_hyp: [u64; CHRF_ORDERS],
    chrf_ref: [u64; CHRF_ORDERS],
}

fn clipped_matches<T: Eq + std::hash::Hash>(hyp: &[T], rf: &[T], n: usize) -> (u64, u64) {
    if hyp.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[T], u64> = HashMap::new();
    if rf.len() >= n {
        for gram in rf.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut matches = 0;
    for gram in hyp.windows(n) {
        if let Some(left) = ref_counts.get_mut(gram) {
            if *left > 0 {
                *left -= 1;
                matches += 1;
            }
        }
    }
    (matches, (hyp.len() - n + 1) as u64)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn fbeta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let den = recall + beta_sq * precision;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    }
}

fn pair_stats(hyp: &str, rf: &str) -> PairStats {
    let hyp_words: Vec<&str> = hyp.split_whitespace().collect();
    let ref_words: Vec<&str> = rf.split_whitespace().collect();
    let mut s = PairStats {
        hyp_tokens: hyp_words.len() as u64,
        ref_tokens: ref_words.len() as u64,
        ..PairStats::default()
    };
    for n in 1..=BLEU_ORDERS {
        let (m, t) = clipped_matches(&hyp_words, &ref_words, n);
        s.bleu_matches[n - 1] = m;
        s.bleu_totals[n - 1] = t;
    }

    let lcs = lcs_len(&hyp_words, &ref_words);
    if lcs > 0 {
        let p = lcs as f64 / hyp_words.len() as f64;
        let r = lcs as f64 / ref_words.len() as f64;
        s.rouge_f = fbeta(p, r, ROUGE_BETA_SQ);
    }

    let hyp_chars: Vec<char> = hyp_words.concat().chars().collect();
    let ref_chars: Vec<char> = ref_words.concat().chars().collect();
    for n in 1..=CHAR_ORDERS {
        let (m, t) = clipped_matches(&hyp_chars, &ref_chars, n);
        s.chrf_matches[n - 1] = m;
        s.chrf_hyp[n - 1] = t;
        s.chrf_ref[n - 1] = ref_chars.len().saturating_sub(n - 1) as u64;
    }
    for n in 1..=WORD_ORDERS {
        let (m, t) = clipped_matches(&hyp_words, &ref_words, n);
        let k = CHAR_ORDERS + n - 1;
        s.chrf_matches[k] = m;
        s.chrf_hyp[k] = t;
        s.chrf_ref[k] = ref_words.len().saturating_sub(n - 1) as u64;
    }
    s
}

fn corpus_stats(hyps: &[String], refs: &[String]) -> Result<Vec<PairStats>, MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(par::map_indexed(hyps.len(), |i| {
        pair_stats(&hyps[i], &refs[i])
    }))
}

fn bleu_from_stats(stats: &[PairStats], n: usize) -> f64 {
    let mut log_sum = 0.0;
    for k in 0..n {
        let matches: u64 = stats.iter().map(|s| s.bleu_matches[k]).sum();
        let total: u64 = stats.iter().map(|s| s.bleu_totals[k]).sum();
        if matches == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (matches as f64 / total as f64).ln();
    }
    let out: u64 = stats.iter().map(|s| s.hyp_tokens).sum();
    let rf: u64 = stats.iter().map(|s| s.ref_tokens).sum();
    let bp = (1.0 - rf as f64 / out as f64).min(0.0).exp();
    100.0 * bp * (log_sum / n as f64).exp()
}

fn rouge_from_stats(stats: &[PairStats]) -> f64 {
    100.0 * stats.iter().map(|s| s.rouge_f).sum::<f64>() / stats.len() as f64
}

fn chrf_from_stats(stats: &[PairStats]) -> f64 {
    let mut sum = 0.0;
    let mut orders = 0;
    for k in 0..CHRF_ORDERS {
        let matches: u64 = stats.iter().map(|s| s.chrf_matches[k]).sum();
        let hyp: u64 = stats.iter().map(|s| s.chrf_hyp[k]).sum();
        let rf: u64 = stats.iter().map(|s| s.chrf_ref[k]).sum();
        if hyp == 0 && rf == 0 {
            continue;
        }
        let p = if hyp == 0 {
            0.0
        } else {
            matches as f64 / hyp as f64
        };
        let r = if rf == 0 {
            0.0
        } else {
            matches as f64 / rf as f64
        };
        sum += fbeta(p, r, CHRF_BETA_SQ);
        orders += 1;
    }
    if orders == 0 {
        0.0
    } else {
        100.0 * sum / f64::from(orders)
    }
}

/// Corpus BLEU at order `n`: clipped modified precisions geometrically
/// averaged over orders 1..=n times the brevity penalty, in [0, 100]. A zero
/// precision at any order zeroes the score; there is no smoothing.
pub fn bleu_n(hyps: &[String], refs: &[String], n: usize) -> Result<f64, MetricsError> {
    if !(1..=BLEU_ORDERS).contains(&n) {
        return Err(MetricsError::BadOrder(n));
    }
    Ok(bleu_from_stats(&corpus_stats(hyps, refs)?, n))
}

/// Mean per-sentence LCS F-measure (recall weighted 1.2), in [0, 100].
pub fn rouge_l(hyps: &[String], refs: &[String]) -> Result<f64, MetricsError> {
    Ok(rouge_from_stats(&corpus_stats(hyps, refs)?))
}

/// Character 1..6-gram and word 1..2-gram F-scores (recall weight 2),
/// corpus-summed per order, averaged over orders present in the corpus,
/// in [0, 100]. Character n-grams ignore whitespace.
pub fn chrf_pp(hyps: &[String], refs: &[String]) -> Result<f64, MetricsError> {
    Ok(chrf_from_stats(&corpus_stats(hyps, refs)?))
}

/// Whitespace token totals: (out/ref ratio, out total, ref total).
pub fn length_ratio(
    hyps: &[String],
    refs: &[String],
) -> Result<(f64, usize, usize), MetricsError> {
    let stats = corpus_stats(hyps, refs)?;
    let out: u64 = stats.iter().map(|s| s.hyp_tokens).sum();
    let rf: u64 = stats.iter().map(|s| s.ref_tokens).sum();
    let ratio = if rf == 0 {
        0.0
    } else {
        out as f64 / rf as f64
    };
    Ok((ratio, out as usize, rf as usize))
}

/// All corpus scores in one pass over the pair statistics.
pub fn evaluate(hyps: &[String], refs: &[String]) -> Result<EvalReport, MetricsError> {
    let stats = corpus_stats(hyps, refs)?;
    let out: u64 = stats.iter().map(|s| s.hyp_tokens).sum();
    let rf: u64 = stats.iter().map(|s| s.ref_tokens).sum();
    Ok(EvalReport {
        bleu1: bleu_from_stats(&stats, 1),
        bleu2: bleu_from_stats(&stats, 2),
        bleu3: bleu_from_stats(&stats, 3),
        bleu4: bleu_from_stats(&stats, 4),
        rouge_l: rouge_from_stats(&stats),
        chrf_pp: chrf_from_stats(&stats),
        length_ratio: if rf == 0 { 0.0 } else { out as f64 / rf as f64 },
        out_tokens: out as usize,
        ref_tokens: rf as usize,
    })
}

pub const FREQUENCY_BUCKETS: [(&str, u64, u64); 7] = [
    ("0", 0, 0),
    ("1", 1, 1),
    ("2-4", 2, 4),
    ("5-9", 5, 9),
    ("10-99", 10, 99),
    ("100-999", 100, 999),
    (">=1000", 1000, u64::MAX),
];

pub const LENGTH_BUCKETS: [(&str, u64, u64); 4] = [
    ("<10", 0, 9),
    ("10-19", 10, 19),
    ("20-29", 20, 29),
    (">=30", 30, u64::MAX),
];

/// One frequency bucket of the word F-measure table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct WordBucketRow {
    pub bucket: &'static str,
    /// None when neither side produced a word of this bucket.
    pub fmeasure: Option<f64>,
    pub matches: u64,
    pub out_total: u64,
    pub ref_total: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct WordBucketTable {
    pub rows: Vec<WordBucketRow>,
}

impl WordBucketTable {
    pub fn row(&self, bucket: &str) -> &WordBucketRow {
        self.rows
            .iter()
            .find(|r| r.bucket == bucket)
            .expect("bucket labels are fixed")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bucket\tf_measure\tmatches\tout_total\tref_total\n");
        for r in &self.rows {
            let f = r.fmeasure.map_or(String::new(), |f| format!("{f:.4}"));
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.bucket, f, r.matches, r.out_total, r.ref_total
            ));
        }
        out
    }
}

fn frequency_bucket(freq: u64) -> usize {
    FREQUENCY_BUCKETS
        .iter()
        .position(|(_, lo, hi)| (*lo..=*hi).contains(&freq))
        .expect("buckets cover all frequencies")
}

fn bag(words: &[&str]) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for w in words {
        *counts.entry((*w).to_owned()).or_insert(0) += 1;
    }
    counts
}

/// Bag-of-words F-measure per training-frequency bucket. Words never seen in
/// `train_texts` fall into the "0" bucket.
pub fn word_fmeasure_buckets(
    hyps: &[String],
    refs: &[String],
    train_texts: &[String],
) -> Result<WordBucketTable, MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for text in train_texts {
        for w in text.split_whitespace() {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    let mut matches = [0u64; FREQUENCY_BUCKETS.len()];
    let mut out_total = [0u64; FREQUENCY_BUCKETS.len()];
    let mut ref_total = [0u64; FREQUENCY_BUCKETS.len()];
    for (hyp, rf) in hyps.iter().zip(refs) {
        let hyp_bag = bag(&hyp.split_whitespace().collect::<Vec<_>>());
        let ref_bag = bag(&rf.split_whitespace().collect::<Vec<_>>());
        for (word, count) in &hyp_bag {
            let b = frequency_bucket(freq.get(word.as_str()).copied().unwrap_or(0));
            out_total[b] += count;
            let m = (*count).min(ref_bag.get(word).copied().unwrap_or(0));
            matches[b] += m;
        }
        for (word, count) in &ref_bag {
            let b = frequency_bucket(freq.get(word.as_str()).copied().unwrap_or(0));
            ref_total[b] += count;
        }
    }
    let rows = FREQUENCY_BUCKETS
        .iter()
        .enumerate()
        .map(|(b, (label, _, _))| {
            let fmeasure = if out_total[b] == 0 && ref_total[b] == 0 {
                None
            } else {
                let p = if out_total[b] == 0 {
                    0.0
                } else {
                    matches[b] as f64 / out_total[b] as f64
                };
                let r = if ref_total[b] == 0 {
                    0.0
                } else {
                    matches[b] as f64 / ref_total[b] as f64
                };
                Some(fbeta(p, r, 1.0))
            };
            WordBucketRow {
                bucket: label,
                fmeasure,
                matches: matches[b],
                out_total: out_total[b],
                ref_total: ref_total[b],
            }
        })
        .collect();
    Ok(WordBucketTable { rows })
}

/// One reference-length bucket of the sentence F-measure table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LengthBucketRow {
    pub bucket: &'static str,
    /// Mean per-sentence unigram F-measure; None for an empty bucket.
    pub fmeasure: Option<f64>,
    pub sentences: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LengthBucketTable {
    pub rows: Vec<LengthBucketRow>,
}

impl LengthBucketTable {
    pub fn row(&self, bucket: &str) -> &LengthBucketRow {
        self.rows
            .iter()
            .find(|r| r.bucket == bucket)
            .expect("bucket labels are fixed")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bucket\tf_measure\tsentences\n");
        for r in &self.rows {
            let f = r.fmeasure.map_or(String::new(), |f| format!("{f:.4}"));
            out.push_str(&format!("{}\t{}\t{}\n", r.bucket, f, r.sentences));
        }
        out
    }
}

/// Mean sentence-level unigram F-measure, bucketed by reference token count.
pub fn sentence_fmeasure_by_length(
    hyps: &[String],
    refs: &[String],
) -> Result<LengthBucketTable, MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut sums = [0.0f64; LENGTH_BUCKETS.len()];
    let mut counts = [0u64; LENGTH_BUCKETS.len()];
    for (hyp, rf) in hyps.iter().zip(refs) {
        let hyp_words: Vec<&str> = hyp.split_whitespace().collect();
        let ref_words: Vec<&str> = rf.split_whitespace().collect();
        let b = LENGTH_BUCKETS
            .iter()
            .position(|(_, lo, hi)| (*lo..=*hi).contains(&(ref_words.len() as u64)))
            .expect("buckets cover all lengths");
        let hyp_bag = bag(&hyp_words);
        let ref_bag = bag(&ref_words);
        let m: u64 = hyp_bag
            .iter()
            .map(|(w, c)| (*c).min(ref_bag.get(w).copied().unwrap_or(0)))
            .sum();
        let f = if hyp_words.is_empty() || ref_words.is_empty() || m == 0 {
            0.0
        } else {
            let p = m as f64 / hyp_words.len() as f64;
            let r = m as f64 / ref_words.len() as f64;
            fbeta(p, r, 1.0)
        };
        sums[b] += f;
        counts[b] += 1;
    }
    let rows = LENGTH_BUCKETS
        .iter()
        .enumerate()
        .map(|(b, (label, _, _))| LengthBucketRow {
            bucket: label,
            fmeasure: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
            sentences: counts[b],
        })
        .collect();
    Ok(LengthBucketTable { rows })
}
