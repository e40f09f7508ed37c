//! Similarity-weighted soft label distributions and the matching loss.
//!
//! For the word at a word-start token, the label row spreads mass by
//! unnormalized weight: 1 on the word itself, the cosine on each indexed
//! neighbor, and beta/N on every other target word; the row is then divided
//! by its sum and mapped onto first-token ids, summing words that share a
//! first token. Continuation tokens (and any token that anchors no word) get
//! (1-beta) on the gold id and beta spread over the ids observed in
//! target-side training text plus the end-of-sequence id.
//!
//! Rows are precomputed once per (tokenizer, target vocabulary, config) and
//! looked up by gold token id during training; nothing here recomputes
//! cosines. The plan is immutable after build and safe to share across
//! threads.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, ArrayView1, NdFloat};
use thiserror::Error;

use crate::embeddings::SimilarityIndex;
use crate::tokenizer::{BpeModel, BOS, EOS, PAD, SPECIALS, UNK};

#[derive(Debug, Error)]
pub enum SalsError {
    #[error("similarity threshold {0} must lie in (0, 1]")]
    BadLambda(f32),
    #[error("smoothing mass {0} must lie in [0, 1)")]
    BadBeta(f32),
    #[error("similarity-weighted smoothing needs a similarity index")]
    MissingIndex,
    #[error("config threshold {config} does not match index threshold {index}")]
    ThresholdMismatch { config: f32, index: f32 },
    #[error("no target-side words to smooth over")]
    EmptyTarget,
    #[error("'{0}' is not a target-vocabulary word")]
    UnknownWord(String),
    #[error("token id {id} exceeds vocabulary size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("label mass on id {id} outside logits of length {len}")]
    LabelOutOfRange { id: u32, len: usize },
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
    #[error("malformed label plan file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// Similarity-weighted rows at word-start tokens.
    Sals,
    /// Same construction with no neighbors anywhere.
    UniformTarget,
    /// (1-beta) on the gold word plus beta times the normalized
    /// similarity-and-uniform vector.
    Conventional,
    /// Indicator rows regardless of position.
    OneHot,
}

/// The N of the beta/N side mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingBasis {
    TargetVocabSize,
    FullVocabSize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothingConfig {
    pub mode: SmoothingMode,
    /// Cosine threshold for neighborhood membership, in (0, 1].
    pub lambda: f32,
    /// Smoothing mass, in [0, 1).
    pub beta: f32,
    pub basis: SmoothingBasis,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            mode: SmoothingMode::Sals,
            lambda: 0.6,
            beta: 0.1,
            basis: SmoothingBasis::TargetVocabSize,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<(), SalsError> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(SalsError::BadLambda(self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return Err(SalsError::BadBeta(self.beta));
        }
        Ok(())
    }
}

type SparseRow = Arc<[(u32, f32)]>;

/// Borrowed view of one label distribution. Masses of repeated ids add up,
/// which lets the gold-plus-template form avoid per-position allocation.
#[derive(Debug, Clone, Copy)]
pub enum LabelRowView<'a> {
    /// Explicit row summing to 1.
    Sparse(&'a [(u32, f32)]),
    /// `gold_mass` on `gold` plus every entry of `shared`.
    GoldPlusShared {
        gold: u32,
        gold_mass: f32,
        shared: &'a [(u32, f32)],
    },
}

impl LabelRowView<'_> {
    /// Calls `visit` once per stored entry; ids may repeat.
    pub fn for_each(&self, mut visit: impl FnMut(u32, f64)) {
        match self {
            LabelRowView::Sparse(entries) => {
                for (id, p) in *entries {
                    visit(*id, f64::from(*p));
                }
            }
            LabelRowView::GoldPlusShared {
                gold,
                gold_mass,
                shared,
            } => {
                for (id, p) in *shared {
                    visit(*id, f64::from(*p));
                }
                visit(*gold, f64::from(*gold_mass));
            }
        }
    }

    pub fn max_id(&self) -> Option<u32> {
        let mut max = None;
        self.for_each(|id, _| max = Some(max.map_or(id, |m: u32| m.max(id))));
        max
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.for_each(|id, p| out[id as usize] += p);
        out
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct PlanFile {
    version: u32,
    config: SmoothingConfig,
    vocab_len: usize,
    first_token: Vec<(String, u32)>,
    word_rows: Vec<(String, Vec<(u32, f32)>)>,
    continuation: Vec<(u32, f32)>,
}

/// Precomputed label rows for one tokenizer, target vocabulary, and config.
#[derive(Debug, Clone)]
pub struct SoftLabelPlan {
    config: SmoothingConfig,
    vocab_len: usize,
    /// Word to its anchoring token id; words whose first token is a special
    /// id cannot anchor a row and are absent.
    first_token: BTreeMap<String, u32>,
    word_rows: BTreeMap<String, SparseRow>,
    /// Keyed by anchoring token id; words sharing a first token are summed
    /// before normalization.
    token_rows: HashMap<u32, SparseRow>,
    /// beta/|observed| on each id seen in target-side text, plus EOS. Empty
    /// when beta = 0.
    continuation: SparseRow,
}

impl SoftLabelPlan {
    /// Derives the target vocabulary and observed-token support from
    /// `target_sentences` and precomputes every label row.
    pub fn build(
        tokenizer: &BpeModel,
        target_sentences: &[String],
        index: Option<&SimilarityIndex>,
        config: SmoothingConfig,
    ) -> Result<Self, SalsError> {
        config.validate()?;
        let needs_index = matches!(config.mode, SmoothingMode::Sals | SmoothingMode::Conventional);
        let index = if needs_index {
            let idx = index.ok_or(SalsError::MissingIndex)?;
            if (idx.threshold() - config.lambda).abs() > 1e-6 {
                return Err(SalsError::ThresholdMismatch {
                    config: config.lambda,
                    index: idx.threshold(),
                });
            }
            Some(idx)
        } else {
            None
        };

        let words: BTreeSet<String> = target_sentences
            .iter()
            .flat_map(|s| s.split_whitespace())
            .map(str::to_owned)
            .collect();
        if words.is_empty() {
            return Err(SalsError::EmptyTarget);
        }

        let mut observed: BTreeSet<u32> = BTreeSet::new();
        for sentence in target_sentences {
            observed.extend(tokenizer.encode_sentence(sentence).ids);
        }
        observed.remove(&PAD);
        observed.remove(&BOS);
        observed.remove(&UNK);
        observed.insert(EOS);
        let continuation: SparseRow = if config.beta > 0.0 {
            let share = config.beta / observed.len() as f32;
            observed.iter().map(|&id| (id, share)).collect()
        } else {
            Arc::from([])
        };

        let mut first_token = BTreeMap::new();
        for word in &words {
            let id = tokenizer.first_token_of(word);
            if id >= SPECIALS.len() as u32 {
                first_token.insert(word.clone(), id);
            }
        }

        let vocab_len = tokenizer.vocab_len();
        let mut word_rows = BTreeMap::new();
        let mut token_rows = HashMap::new();
        if config.mode == SmoothingMode::OneHot {
            return Ok(Self {
                config,
                vocab_len,
                first_token,
                word_rows,
                token_rows,
                continuation,
            });
        }

        let n_basis = match config.basis {
            SmoothingBasis::TargetVocabSize => words.len() as f64,
            SmoothingBasis::FullVocabSize => vocab_len as f64,
        };
        let side = f64::from(config.beta) / n_basis;

        // Unnormalized weight maps are kept so words sharing a first token can
        // be combined before normalization.
        let mut unnorm: BTreeMap<&str, BTreeMap<u32, f64>> = BTreeMap::new();
        for (word, _) in &first_token {
            let neighbors: HashMap<&str, f64> = index
                .map(|idx| {
                    idx.neighbors(word)
                        .iter()
                        .filter(|(n, _)| first_token.contains_key(n))
                        .map(|(n, c)| (n.as_str(), f64::from(*c)))
                        .collect()
                })
                .unwrap_or_default();
            let mut weights: BTreeMap<u32, f64> = BTreeMap::new();
            for (other, id) in &first_token {
                let w = if other == word {
                    1.0
                } else if let Some(cos) = neighbors.get(other.as_str()) {
                    *cos
                } else {
                    side
                };
                *weights.entry(*id).or_insert(0.0) += w;
            }
            unnorm.insert(word.as_str(), weights);
        }

        let finish = |weights: &BTreeMap<u32, f64>| -> SparseRow {
            let z: f64 = weights.values().sum();
            weights.iter().map(|(&id, &w)| (id, (w / z) as f32)).collect()
        };
        let mix = |gold: u32, weights: &BTreeMap<u32, f64>| -> BTreeMap<u32, f64> {
            // (1-beta) indicator plus beta times the normalized vector.
            let z: f64 = weights.values().sum();
            let beta = f64::from(config.beta);
            let mut out: BTreeMap<u32, f64> = weights
                .iter()
                .map(|(&id, &w)| (id, beta * w / z))
                .collect();
            *out.entry(gold).or_insert(0.0) += 1.0 - beta;
            out
        };

        let mut groups: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
        for (word, id) in &first_token {
            groups.entry(*id).or_default().push(word.as_str());
        }
        for (word, id) in &first_token {
            let weights = match config.mode {
                SmoothingMode::Conventional => mix(*id, &unnorm[word.as_str()]),
                _ => unnorm[word.as_str()].clone(),
            };
            word_rows.insert(word.clone(), finish(&weights));
        }
        for (id, members) in &groups {
            let mut combined: BTreeMap<u32, f64> = BTreeMap::new();
            for member in members {
                let weights = match config.mode {
                    SmoothingMode::Conventional => mix(*id, &unnorm[member]),
                    _ => unnorm[member].clone(),
                };
                for (tok, w) in weights {
                    *combined.entry(tok).or_insert(0.0) += w;
                }
            }
            token_rows.insert(*id, finish(&combined));
        }
        drop(unnorm);
        Ok(Self {
            config,
            vocab_len,
            first_token,
            word_rows,
            token_rows,
            continuation,
        })
    }

    pub fn config(&self) -> &SmoothingConfig {
        &self.config
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    /// Token id anchoring `word`, if the tokenizer gives it a non-special
    /// first token.
    pub fn anchor_of(&self, word: &str) -> Option<u32> {
        self.first_token.get(word).copied()
    }

    /// The word-level smoothed row mapped onto token ids.
    pub fn word_row(&self, word: &str) -> Result<&[(u32, f32)], SalsError> {
        self.word_rows
            .get(word)
            .map(Arc::as_ref)
            .ok_or_else(|| SalsError::UnknownWord(word.to_owned()))
    }

    pub fn continuation_support(&self) -> &[(u32, f32)] {
        &self.continuation
    }

    /// Label distribution for one target position.
    pub fn row_for_position(
        &self,
        gold: u32,
        is_word_start: bool,
    ) -> Result<LabelRowView<'_>, SalsError> {
        if gold as usize >= self.vocab_len {
            return Err(SalsError::TokenOutOfRange {
                id: gold,
                vocab: self.vocab_len,
            });
        }
        if self.config.mode == SmoothingMode::OneHot {
            return Ok(LabelRowView::GoldPlusShared {
                gold,
                gold_mass: 1.0,
                shared: &[],
            });
        }
        if is_word_start {
            if let Some(row) = self.token_rows.get(&gold) {
                return Ok(LabelRowView::Sparse(row));
            }
        }
        Ok(LabelRowView::GoldPlusShared {
            gold,
            gold_mass: 1.0 - self.config.beta,
            shared: &self.continuation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SalsError> {
        let file = PlanFile {
            version: 1,
            config: self.config,
            vocab_len: self.vocab_len,
            first_token: self
                .first_token
                .iter()
                .map(|(w, id)| (w.clone(), *id))
                .collect(),
            word_rows: self
                .word_rows
                .iter()
                .map(|(w, row)| (w.clone(), row.to_vec()))
                .collect(),
            continuation: self.continuation.to_vec(),
        };
        let json = serde_json::to_string(&file).expect("label plan serializes");
        fs::write(path, json).map_err(|source| SalsError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SalsError> {
        let raw = fs::read_to_string(path).map_err(|source| SalsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: PlanFile =
            serde_json::from_str(&raw).map_err(|e| SalsError::Malformed(e.to_string()))?;
        if file.version != 1 {
            return Err(SalsError::Malformed(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let first_token: BTreeMap<String, u32> = file.first_token.into_iter().collect();
        let word_rows: BTreeMap<String, SparseRow> = file
            .word_rows
            .into_iter()
            .map(|(w, row)| (w, SparseRow::from(row)))
            .collect();
        // Rows for shared first tokens are recombined from unnormalized form;
        // normalized per-word rows recover it up to a scale, which the final
        // normalization removes.
        let mut groups: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
        for (word, id) in &first_token {
            groups.entry(*id).or_default().push(word.as_str());
        }
        let mut token_rows = HashMap::new();
        for (id, members) in &groups {
            if let [only] = members.as_slice() {
                let row = word_rows
                    .get(*only)
                    .ok_or_else(|| SalsError::Malformed(format!("missing row for '{only}'")))?;
                token_rows.insert(*id, Arc::clone(row));
                continue;
            }
            let mut combined: BTreeMap<u32, f64> = BTreeMap::new();
            for member in members {
                let row = word_rows
                    .get(*member)
                    .ok_or_else(|| SalsError::Malformed(format!("missing row for '{member}'")))?;
                for (tok, p) in row.iter() {
                    *combined.entry(*tok).or_insert(0.0) += f64::from(*p);
                }
            }
            let z: f64 = combined.values().sum();
            token_rows.insert(
                *id,
                combined
                    .iter()
                    .map(|(&tok, &w)| (tok, (w / z) as f32))
                    .collect(),
            );
        }
        Ok(Self {
            config: file.config,
            vocab_len: file.vocab_len,
            first_token,
            word_rows,
            token_rows,
            continuation: SparseRow::from(file.continuation),
        })
    }
}

/// Cross entropy of a label row against log-softmax of `logits`.
pub fn soft_cross_entropy<T: NdFloat>(
    logits: ArrayView1<'_, T>,
    label: &LabelRowView<'_>,
) -> Result<T, SalsError> {
    if let Some(max_id) = label.max_id() {
        if max_id as usize >= logits.len() {
            return Err(SalsError::LabelOutOfRange {
                id: max_id,
                len: logits.len(),
            });
        }
    }
    let lse = log_sum_exp(logits);
    let mut loss = T::zero();
    label.for_each(|id, p| {
        loss = loss + T::from(p).unwrap() * (lse - logits[id as usize]);
    });
    Ok(loss)
}

/// Gradient of [`soft_cross_entropy`] in the logits: softmax(logits) - labels.
pub fn soft_cross_entropy_grad<T: NdFloat>(
    logits: ArrayView1<'_, T>,
    label: &LabelRowView<'_>,
) -> Result<Array1<T>, SalsError> {
    if let Some(max_id) = label.max_id() {
        if max_id as usize >= logits.len() {
            return Err(SalsError::LabelOutOfRange {
                id: max_id,
                len: logits.len(),
            });
        }
    }
    let lse = log_sum_exp(logits);
    let mut grad = logits.mapv(|z| (z - lse).exp());
    label.for_each(|id, p| {
        let slot = &mut grad[id as usize];
        *slot = *slot - T::from(p).unwrap();
    });
    Ok(grad)
}

fn log_sum_exp<T: NdFloat>(logits: ArrayView1<'_, T>) -> T {
    let max = logits.fold(T::neg_infinity(), |m, &z| m.max(z));
    let sum = logits.fold(T::zero(), |s, &z| s + (z - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::WordEmbeddingTable;
    use ndarray::arr1;

    /// Three-word toy: sonne and sonnig at cosine 0.8 exactly; regen at 0
    /// from sonne and 0.6 from sonnig.
    fn toy() -> (BpeModel, WordEmbeddingTable, Vec<String>) {
        let sentences = vec!["sonne sonnig regen".to_owned()];
        let tokenizer = BpeModel::train(&sentences, 96).unwrap();
        let table = WordEmbeddingTable::from_pairs(vec![
            ("sonne".to_owned(), vec![1.0, 0.0]),
            ("sonnig".to_owned(), vec![0.8, 0.6]),
            ("regen".to_owned(), vec![0.0, 1.0]),
        ])
        .unwrap();
        (tokenizer, table, sentences)
    }

    fn toy_plan(mode: SmoothingMode, lambda: f32, beta: f32) -> (SoftLabelPlan, BpeModel) {
        let (tokenizer, table, sentences) = toy();
        let words: Vec<String> = ["sonne", "sonnig", "regen"]
            .iter()
            .map(|w| (*w).to_owned())
            .collect();
        let index = SimilarityIndex::build(&table, &words, lambda).unwrap();
        let config = SmoothingConfig {
            mode,
            lambda,
            beta,
            basis: SmoothingBasis::TargetVocabSize,
        };
        let plan = SoftLabelPlan::build(&tokenizer, &sentences, Some(&index), config).unwrap();
        (plan, tokenizer)
    }

    fn mass(row: &[(u32, f32)], id: u32) -> f32 {
        row.iter()
            .filter(|(tok, _)| *tok == id)
            .map(|(_, p)| *p)
            .sum()
    }

    #[test]
    fn three_word_row_matches_hand_normalization() {
        let (plan, tokenizer) = toy_plan(SmoothingMode::Sals, 0.6, 0.1);
        let row = plan.word_row("sonne").unwrap();
        let id = |w: &str| tokenizer.first_token_of(w);
        // Unnormalized 1.0, 0.8, 0.1/3; total 11/6.
        assert!((mass(row, id("sonne")) - 0.5455).abs() < 1e-4);
        assert!((mass(row, id("sonnig")) - 0.4364).abs() < 1e-4);
        assert!((mass(row, id("regen")) - 0.0182).abs() < 1e-4);
        assert_eq!(row.len(), 3);
    }

    #[test]
    fn lone_word_mass_has_closed_form() {
        // No neighbor qualifies at threshold 1, so the true word keeps
        // 1 / (1 + beta (N-1)/N); N=3, beta=0.1 gives 0.9375.
        let (plan, tokenizer) = toy_plan(SmoothingMode::Sals, 1.0, 0.1);
        for word in ["sonne", "sonnig", "regen"] {
            let row = plan.word_row(word).unwrap();
            let gold = mass(row, tokenizer.first_token_of(word));
            assert!((gold - 0.9375).abs() < 1e-6, "{word}: {gold}");
        }
    }

    #[test]
    fn zero_beta_and_top_threshold_give_indicator_rows() {
        let (plan, tokenizer) = toy_plan(SmoothingMode::Sals, 1.0, 0.0);
        let row = plan.word_row("regen").unwrap();
        assert_eq!(row.len(), 3);
        assert_eq!(mass(row, tokenizer.first_token_of("regen")), 1.0);
        assert!(row.iter().all(|(_, p)| *p == 0.0 || *p == 1.0));
    }

    #[test]
    fn uniform_target_equals_neighborless_sals_exactly() {
        let (tokenizer, _, sentences) = toy();
        let config = SmoothingConfig {
            mode: SmoothingMode::Sals,
            ..SmoothingConfig::default()
        };
        let empty = SimilarityIndex::empty(config.lambda);
        let sals = SoftLabelPlan::build(&tokenizer, &sentences, Some(&empty), config).unwrap();
        let uniform = SoftLabelPlan::build(
            &tokenizer,
            &sentences,
            None,
            SmoothingConfig {
                mode: SmoothingMode::UniformTarget,
                ..config
            },
        )
        .unwrap();
        assert_eq!(sals.word_rows, uniform.word_rows);
        assert_eq!(sals.continuation, uniform.continuation);
        for (id, row) in &sals.token_rows {
            assert_eq!(Some(row), uniform.token_rows.get(id));
        }
        assert_eq!(sals.token_rows.len(), uniform.token_rows.len());
    }

    #[test]
    fn zero_beta_uniform_target_is_one_hot_everywhere() {
        let (tokenizer, _, sentences) = toy();
        let config = SmoothingConfig {
            mode: SmoothingMode::UniformTarget,
            beta: 0.0,
            ..SmoothingConfig::default()
        };
        let plan = SoftLabelPlan::build(&tokenizer, &sentences, None, config).unwrap();
        let gold = tokenizer.first_token_of("sonne");
        for is_start in [true, false] {
            let dense = plan
                .row_for_position(gold, is_start)
                .unwrap()
                .to_dense(plan.vocab_len());
            for (id, p) in dense.iter().enumerate() {
                let expected = if id as u32 == gold { 1.0 } else { 0.0 };
                assert_eq!(*p, expected, "start={is_start} id={id}");
            }
        }
    }

    #[test]
    fn continuation_row_formula() {
        // Tight budget keeps the words multi-token so real continuation ids
        // land in the observed set.
        let sentences = vec!["sonne sonnig regen".to_owned()];
        let tokenizer = BpeModel::train(&sentences, 13).unwrap();
        let config = SmoothingConfig {
            mode: SmoothingMode::UniformTarget,
            ..SmoothingConfig::default()
        };
        let plan = SoftLabelPlan::build(&tokenizer, &sentences, None, config).unwrap();
        let support = plan.continuation_support();
        let observed = support.len();
        assert!(support.iter().any(|(id, _)| *id == EOS));
        let seq = tokenizer.encode_sentence("sonnig");
        assert!(seq.ids.len() >= 2, "budget left the word whole");
        let gold = seq.ids[1];
        assert!(support.iter().any(|(id, _)| *id == gold));
        let dense = plan
            .row_for_position(gold, false)
            .unwrap()
            .to_dense(plan.vocab_len());
        let share = 0.1 / observed as f64;
        assert!((dense[gold as usize] - (0.9 + share)).abs() < 1e-6);
        for (id, _) in support {
            if *id != gold {
                assert!((dense[*id as usize] - share).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn continuation_row_with_hundred_observed_tokens() {
        let shared: Vec<(u32, f32)> = (0..100).map(|id| (id, 0.1 / 100.0)).collect();
        let view = LabelRowView::GoldPlusShared {
            gold: 7,
            gold_mass: 0.9,
            shared: &shared,
        };
        let dense = view.to_dense(100);
        assert!((dense[7] - 0.901).abs() < 1e-6);
        assert!((dense[3] - 0.001).abs() < 1e-7);
        assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_hot_mode_ignores_position_flags() {
        let (plan, tokenizer) = toy_plan(SmoothingMode::OneHot, 0.6, 0.1);
        let gold = tokenizer.first_token_of("sonne");
        for is_start in [true, false] {
            let dense = plan
                .row_for_position(gold, is_start)
                .unwrap()
                .to_dense(plan.vocab_len());
            assert_eq!(dense[gold as usize], 1.0);
            assert_eq!(dense.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn conventional_mode_mixes_indicator_and_normalized_vector() {
        let (sals, tokenizer) = toy_plan(SmoothingMode::Sals, 0.6, 0.1);
        let (conv, _) = toy_plan(SmoothingMode::Conventional, 0.6, 0.1);
        let id = |w: &str| tokenizer.first_token_of(w);
        let srow = sals.word_row("sonne").unwrap();
        let crow = conv.word_row("sonne").unwrap();
        for w in ["sonne", "sonnig", "regen"] {
            let expected = 0.1 * mass(srow, id(w))
                + if w == "sonne" { 0.9 } else { 0.0 };
            assert!((mass(crow, id(w)) - expected).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn neighbor_similarity_raises_neighbor_mass() {
        let sentences = vec!["a b c".to_owned()];
        let tokenizer = BpeModel::train(&sentences, 64).unwrap();
        let id = |w: &str| tokenizer.first_token_of(w);
        let build = |cos_b: f32| {
            let table = WordEmbeddingTable::from_pairs(vec![
                ("a".to_owned(), vec![1.0, 0.0]),
                ("b".to_owned(), vec![cos_b, (1.0 - cos_b * cos_b).sqrt()]),
                ("c".to_owned(), vec![0.0, -1.0]),
            ])
            .unwrap();
            let words: Vec<String> =
                ["a", "b", "c"].iter().map(|w| (*w).to_owned()).collect();
            let index = SimilarityIndex::build(&table, &words, 0.6).unwrap();
            SoftLabelPlan::build(
                &tokenizer,
                &sentences,
                Some(&index),
                SmoothingConfig::default(),
            )
            .unwrap()
        };
        let low = build(0.7);
        let high = build(0.9);
        let (lo, hi) = (low.word_row("a").unwrap(), high.word_row("a").unwrap());
        assert!(mass(hi, id("b")) > mass(lo, id("b")));
        assert!(mass(hi, id("a")) <= mass(lo, id("a")));
        assert!(mass(hi, id("c")) <= mass(lo, id("c")));
    }

    #[test]
    fn words_sharing_a_first_token_sum_before_normalizing() {
        // "abx" and "aby" both open with the merged "ab" token; "cd" does not.
        let sentences = vec!["abx aby cd".to_owned()];
        let tokenizer = BpeModel::train(&sentences, 11).unwrap();
        let ab = tokenizer.first_token_of("abx");
        assert_eq!(ab, tokenizer.first_token_of("aby"), "need a collision");
        let c = tokenizer.first_token_of("cd");
        let config = SmoothingConfig {
            mode: SmoothingMode::UniformTarget,
            beta: 0.3,
            ..SmoothingConfig::default()
        };
        let plan = SoftLabelPlan::build(&tokenizer, &sentences, None, config).unwrap();
        // Per word: self 1, each other word 0.1. Summed over the pair the
        // shared token holds 2.2 of 2.4.
        let dense = plan.row_for_position(ab, true).unwrap().to_dense(64);
        assert!((dense[ab as usize] - 11.0 / 12.0).abs() < 1e-6);
        assert!((dense[c as usize] - 1.0 / 12.0).abs() < 1e-6);
    }

    #[test]
    fn unanchored_gold_token_falls_back_to_uniform_branch() {
        let (plan, tokenizer) = toy_plan(SmoothingMode::Sals, 0.6, 0.1);
        // An id that anchors no word gets the uniform branch even at a
        // word-start position.
        let anchors: std::collections::HashSet<u32> = ["sonne", "sonnig", "regen"]
            .iter()
            .map(|w| tokenizer.first_token_of(w))
            .collect();
        let stray = (4..plan.vocab_len() as u32)
            .find(|id| !anchors.contains(id))
            .expect("vocabulary holds intermediate ids");
        let view = plan.row_for_position(stray, true).unwrap();
        assert!(matches!(view, LabelRowView::GoldPlusShared { .. }));
    }

    #[test]
    fn config_and_lookup_errors() {
        let (tokenizer, _, sentences) = toy();
        let bad_lambda = SmoothingConfig {
            lambda: 0.0,
            ..SmoothingConfig::default()
        };
        assert!(matches!(
            SoftLabelPlan::build(&tokenizer, &sentences, None, bad_lambda),
            Err(SalsError::BadLambda(_))
        ));
        let bad_beta = SmoothingConfig {
            beta: 1.0,
            ..SmoothingConfig::default()
        };
        assert!(matches!(
            SoftLabelPlan::build(&tokenizer, &sentences, None, bad_beta),
            Err(SalsError::BadBeta(_))
        ));
        assert!(matches!(
            SoftLabelPlan::build(&tokenizer, &sentences, None, SmoothingConfig::default()),
            Err(SalsError::MissingIndex)
        ));

        let (plan, _) = toy_plan(SmoothingMode::Sals, 0.6, 0.1);
        assert!(matches!(
            plan.word_row("fehlt"),
            Err(SalsError::UnknownWord(_))
        ));
        let big = plan.vocab_len() as u32;
        assert!(matches!(
            plan.row_for_position(big, true),
            Err(SalsError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn threshold_mismatch_rejected() {
        let (tokenizer, table, sentences) = toy();
        let words: Vec<String> = ["sonne", "sonnig", "regen"]
            .iter()
            .map(|w| (*w).to_owned())
            .collect();
        let index = SimilarityIndex::build(&table, &words, 0.5).unwrap();
        let err = SoftLabelPlan::build(
            &tokenizer,
            &sentences,
            Some(&index),
            SmoothingConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SalsError::ThresholdMismatch { .. }));
    }

    #[test]
    fn rows_stay_inside_known_support() {
        let (plan, tokenizer) = toy_plan(SmoothingMode::Sals, 0.6, 0.1);
        let anchors: std::collections::HashSet<u32> =
            ["sonne", "sonnig", "regen"]
                .iter()
                .map(|w| tokenizer.first_token_of(w))
                .collect();
        let observed: std::collections::HashSet<u32> = plan
            .continuation_support()
            .iter()
            .map(|(id, _)| *id)
            .collect();
        for id in 0..plan.vocab_len() as u32 {
            for is_start in [true, false] {
                let dense = plan
                    .row_for_position(id, is_start)
                    .unwrap()
                    .to_dense(plan.vocab_len());
                for (tok, p) in dense.iter().enumerate() {
                    if *p > 0.0 {
                        let tok = tok as u32;
                        assert!(
                            anchors.contains(&tok) || observed.contains(&tok) || tok == id,
                            "mass {p} on {tok} for gold {id}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn loss_limit_cases() {
        let one_hot = LabelRowView::GoldPlusShared {
            gold: 0,
            gold_mass: 1.0,
            shared: &[],
        };
        let confident = arr1(&[50.0f64, 0.0, 0.0]);
        let loss = soft_cross_entropy(confident.view(), &one_hot).unwrap();
        assert!(loss.abs() < 1e-6);

        let uniform = arr1(&[0.25f64; 16]);
        let row: Vec<(u32, f32)> = vec![(3, 0.5), (7, 0.5)];
        let loss = soft_cross_entropy(uniform.view(), &LabelRowView::Sparse(&row)).unwrap();
        assert!((loss - (16f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_direct_evaluation() {
        let logits = arr1(&[1.0f64, 0.0, 0.0]);
        let row: Vec<(u32, f32)> = vec![(0, 0.5455), (1, 0.4364), (2, 0.0182)];
        let got = soft_cross_entropy(logits.view(), &LabelRowView::Sparse(&row)).unwrap();
        let lse = (1f64.exp() + 1.0 + 1.0).ln();
        let want = f64::from(0.5455f32) * (lse - 1.0)
            + f64::from(0.4364f32) * lse
            + f64::from(0.0182f32) * lse;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn loss_rejects_label_outside_logits() {
        let logits = arr1(&[0.0f64; 4]);
        let row: Vec<(u32, f32)> = vec![(4, 1.0)];
        assert!(matches!(
            soft_cross_entropy(logits.view(), &LabelRowView::Sparse(&row)),
            Err(SalsError::LabelOutOfRange { id: 4, len: 4 })
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (plan, tokenizer) = toy_plan(SmoothingMode::Sals, 0.6, 0.1);
        // One anchored id so the similarity-row branch is covered, plus an
        // arbitrary low id for the uniform branch.
        let golds = [
            tokenizer.first_token_of("sonne"),
            tokenizer.first_token_of("sonnig"),
            4,
        ];
        for gold in golds {
            for is_start in [true, false] {
                let label = plan.row_for_position(gold, is_start).unwrap();
                let v = plan.vocab_len();
                let logits =
                    Array1::from_shape_fn(v, |_| rng.random_range(-2.0..2.0f64));
                let grad = soft_cross_entropy_grad(logits.view(), &label).unwrap();
                let eps = 1e-5;
                for k in 0..v {
                    let mut plus = logits.clone();
                    plus[k] += eps;
                    let mut minus = logits.clone();
                    minus[k] -= eps;
                    let fd = (soft_cross_entropy(plus.view(), &label).unwrap()
                        - soft_cross_entropy(minus.view(), &label).unwrap())
                        / (2.0 * eps);
                    let denom = fd.abs().max(grad[k].abs()).max(1e-8);
                    assert!(
                        ((grad[k] - fd) / denom).abs() < 1e-4,
                        "k={k} grad={} fd={fd}",
                        grad[k]
                    );
                }
            }
        }
    }

    #[test]
    fn plan_round_trips_through_disk() {
        let (plan, _) = toy_plan(SmoothingMode::Sals, 0.6, 0.1);
        let f = tempfile::NamedTempFile::new().unwrap();
        plan.save(f.path()).unwrap();
        let back = SoftLabelPlan::load(f.path()).unwrap();
        assert_eq!(plan.word_rows, back.word_rows);
        assert_eq!(plan.first_token, back.first_token);
        assert_eq!(plan.continuation, back.continuation);
        assert_eq!(plan.token_rows.len(), back.token_rows.len());
        for (id, row) in &plan.token_rows {
            assert_eq!(Some(row), back.token_rows.get(id), "token {id}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_mode() -> impl Strategy<Value = SmoothingMode> {
            prop_oneof![
                Just(SmoothingMode::Sals),
                Just(SmoothingMode::UniformTarget),
                Just(SmoothingMode::Conventional),
                Just(SmoothingMode::OneHot),
            ]
        }

        proptest! {
            #[test]
            fn rows_are_distributions(
                mode in arb_mode(),
                beta in 0.0f32..0.9,
                lambda in 0.05f32..1.0,
            ) {
                let (plan, _) = toy_plan(mode, lambda, beta);
                for id in 0..plan.vocab_len() as u32 {
                    for is_start in [true, false] {
                        let dense = plan
                            .row_for_position(id, is_start)
                            .unwrap()
                            .to_dense(plan.vocab_len());
                        let sum: f64 = dense.iter().sum();
                        prop_assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
                        prop_assert!(dense.iter().all(|p| *p >= 0.0));
                    }
                }
            }

            #[test]
            fn self_mass_dominates(beta in 0.0f32..0.9, lambda in 0.05f32..1.0) {
                let (plan, tokenizer) = toy_plan(SmoothingMode::Sals, lambda, beta);
                for word in ["sonne", "sonnig", "regen"] {
                    let row = plan.word_row(word).unwrap();
                    let own = super::mass(row, tokenizer.first_token_of(word));
                    for (_, p) in row {
                        prop_assert!(own >= *p - 1e-7);
                    }
                }
            }

            #[test]
            fn loss_is_at_least_label_entropy(
                seed in 0u64..500,
                gold in 4u32..7,
                is_start in proptest::bool::ANY,
            ) {
                use rand::prelude::*;
                let (plan, _) = toy_plan(SmoothingMode::Sals, 0.6, 0.1);
                let label = plan.row_for_position(gold, is_start).unwrap();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let logits = Array1::from_shape_fn(plan.vocab_len(), |_| {
                    rng.random_range(-3.0..3.0f64)
                });
                let loss = soft_cross_entropy(logits.view(), &label).unwrap();
                let mut entropy = 0.0;
                label.for_each(|_, p| {
                    if p > 0.0 {
                        entropy -= p * p.ln();
                    }
                });
                prop_assert!(loss >= entropy - 1e-9, "loss {loss} < entropy {entropy}");
            }
        }
    }
}
