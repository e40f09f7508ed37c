//! Beam and greedy decoding over the incremental decoder state.
//!
//! All scoring runs in f64 log space regardless of the model's parameter
//! type, and every tie is broken deterministically: better log probability
//! first, then the lower token id, then the earlier beam slot.

use ndarray::{Array1, NdFloat};

use crate::model::{ModelError, Seq2Seq};
use crate::par;
use crate::tokenizer::{BpeModel, BOS, EOS};

/// Search settings shared by greedy and beam decoding.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecodeConfig {
    /// Number of live hypotheses. 1 degenerates to greedy search.
    pub beam: usize,
    /// Hard cap on produced tokens, counting the end marker.
    pub max_len: usize,
    /// Exponent in the score `logprob / len^penalty`. 0 disables length
    /// normalization, 1 scores average token log probability.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_len: 100,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    /// Settings for pivot-language decoding: same beam, shorter output cap.
    pub fn pivot() -> Self {
        DecodeConfig {
            max_len: 50,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam == 0 {
            return Err(ModelError::ZeroField { field: "beam" });
        }
        if self.max_len == 0 {
            return Err(ModelError::ZeroField { field: "max_len" });
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(ModelError::Malformed(format!(
                "length_penalty must be finite and non-negative, got {}",
                self.length_penalty
            )));
        }
        Ok(())
    }
}

/// One finished decode: token ids without the start marker, with the end
/// marker included when the search emitted one.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
}

fn hypothesis(ids: Vec<u32>, logprob: f64, penalty: f64) -> Hypothesis {
    let len = ids.len().max(1) as f64;
    Hypothesis {
        ids,
        logprob,
        score: logprob / len.powf(penalty),
    }
}

/// log softmax of the logits row, computed in f64.
fn log_probs<T: NdFloat>(logits: &Array1<T>) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom = xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - max - denom).collect()
}

/// Picks the best pool entry: score first, then the shorter output, then the
/// lexicographically smaller one.
fn best_of(pool: Vec<Hypothesis>) -> Hypothesis {
    pool.into_iter()
        .min_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite scores")
                .then(a.ids.len().cmp(&b.ids.len()))
                .then(a.ids.cmp(&b.ids))
        })
        .expect("non-empty pool")
}

struct LiveBeam<T: NdFloat> {
    state: crate::model::DecodeState<T>,
    ids: Vec<u32>,
    logprob: f64,
    /// Log distribution over the next token, from the last fed token.
    next: Vec<f64>,
}

/// Greedy argmax decoding. Ties pick the lowest token id. Scoring matches
/// beam search exactly so the two are comparable.
pub fn greedy_search<T: NdFloat>(
    model: &Seq2Seq<T>,
    src: &[u32],
    config: &DecodeConfig,
) -> Result<Hypothesis, ModelError> {
    config.validate()?;
    let enc = model.encode(src)?;
    let mut state = model.begin_decode(&enc);
    let mut probs = log_probs(&model.decode_step(&mut state, BOS)?);
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    loop {
        let mut best = 0;
        for (t, lp) in probs.iter().enumerate() {
            if *lp > probs[best] {
                best = t;
            }
        }
        ids.push(best as u32);
        logprob += probs[best];
        if best as u32 == EOS || ids.len() >= config.max_len {
            return Ok(hypothesis(ids, logprob, config.length_penalty));
        }
        probs = log_probs(&model.decode_step(&mut state, best as u32)?);
    }
}

/// Beam search. With `beam > 1` the greedy hypothesis joins the candidate
/// pool, so the returned score never falls below greedy's.
pub fn beam_search<T: NdFloat>(
    model: &Seq2Seq<T>,
    src: &[u32],
    config: &DecodeConfig,
) -> Result<Hypothesis, ModelError> {
    config.validate()?;
    let enc = model.encode(src)?;
    let mut first = model.begin_decode(&enc);
    let next = log_probs(&model.decode_step(&mut first, BOS)?);
    let mut live = vec![LiveBeam {
        state: first,
        ids: Vec::new(),
        logprob: 0.0,
        next,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
        for (slot, beam) in live.iter().enumerate() {
            for (t, lp) in beam.next.iter().enumerate() {
                candidates.push((beam.logprob + lp, t as u32, slot));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite log probabilities")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(config.beam);
        let mut survivors = Vec::new();
        for (logprob, token, slot) in candidates {
            let mut ids = live[slot].ids.clone();
            ids.push(token);
            if token == EOS || ids.len() >= config.max_len {
                pool.push(hypothesis(ids, logprob, config.length_penalty));
            } else {
                let mut state = live[slot].state.clone();
                let next = log_probs(&model.decode_step(&mut state, token)?);
                survivors.push(LiveBeam {
                    state,
                    ids,
                    logprob,
                    next,
                });
            }
        }
        live = survivors;
    }
    if config.beam > 1 {
        pool.push(greedy_search(model, src, config)?);
    }
    Ok(best_of(pool))
}

/// Decodes each sentence independently (in parallel when enabled) and
/// renders the results back to text. Output order matches input order.
pub fn translate_batch<T: NdFloat>(
    model: &Seq2Seq<T>,
    tokenizer: &BpeModel,
    sentences: &[String],
    config: &DecodeConfig,
) -> Result<Vec<String>, ModelError> {
    config.validate()?;
    let outputs = par::map_slice(sentences, |sentence| {
        let mut src = tokenizer.encode_sentence(sentence).ids;
        src.push(EOS);
        let hyp = beam_search(model, &src, config)?;
        let body: Vec<u32> = hyp.ids.iter().copied().filter(|&t| t != EOS).collect();
        Ok(tokenizer.decode(&body))
    });
    outputs.into_iter().collect()
}
