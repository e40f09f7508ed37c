//! Decoder-only variant: a single causal stack over one combined sequence
//! `gloss tokens, separator, text tokens, end marker`. Loss is taken only on
//! positions from the separator onward, so the model is never scored on the
//! gloss segment it conditions on.

use ndarray::{Array2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::AttnMask;
use super::seq2seq::{DecPassLite, SelfLayerCache};
use super::{
    init_embed, init_linear, init_self_layer, sinusoidal_positions, DecOnlyParams, LayerNorm,
    ModelConfig, ModelError,
};
use crate::sals::{soft_cross_entropy, soft_cross_entropy_grad, LabelRowView};
use crate::tokenizer::{BOS, EOS};

/// Segment boundary between gloss and text. The sequence-start id doubles as
/// the separator so no extra vocabulary slot is needed.
pub const SEPARATOR: u32 = BOS;

/// Combined input for one pair: gloss, separator, text, end marker.
pub fn pair_ids(gloss: &[u32], text: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(gloss.len() + text.len() + 2);
    ids.extend_from_slice(gloss);
    ids.push(SEPARATOR);
    ids.extend_from_slice(text);
    ids.push(EOS);
    ids
}

/// Positions whose predictions are scored: the separator position predicts
/// the first text token, the last text position predicts the end marker.
/// Returns None when the sequence has no separator.
pub fn pair_loss_span(ids: &[u32]) -> Option<std::ops::Range<usize>> {
    let sep = ids.iter().position(|&id| id == SEPARATOR)?;
    Some(sep..ids.len().saturating_sub(1))
}

#[derive(Clone)]
pub struct DecoderOnly<T> {
    config: ModelConfig,
    params: DecOnlyParams<T>,
    pos: Array2<T>,
}

impl<T: NdFloat> DecoderOnly<T> {
    /// `config.dec_layers` sets the stack depth; `enc_layers` is unused.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.dec_layers == 0 {
            return Err(ModelError::ZeroField { field: "dec_layers" });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = init_embed(&mut rng, config.vocab, config.d_model);
        let layers = (0..config.dec_layers)
            .map(|_| init_self_layer(&mut rng, config.d_model, config.ffn_dim))
            .collect();
        let out = if config.tied_output {
            None
        } else {
            Some(init_linear::<T>(&mut rng, config.vocab, config.d_model).w)
        };
        let params = DecOnlyParams {
            embed,
            layers,
            norm: LayerNorm::identity(config.d_model),
            out,
        };
        let pos = sinusoidal_positions(config.max_positions, config.d_model);
        Ok(Self { config, params, pos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &DecOnlyParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DecOnlyParams<T> {
        &mut self.params
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        for &id in ids {
            if id as usize >= self.config.vocab {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab,
                });
            }
        }
        Ok(())
    }

    fn forward_pass(
        &self,
        ids: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecPassLite<T>, ModelError> {
        self.check_ids(ids)?;
        let d = self.config.d_model;
        let scale = T::from(d as f64).unwrap().sqrt();
        let mut x = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..d {
                x[[i, j]] = self.params.embed[[id as usize, j]] * scale + self.pos[[i, j]];
            }
        }
        let rate = self.config.dropout;
        let drop_in = super::seq2seq::apply_dropout(&mut x, rate, rng.as_deref_mut());
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let (h, ln1) = layer.ln1.forward(&x);
            let (mut a, attn) = layer
                .attn
                .forward(&h, &h, self.config.heads, AttnMask::Causal);
            let drop1 = super::seq2seq::apply_dropout(&mut a, rate, rng.as_deref_mut());
            x += &a;
            let (h, ln2) = layer.ln2.forward(&x);
            let (mut f, ffn) = layer.ffn.forward(&h);
            let drop2 = super::seq2seq::apply_dropout(&mut f, rate, rng.as_deref_mut());
            x += &f;
            layers.push(SelfLayerCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            });
        }
        let (hidden, norm) = self.params.norm.forward(&x);
        let logits = match &self.params.out {
            Some(w) => hidden.dot(&w.t()),
            None => hidden.dot(&self.params.embed.t()),
        };
        Ok(DecPassLite {
            drop_in,
            layers,
            norm,
            hidden,
            logits,
        })
    }

    /// Next-token logits for every position of `ids`.
    pub fn forward(&self, ids: &[u32]) -> Result<Array2<T>, ModelError> {
        Ok(self.forward_pass(ids, None)?.logits)
    }

    /// Loss sum over labelled positions plus gradient sums into `grads`.
    pub fn loss_and_grads(
        &self,
        ids: &[u32],
        labels: &[Option<LabelRowView<'_>>],
        rng: Option<&mut ChaCha8Rng>,
        batch_tag: u64,
        grads: &mut DecOnlyParams<T>,
    ) -> Result<(T, usize), ModelError> {
        if labels.len() != ids.len() {
            return Err(ModelError::LabelCountMismatch {
                labels: labels.len(),
                positions: ids.len(),
            });
        }
        if labels.iter().all(|l| l.is_none()) {
            return Ok((T::zero(), 0));
        }
        let pass = self.forward_pass(ids, rng)?;
        let mut loss = T::zero();
        let mut counted = 0;
        let mut dlogits: Array2<T> = Array2::zeros(pass.logits.raw_dim());
        for (i, label) in labels.iter().enumerate() {
            let Some(label) = label else { continue };
            let row = pass.logits.row(i);
            loss = loss + soft_cross_entropy(row, label)?;
            dlogits.row_mut(i).assign(&soft_cross_entropy_grad(row, label)?);
            counted += 1;
        }
        if !loss.to_f64().expect("scalar converts").is_finite() {
            return Err(ModelError::NonFiniteLoss { batch: batch_tag });
        }
        // Output head.
        let mut dx = match &self.params.out {
            Some(w) => {
                let g = grads.out.as_mut().expect("grads built from same params");
                *g += &dlogits.t().dot(&pass.hidden);
                dlogits.dot(w)
            }
            None => {
                grads.embed += &dlogits.t().dot(&pass.hidden);
                dlogits.dot(&self.params.embed)
            }
        };
        dx = self.params.norm.backward(&pass.norm, &dx, &mut grads.norm);
        for ((layer, lcache), lgrads) in self
            .params
            .layers
            .iter()
            .rev()
            .zip(pass.layers.iter().rev())
            .zip(grads.layers.iter_mut().rev())
        {
            let mut d_branch = dx.clone();
            if let Some(mask) = &lcache.drop2 {
                d_branch *= mask;
            }
            let dh = layer.ffn.backward(&lcache.ffn, &d_branch, &mut lgrads.ffn);
            dx += &layer.ln2.backward(&lcache.ln2, &dh, &mut lgrads.ln2);
            let mut d_branch = dx.clone();
            if let Some(mask) = &lcache.drop1 {
                d_branch *= mask;
            }
            let (dq, dk) = layer.attn.backward(
                &lcache.attn,
                &d_branch,
                self.config.heads,
                &mut lgrads.attn,
            );
            dx += &layer.ln1.backward(&lcache.ln1, &(dq + dk), &mut lgrads.ln1);
        }
        if let Some(mask) = &pass.drop_in {
            dx *= mask;
        }
        let scale = T::from(self.config.d_model as f64).unwrap().sqrt();
        for (i, &id) in ids.iter().enumerate() {
            let mut row = grads.embed.row_mut(id as usize);
            row += &(&dx.row(i) * scale);
        }
        Ok((loss, counted))
    }

    /// Loss sum without gradients (dropout off).
    pub fn loss_only(
        &self,
        ids: &[u32],
        labels: &[Option<LabelRowView<'_>>],
    ) -> Result<(T, usize), ModelError> {
        if labels.len() != ids.len() {
            return Err(ModelError::LabelCountMismatch {
                labels: labels.len(),
                positions: ids.len(),
            });
        }
        let pass = self.forward_pass(ids, None)?;
        let mut loss = T::zero();
        let mut counted = 0;
        for (i, label) in labels.iter().enumerate() {
            let Some(label) = label else { continue };
            loss = loss + soft_cross_entropy(pass.logits.row(i), label)?;
            counted += 1;
        }
        Ok((loss, counted))
    }
}
