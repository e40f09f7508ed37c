//! Forward, backward, and incremental decoding for the encoder-decoder
//! model. The backward pass accumulates gradient sums into a caller-owned
//! parameter mirror so batches can be reduced without reallocating.

use ndarray::{s, Array1, Array2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{masked_softmax_row, AttnCache, AttnMask, FfnCache, NormCache};
use super::{
    init_decoder_layer, init_embed, init_linear, init_self_layer, sinusoidal_positions, LayerNorm,
    ModelConfig, ModelError, Seq2SeqParams,
};
use crate::sals::{soft_cross_entropy, soft_cross_entropy_grad, LabelRowView};
use crate::tokenizer::PAD;

pub(crate) struct SelfLayerCache<T> {
    pub ln1: NormCache<T>,
    pub attn: AttnCache<T>,
    pub drop1: Option<Array2<T>>,
    pub ln2: NormCache<T>,
    pub ffn: FfnCache<T>,
    pub drop2: Option<Array2<T>>,
}

pub(crate) struct DecLayerCache<T> {
    pub ln1: NormCache<T>,
    pub self_attn: AttnCache<T>,
    pub drop1: Option<Array2<T>>,
    pub ln2: NormCache<T>,
    pub cross: AttnCache<T>,
    pub drop2: Option<Array2<T>>,
    pub ln3: NormCache<T>,
    pub ffn: FfnCache<T>,
    pub drop3: Option<Array2<T>>,
}

pub(crate) struct EncPass<T> {
    pub drop_in: Option<Array2<T>>,
    pub layers: Vec<SelfLayerCache<T>>,
    pub norm: NormCache<T>,
    pub out: Array2<T>,
    pub valid: Vec<bool>,
}

pub(crate) struct DecPass<T> {
    pub drop_in: Option<Array2<T>>,
    pub layers: Vec<DecLayerCache<T>>,
    pub norm: NormCache<T>,
    pub hidden: Array2<T>,
    pub logits: Array2<T>,
}

/// Forward cache of a single causal stack (the decoder-only variant).
pub(crate) struct DecPassLite<T> {
    pub drop_in: Option<Array2<T>>,
    pub layers: Vec<SelfLayerCache<T>>,
    pub norm: NormCache<T>,
    pub hidden: Array2<T>,
    pub logits: Array2<T>,
}

/// Everything the backward pass needs from one teacher-forced forward run.
pub struct TrainCache<T> {
    src: Vec<u32>,
    tgt: Vec<u32>,
    enc: EncPass<T>,
    dec: DecPass<T>,
}

impl<T> TrainCache<T> {
    pub fn logits(&self) -> &Array2<T> {
        &self.dec.logits
    }
}

/// Encoder output ready for repeated decoding against one source.
#[derive(Clone)]
pub struct EncodedSource<T> {
    out: Array2<T>,
    valid: Vec<bool>,
}

impl<T> EncodedSource<T> {
    pub fn out(&self) -> &Array2<T> {
        &self.out
    }
}

/// Per-hypothesis decoder state: cached self-attention keys and values plus
/// the cross-attention projections of the source. Cloning forks the state,
/// which is how beam candidates branch.
#[derive(Clone)]
pub struct DecodeState<T> {
    len: usize,
    self_k: Vec<Array2<T>>,
    self_v: Vec<Array2<T>>,
    cross_k: Vec<Array2<T>>,
    cross_v: Vec<Array2<T>>,
    src_valid: Vec<bool>,
}

impl<T> DecodeState<T> {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone)]
pub struct Seq2Seq<T> {
    config: ModelConfig,
    params: Seq2SeqParams<T>,
    pos: Array2<T>,
}

pub(crate) fn apply_dropout<T: NdFloat>(
    x: &mut Array2<T>,
    rate: f32,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Array2<T>> {
    let rng = rng?;
    if rate == 0.0 {
        return None;
    }
    let inv = T::from(1.0 / (1.0 - f64::from(rate))).unwrap();
    let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
        if rng.random::<f32>() < rate {
            T::zero()
        } else {
            inv
        }
    });
    *x *= &mask;
    Some(mask)
}

impl<T: NdFloat> Seq2Seq<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.enc_layers == 0 {
            return Err(ModelError::ZeroField { field: "enc_layers" });
        }
        if config.dec_layers == 0 {
            return Err(ModelError::ZeroField { field: "dec_layers" });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = init_embed(&mut rng, config.vocab, config.d_model);
        let enc = (0..config.enc_layers)
            .map(|_| init_self_layer(&mut rng, config.d_model, config.ffn_dim))
            .collect();
        let dec = (0..config.dec_layers)
            .map(|_| init_decoder_layer(&mut rng, config.d_model, config.ffn_dim))
            .collect();
        let out = if config.tied_output {
            None
        } else {
            Some(init_linear::<T>(&mut rng, config.vocab, config.d_model).w)
        };
        let params = Seq2SeqParams {
            embed,
            enc,
            enc_norm: LayerNorm::identity(config.d_model),
            dec,
            dec_norm: LayerNorm::identity(config.d_model),
            out,
        };
        let pos = sinusoidal_positions(config.max_positions, config.d_model);
        Ok(Self { config, params, pos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Seq2SeqParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Seq2SeqParams<T> {
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

    /// Embedding lookup scaled by sqrt(d_model) plus the position table.
    fn embed_tokens(&self, ids: &[u32]) -> Array2<T> {
        let d = self.config.d_model;
        let scale = T::from(d as f64).unwrap().sqrt();
        let mut x = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            let row = self.params.embed.row(id as usize);
            for j in 0..d {
                x[[i, j]] = row[j] * scale + self.pos[[i, j]];
            }
        }
        x
    }

    fn encode_pass(
        &self,
        src: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncPass<T>, ModelError> {
        self.check_ids(src)?;
        let valid: Vec<bool> = src.iter().map(|&id| id != PAD).collect();
        let rate = self.config.dropout;
        let mut x = self.embed_tokens(src);
        let drop_in = apply_dropout(&mut x, rate, rng.as_deref_mut());
        let mut layers = Vec::with_capacity(self.params.enc.len());
        for layer in &self.params.enc {
            let (h, ln1) = layer.ln1.forward(&x);
            let (mut a, attn) = layer
                .attn
                .forward(&h, &h, self.config.heads, AttnMask::KeyValid(&valid));
            let drop1 = apply_dropout(&mut a, rate, rng.as_deref_mut());
            x += &a;
            let (h, ln2) = layer.ln2.forward(&x);
            let (mut f, ffn) = layer.ffn.forward(&h);
            let drop2 = apply_dropout(&mut f, rate, rng.as_deref_mut());
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
        let (out, norm) = self.params.enc_norm.forward(&x);
        Ok(EncPass {
            drop_in,
            layers,
            norm,
            out,
            valid,
        })
    }

    fn decode_pass(
        &self,
        tgt_in: &[u32],
        enc_out: &Array2<T>,
        src_valid: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecPass<T>, ModelError> {
        self.check_ids(tgt_in)?;
        let rate = self.config.dropout;
        let mut y = self.embed_tokens(tgt_in);
        let drop_in = apply_dropout(&mut y, rate, rng.as_deref_mut());
        let mut layers = Vec::with_capacity(self.params.dec.len());
        for layer in &self.params.dec {
            let (h, ln1) = layer.ln1.forward(&y);
            let (mut a, self_attn) =
                layer
                    .self_attn
                    .forward(&h, &h, self.config.heads, AttnMask::Causal);
            let drop1 = apply_dropout(&mut a, rate, rng.as_deref_mut());
            y += &a;
            let (h, ln2) = layer.ln2.forward(&y);
            let (mut c, cross) = layer.cross_attn.forward(
                &h,
                enc_out,
                self.config.heads,
                AttnMask::KeyValid(src_valid),
            );
            let drop2 = apply_dropout(&mut c, rate, rng.as_deref_mut());
            y += &c;
            let (h, ln3) = layer.ln3.forward(&y);
            let (mut f, ffn) = layer.ffn.forward(&h);
            let drop3 = apply_dropout(&mut f, rate, rng.as_deref_mut());
            y += &f;
            layers.push(DecLayerCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross,
                drop2,
                ln3,
                ffn,
                drop3,
            });
        }
        let (hidden, norm) = self.params.dec_norm.forward(&y);
        let logits = match &self.params.out {
            Some(w) => hidden.dot(&w.t()),
            None => hidden.dot(&self.params.embed.t()),
        };
        Ok(DecPass {
            drop_in,
            layers,
            norm,
            hidden,
            logits,
        })
    }

    /// Teacher-forced forward pass keeping every intermediate the backward
    /// pass needs.
    pub fn forward_train(
        &self,
        src: &[u32],
        tgt_in: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TrainCache<T>, ModelError> {
        let enc = self.encode_pass(src, rng.as_deref_mut())?;
        let dec = self.decode_pass(tgt_in, &enc.out, &enc.valid, rng)?;
        Ok(TrainCache {
            src: src.to_vec(),
            tgt: tgt_in.to_vec(),
            enc,
            dec,
        })
    }

    /// Evaluation logits, one row per target position.
    pub fn forward(&self, src: &[u32], tgt_in: &[u32]) -> Result<Array2<T>, ModelError> {
        Ok(self.forward_train(src, tgt_in, None)?.dec.logits)
    }

    fn embed_backward(&self, ids: &[u32], mut d_x: Array2<T>, drop: &Option<Array2<T>>, grads: &mut Seq2SeqParams<T>) {
        if let Some(mask) = drop {
            d_x *= mask;
        }
        let scale = T::from(self.config.d_model as f64).unwrap().sqrt();
        for (i, &id) in ids.iter().enumerate() {
            let mut row = grads.embed.row_mut(id as usize);
            row += &(&d_x.row(i) * scale);
        }
    }

    /// Accumulates gradient sums for one sequence into `grads`.
    pub fn backward(
        &self,
        cache: &TrainCache<T>,
        dlogits: &Array2<T>,
        grads: &mut Seq2SeqParams<T>,
    ) {
        // Output projection.
        let mut dy = match &self.params.out {
            Some(w) => {
                let g = grads.out.as_mut().expect("grads built from same params");
                *g += &dlogits.t().dot(&cache.dec.hidden);
                dlogits.dot(w)
            }
            None => {
                grads.embed += &dlogits.t().dot(&cache.dec.hidden);
                dlogits.dot(&self.params.embed)
            }
        };
        dy = self
            .params
            .dec_norm
            .backward(&cache.dec.norm, &dy, &mut grads.dec_norm);
        let mut d_enc_out: Array2<T> = Array2::zeros(cache.enc.out.raw_dim());
        for (layer, lcache, lgrads) in rev_lockstep(&self.params.dec, &cache.dec.layers, &mut grads.dec)
        {
            // Feed-forward branch.
            let mut d_branch = dy.clone();
            if let Some(mask) = &lcache.drop3 {
                d_branch *= mask;
            }
            let dh = layer.ffn.backward(&lcache.ffn, &d_branch, &mut lgrads.ffn);
            dy += &layer.ln3.backward(&lcache.ln3, &dh, &mut lgrads.ln3);
            // Cross-attention branch.
            let mut d_branch = dy.clone();
            if let Some(mask) = &lcache.drop2 {
                d_branch *= mask;
            }
            let (dq, dk) = layer.cross_attn.backward(
                &lcache.cross,
                &d_branch,
                self.config.heads,
                &mut lgrads.cross_attn,
            );
            d_enc_out += &dk;
            dy += &layer.ln2.backward(&lcache.ln2, &dq, &mut lgrads.ln2);
            // Self-attention branch; query and key gradients meet at ln1.
            let mut d_branch = dy.clone();
            if let Some(mask) = &lcache.drop1 {
                d_branch *= mask;
            }
            let (dq, dk) = layer.self_attn.backward(
                &lcache.self_attn,
                &d_branch,
                self.config.heads,
                &mut lgrads.self_attn,
            );
            dy += &layer.ln1.backward(&lcache.ln1, &(dq + dk), &mut lgrads.ln1);
        }
        self.embed_backward(&cache.tgt, dy, &cache.dec.drop_in, grads);

        let mut dx = self
            .params
            .enc_norm
            .backward(&cache.enc.norm, &d_enc_out, &mut grads.enc_norm);
        for (layer, lcache, lgrads) in rev_lockstep(&self.params.enc, &cache.enc.layers, &mut grads.enc)
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
        self.embed_backward(&cache.src, dx, &cache.enc.drop_in, grads);
    }

    /// Loss sum over labelled positions; positions with no label (padding)
    /// are excluded entirely. Gradient sums accumulate into `grads`.
    /// `batch_tag` identifies the batch in the non-finite loss error.
    pub fn loss_and_grads(
        &self,
        src: &[u32],
        tgt_in: &[u32],
        labels: &[Option<LabelRowView<'_>>],
        rng: Option<&mut ChaCha8Rng>,
        batch_tag: u64,
        grads: &mut Seq2SeqParams<T>,
    ) -> Result<(T, usize), ModelError> {
        if labels.len() != tgt_in.len() {
            return Err(ModelError::LabelCountMismatch {
                labels: labels.len(),
                positions: tgt_in.len(),
            });
        }
        if labels.iter().all(|l| l.is_none()) {
            return Ok((T::zero(), 0));
        }
        let cache = self.forward_train(src, tgt_in, rng)?;
        let mut loss = T::zero();
        let mut counted = 0;
        let mut dlogits: Array2<T> = Array2::zeros(cache.dec.logits.raw_dim());
        for (i, label) in labels.iter().enumerate() {
            let Some(label) = label else { continue };
            let row = cache.dec.logits.row(i);
            loss = loss + soft_cross_entropy(row, label)?;
            dlogits.row_mut(i).assign(&soft_cross_entropy_grad(row, label)?);
            counted += 1;
        }
        if !loss.to_f64().expect("scalar converts").is_finite() {
            return Err(ModelError::NonFiniteLoss { batch: batch_tag });
        }
        self.backward(&cache, &dlogits, grads);
        Ok((loss, counted))
    }

    /// Loss sum without gradients (dropout off). Same counting rules as
    /// `loss_and_grads`.
    pub fn loss_only(
        &self,
        src: &[u32],
        tgt_in: &[u32],
        labels: &[Option<LabelRowView<'_>>],
    ) -> Result<(T, usize), ModelError> {
        if labels.len() != tgt_in.len() {
            return Err(ModelError::LabelCountMismatch {
                labels: labels.len(),
                positions: tgt_in.len(),
            });
        }
        if labels.iter().all(|l| l.is_none()) {
            return Ok((T::zero(), 0));
        }
        let cache = self.forward_train(src, tgt_in, None)?;
        let mut loss = T::zero();
        let mut counted = 0;
        for (i, label) in labels.iter().enumerate() {
            let Some(label) = label else { continue };
            loss = loss + soft_cross_entropy(cache.dec.logits.row(i), label)?;
            counted += 1;
        }
        Ok((loss, counted))
    }

    /// Runs the encoder once for decoding.
    pub fn encode(&self, src: &[u32]) -> Result<EncodedSource<T>, ModelError> {
        let pass = self.encode_pass(src, None)?;
        Ok(EncodedSource {
            out: pass.out,
            valid: pass.valid,
        })
    }

    /// Fresh decoder state over an encoded source. Cross-attention keys and
    /// values are projected once here.
    pub fn begin_decode(&self, enc: &EncodedSource<T>) -> DecodeState<T> {
        let d = self.config.d_model;
        let mut cross_k = Vec::with_capacity(self.params.dec.len());
        let mut cross_v = Vec::with_capacity(self.params.dec.len());
        for layer in &self.params.dec {
            cross_k.push(enc.out.dot(&layer.cross_attn.k.w.t()) + &layer.cross_attn.k.b);
            cross_v.push(enc.out.dot(&layer.cross_attn.v.w.t()) + &layer.cross_attn.v.b);
        }
        DecodeState {
            len: 0,
            self_k: vec![Array2::zeros((0, d)); self.params.dec.len()],
            self_v: vec![Array2::zeros((0, d)); self.params.dec.len()],
            cross_k,
            cross_v,
            src_valid: enc.valid.clone(),
        }
    }

    /// One attention read for a single query row against cached keys/values.
    fn attend_row(
        &self,
        q: &Array2<T>,
        keys: &Array2<T>,
        vals: &Array2<T>,
        valid: Option<&[bool]>,
        o: &super::Linear<T>,
    ) -> Array2<T> {
        let heads = self.config.heads;
        let d = self.config.d_model;
        let dk = d / heads;
        let scale = T::one() / T::from(dk).unwrap().sqrt();
        let mut concat = Array2::zeros((1, d));
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = q.slice(s![0, cols.clone()]);
            let kh = keys.slice(s![.., cols.clone()]);
            let vh = vals.slice(s![.., cols.clone()]);
            let mut scores: Vec<T> = kh.rows().into_iter().map(|k| k.dot(&qh) * scale).collect();
            masked_softmax_row(&mut scores, |j| valid.map_or(true, |v| v[j]));
            for (j, weight) in scores.iter().enumerate() {
                if *weight != T::zero() {
                    let mut slot = concat.slice_mut(s![0, cols.clone()]);
                    slot += &(&vh.row(j) * *weight);
                }
            }
        }
        concat.dot(&o.w.t()) + &o.b
    }

    /// Feeds one token and returns next-token logits. Arithmetic matches the
    /// full forward pass on the same prefix.
    pub fn decode_step(
        &self,
        state: &mut DecodeState<T>,
        token: u32,
    ) -> Result<Array1<T>, ModelError> {
        if token as usize >= self.config.vocab {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab: self.config.vocab,
            });
        }
        if state.len >= self.config.max_positions {
            return Err(ModelError::TooLong {
                len: state.len + 1,
                max: self.config.max_positions,
            });
        }
        let d = self.config.d_model;
        let scale = T::from(d as f64).unwrap().sqrt();
        let mut x = Array2::zeros((1, d));
        for j in 0..d {
            x[[0, j]] = self.params.embed[[token as usize, j]] * scale + self.pos[[state.len, j]];
        }
        for (l, layer) in self.params.dec.iter().enumerate() {
            let (h, _) = layer.ln1.forward(&x);
            let k_new = h.dot(&layer.self_attn.k.w.t()) + &layer.self_attn.k.b;
            let v_new = h.dot(&layer.self_attn.v.w.t()) + &layer.self_attn.v.b;
            state.self_k[l].push_row(k_new.row(0)).expect("width fixed");
            state.self_v[l].push_row(v_new.row(0)).expect("width fixed");
            let q = h.dot(&layer.self_attn.q.w.t()) + &layer.self_attn.q.b;
            let a = self.attend_row(&q, &state.self_k[l], &state.self_v[l], None, &layer.self_attn.o);
            x += &a;
            let (h, _) = layer.ln2.forward(&x);
            let q = h.dot(&layer.cross_attn.q.w.t()) + &layer.cross_attn.q.b;
            let c = self.attend_row(
                &q,
                &state.cross_k[l],
                &state.cross_v[l],
                Some(&state.src_valid),
                &layer.cross_attn.o,
            );
            x += &c;
            let (h, _) = layer.ln3.forward(&x);
            let (f, _) = layer.ffn.forward(&h);
            x += &f;
        }
        let (hidden, _) = self.params.dec_norm.forward(&x);
        let logits = match &self.params.out {
            Some(w) => hidden.dot(&w.t()),
            None => hidden.dot(&self.params.embed.t()),
        };
        state.len += 1;
        Ok(logits.row(0).to_owned())
    }
}

/// Reverse lockstep iteration over layers, their caches, and their gradient
/// mirrors.
fn rev_lockstep<'a, L, C, G>(
    layers: &'a [L],
    caches: &'a [C],
    grads: &'a mut [G],
) -> impl Iterator<Item = (&'a L, &'a C, &'a mut G)> {
    layers
        .iter()
        .rev()
        .zip(caches.iter().rev())
        .zip(grads.iter_mut().rev())
        .map(|((l, c), g)| (l, c, g))
}
