//! Encoder-decoder transformer with hand-written gradients, plus a
//! decoder-only variant, low-rank adapters, checkpointing, and a finite
//! difference gradient checker. Forward and backward are generic over the
//! scalar: f32 for training, f64 for gradient checking.

mod blocks;
mod checkpoint;
mod deconly;
mod gradcheck;
mod lora;
mod seq2seq;

pub use blocks::{Attention, FeedForward, LayerNorm, Linear};
pub use checkpoint::{load_adapter, load_seq2seq, save_adapter, save_seq2seq, CheckpointMeta};
pub use deconly::{pair_ids, pair_loss_span, DecoderOnly, SEPARATOR};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_PARAM_LIMIT};
pub use lora::{LoraAdapter, LoraConfig, LoraGrads};
pub use seq2seq::{DecodeState, EncodedSource, Seq2Seq, TrainCache};

use ndarray::{Array1, Array2, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sals::SalsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model width {d_model} does not split into {heads} heads")]
    HeadSplit { d_model: usize, heads: usize },
    #[error("configuration field {field} must be positive")]
    ZeroField { field: &'static str },
    #[error("dropout rate {rate} is outside [0, 1)")]
    BadDropout { rate: f32 },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds the {max} supported positions")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence passed to the model")]
    EmptySequence,
    #[error("label list has {labels} entries for {positions} target positions")]
    LabelCountMismatch { labels: usize, positions: usize },
    #[error("loss for batch {batch} is not finite")]
    NonFiniteLoss { batch: u64 },
    #[error(
        "gradient checking supports at most {limit} parameters, got {count}; shrink the model dimensions"
    )]
    TooManyParams { count: usize, limit: usize },
    #[error("adapter rank {rank} exceeds the smaller side of a {d_out}x{d_in} weight")]
    RankTooLarge { rank: usize, d_in: usize, d_out: usize },
    #[error("adapter was built for base checksum {expected}, model has {found}")]
    AdapterMismatch { expected: String, found: String },
    #[error("flat parameter vector has {found} values, model needs {expected}")]
    FlatSizeMismatch { expected: usize, found: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint version {found} is not supported")]
    UnsupportedVersion { found: u32 },
    #[error(transparent)]
    Label(#[from] SalsError),
}

/// Architecture hyperparameters. `enc_layers` is ignored by the decoder-only
/// variant.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab: usize,
    pub dropout: f32,
    pub tied_output: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on a laptop CPU.
    pub fn desk(vocab: usize) -> Self {
        Self {
            d_model: 128,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 256,
            max_positions: 512,
            vocab,
            dropout: 0.1,
            tied_output: true,
        }
    }

    /// Tiny configuration sized for exhaustive gradient checking.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            max_positions: 32,
            vocab,
            dropout: 0.0,
            tied_output: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, value) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("vocab", self.vocab),
        ] {
            if value == 0 {
                return Err(ModelError::ZeroField { field });
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::HeadSplit {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadDropout { rate: self.dropout });
        }
        Ok(())
    }
}

/// Read-only view of one parameter tensor during traversal.
pub enum TensorView<'a, T> {
    M(&'a Array2<T>),
    V(&'a Array1<T>),
}

/// Mutable view of one parameter tensor during traversal.
pub enum TensorViewMut<'a, T> {
    M(&'a mut Array2<T>),
    V(&'a mut Array1<T>),
}

impl<T: NdFloat> TensorView<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            TensorView::M(a) => a.len(),
            TensorView::V(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn for_each(&self, mut f: impl FnMut(T)) {
        match self {
            TensorView::M(a) => a.iter().for_each(|v| f(*v)),
            TensorView::V(a) => a.iter().for_each(|v| f(*v)),
        }
    }
}

impl<T: NdFloat> TensorViewMut<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            TensorViewMut::M(a) => a.len(),
            TensorViewMut::V(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill_from(&mut self, mut f: impl FnMut() -> T) {
        match self {
            TensorViewMut::M(a) => a.iter_mut().for_each(|v| *v = f()),
            TensorViewMut::V(a) => a.iter_mut().for_each(|v| *v = f()),
        }
    }

    pub fn map_in_place(&mut self, mut f: impl FnMut(T) -> T) {
        match self {
            TensorViewMut::M(a) => a.iter_mut().for_each(|v| *v = f(*v)),
            TensorViewMut::V(a) => a.iter_mut().for_each(|v| *v = f(*v)),
        }
    }
}

/// Self-attention plus feed-forward block. Serves as the encoder layer and,
/// with a causal mask, as the decoder-only layer.
#[derive(Debug, Clone)]
pub struct SelfAttnLayer<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// Decoder layer: causal self-attention, cross-attention over the encoder,
/// feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer<T> {
    pub ln1: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ln3: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// Full parameter set of the encoder-decoder model. Traversal order is the
/// canonical order for flattening and checkpoints.
#[derive(Debug, Clone)]
pub struct Seq2SeqParams<T> {
    pub embed: Array2<T>,
    pub enc: Vec<SelfAttnLayer<T>>,
    pub enc_norm: LayerNorm<T>,
    pub dec: Vec<DecoderLayer<T>>,
    pub dec_norm: LayerNorm<T>,
    /// Output projection rows (vocab x d_model); absent when the output is
    /// tied to the embedding table.
    pub out: Option<Array2<T>>,
}

/// Parameter set of the decoder-only variant.
#[derive(Debug, Clone)]
pub struct DecOnlyParams<T> {
    pub embed: Array2<T>,
    pub layers: Vec<SelfAttnLayer<T>>,
    pub norm: LayerNorm<T>,
    pub out: Option<Array2<T>>,
}

fn visit_linear<'a, T>(
    name: &str,
    lin: &'a Linear<T>,
    f: &mut dyn FnMut(String, TensorView<'a, T>),
) {
    f(format!("{name}.w"), TensorView::M(&lin.w));
    f(format!("{name}.b"), TensorView::V(&lin.b));
}

fn visit_linear_mut<T>(
    name: &str,
    lin: &mut Linear<T>,
    f: &mut dyn FnMut(String, TensorViewMut<'_, T>),
) {
    f(format!("{name}.w"), TensorViewMut::M(&mut lin.w));
    f(format!("{name}.b"), TensorViewMut::V(&mut lin.b));
}

fn visit_norm<'a, T>(
    name: &str,
    ln: &'a LayerNorm<T>,
    f: &mut dyn FnMut(String, TensorView<'a, T>),
) {
    f(format!("{name}.g"), TensorView::V(&ln.g));
    f(format!("{name}.b"), TensorView::V(&ln.b));
}

fn visit_norm_mut<T>(
    name: &str,
    ln: &mut LayerNorm<T>,
    f: &mut dyn FnMut(String, TensorViewMut<'_, T>),
) {
    f(format!("{name}.g"), TensorViewMut::V(&mut ln.g));
    f(format!("{name}.b"), TensorViewMut::V(&mut ln.b));
}

fn visit_attn<'a, T>(
    name: &str,
    attn: &'a Attention<T>,
    f: &mut dyn FnMut(String, TensorView<'a, T>),
) {
    visit_linear(&format!("{name}.q"), &attn.q, f);
    visit_linear(&format!("{name}.k"), &attn.k, f);
    visit_linear(&format!("{name}.v"), &attn.v, f);
    visit_linear(&format!("{name}.o"), &attn.o, f);
}

fn visit_attn_mut<T>(
    name: &str,
    attn: &mut Attention<T>,
    f: &mut dyn FnMut(String, TensorViewMut<'_, T>),
) {
    visit_linear_mut(&format!("{name}.q"), &mut attn.q, f);
    visit_linear_mut(&format!("{name}.k"), &mut attn.k, f);
    visit_linear_mut(&format!("{name}.v"), &mut attn.v, f);
    visit_linear_mut(&format!("{name}.o"), &mut attn.o, f);
}

fn visit_ffn<'a, T>(
    name: &str,
    ffn: &'a FeedForward<T>,
    f: &mut dyn FnMut(String, TensorView<'a, T>),
) {
    visit_linear(&format!("{name}.w1"), &ffn.w1, f);
    visit_linear(&format!("{name}.w2"), &ffn.w2, f);
}

fn visit_ffn_mut<T>(
    name: &str,
    ffn: &mut FeedForward<T>,
    f: &mut dyn FnMut(String, TensorViewMut<'_, T>),
) {
    visit_linear_mut(&format!("{name}.w1"), &mut ffn.w1, f);
    visit_linear_mut(&format!("{name}.w2"), &mut ffn.w2, f);
}

fn visit_self_layer<'a, T>(
    name: &str,
    layer: &'a SelfAttnLayer<T>,
    f: &mut dyn FnMut(String, TensorView<'a, T>),
) {
    visit_norm(&format!("{name}.ln1"), &layer.ln1, f);
    visit_attn(&format!("{name}.attn"), &layer.attn, f);
    visit_norm(&format!("{name}.ln2"), &layer.ln2, f);
    visit_ffn(&format!("{name}.ffn"), &layer.ffn, f);
}

fn visit_self_layer_mut<T>(
    name: &str,
    layer: &mut SelfAttnLayer<T>,
    f: &mut dyn FnMut(String, TensorViewMut<'_, T>),
) {
    visit_norm_mut(&format!("{name}.ln1"), &mut layer.ln1, f);
    visit_attn_mut(&format!("{name}.attn"), &mut layer.attn, f);
    visit_norm_mut(&format!("{name}.ln2"), &mut layer.ln2, f);
    visit_ffn_mut(&format!("{name}.ffn"), &mut layer.ffn, f);
}

impl<T: NdFloat> Seq2SeqParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorView<'a, T>)) {
        f("embed".to_string(), TensorView::M(&self.embed));
        for (i, layer) in self.enc.iter().enumerate() {
            visit_self_layer(&format!("enc.{i}"), layer, f);
        }
        visit_norm("enc.norm", &self.enc_norm, f);
        for (i, layer) in self.dec.iter().enumerate() {
            let name = format!("dec.{i}");
            visit_norm(&format!("{name}.ln1"), &layer.ln1, f);
            visit_attn(&format!("{name}.self"), &layer.self_attn, f);
            visit_norm(&format!("{name}.ln2"), &layer.ln2, f);
            visit_attn(&format!("{name}.cross"), &layer.cross_attn, f);
            visit_norm(&format!("{name}.ln3"), &layer.ln3, f);
            visit_ffn(&format!("{name}.ffn"), &layer.ffn, f);
        }
        visit_norm("dec.norm", &self.dec_norm, f);
        if let Some(out) = &self.out {
            f("out.w".to_string(), TensorView::M(out));
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, TensorViewMut<'_, T>)) {
        f("embed".to_string(), TensorViewMut::M(&mut self.embed));
        for (i, layer) in self.enc.iter_mut().enumerate() {
            visit_self_layer_mut(&format!("enc.{i}"), layer, f);
        }
        visit_norm_mut("enc.norm", &mut self.enc_norm, f);
        for (i, layer) in self.dec.iter_mut().enumerate() {
            let name = format!("dec.{i}");
            visit_norm_mut(&format!("{name}.ln1"), &mut layer.ln1, f);
            visit_attn_mut(&format!("{name}.self"), &mut layer.self_attn, f);
            visit_norm_mut(&format!("{name}.ln2"), &mut layer.ln2, f);
            visit_attn_mut(&format!("{name}.cross"), &mut layer.cross_attn, f);
            visit_norm_mut(&format!("{name}.ln3"), &mut layer.ln3, f);
            visit_ffn_mut(&format!("{name}.ffn"), &mut layer.ffn, f);
        }
        visit_norm_mut("dec.norm", &mut self.dec_norm, f);
        if let Some(out) = &mut self.out {
            f("out.w".to_string(), TensorViewMut::M(out));
        }
    }
}

impl<T: NdFloat> DecOnlyParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorView<'a, T>)) {
        f("embed".to_string(), TensorView::M(&self.embed));
        for (i, layer) in self.layers.iter().enumerate() {
            visit_self_layer(&format!("layer.{i}"), layer, f);
        }
        visit_norm("norm", &self.norm, f);
        if let Some(out) = &self.out {
            f("out.w".to_string(), TensorView::M(out));
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, TensorViewMut<'_, T>)) {
        f("embed".to_string(), TensorViewMut::M(&mut self.embed));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit_self_layer_mut(&format!("layer.{i}"), layer, f);
        }
        visit_norm_mut("norm", &mut self.norm, f);
        if let Some(out) = &mut self.out {
            f("out.w".to_string(), TensorViewMut::M(out));
        }
    }
}

macro_rules! flat_ops {
    ($ty:ident) => {
        impl<T: NdFloat> $ty<T> {
            pub fn param_count(&self) -> usize {
                let mut n = 0;
                self.visit(&mut |_, view| n += view.len());
                n
            }

            pub fn flatten(&self) -> Vec<T> {
                let mut out = Vec::with_capacity(self.param_count());
                self.visit(&mut |_, view| view.for_each(|v| out.push(v)));
                out
            }

            pub fn assign_flat(&mut self, values: &[T]) -> Result<(), ModelError> {
                let expected = self.param_count();
                if values.len() != expected {
                    return Err(ModelError::FlatSizeMismatch {
                        expected,
                        found: values.len(),
                    });
                }
                let mut it = values.iter();
                self.visit_mut(&mut |_, mut view| {
                    view.fill_from(|| *it.next().expect("length checked"));
                });
                Ok(())
            }

            pub fn zeroed(&self) -> Self {
                let mut copy = self.clone();
                copy.visit_mut(&mut |_, mut view| view.fill_from(|| T::zero()));
                copy
            }

            pub fn scale(&mut self, factor: T) {
                self.visit_mut(&mut |_, mut view| view.map_in_place(|v| v * factor));
            }

            /// SHA-256 over all tensors as little-endian f32 bytes, in
            /// traversal order. Stable fingerprint for freeze contracts.
            pub fn checksum(&self) -> String {
                let mut hasher = Sha256::new();
                self.visit(&mut |_, view| {
                    view.for_each(|v| {
                        let bits = v.to_f32().expect("fits f32").to_le_bytes();
                        hasher.update(bits);
                    })
                });
                let digest = hasher.finalize();
                let mut hex = String::with_capacity(64);
                for byte in digest {
                    hex.push_str(&format!("{byte:02x}"));
                }
                hex
            }
        }
    };
}

flat_ops!(Seq2SeqParams);
flat_ops!(DecOnlyParams);

fn add_linear<T: NdFloat>(dst: &mut Linear<T>, src: &Linear<T>) {
    dst.w += &src.w;
    dst.b += &src.b;
}

fn add_norm<T: NdFloat>(dst: &mut LayerNorm<T>, src: &LayerNorm<T>) {
    dst.g += &src.g;
    dst.b += &src.b;
}

fn add_attn<T: NdFloat>(dst: &mut Attention<T>, src: &Attention<T>) {
    add_linear(&mut dst.q, &src.q);
    add_linear(&mut dst.k, &src.k);
    add_linear(&mut dst.v, &src.v);
    add_linear(&mut dst.o, &src.o);
}

fn add_ffn<T: NdFloat>(dst: &mut FeedForward<T>, src: &FeedForward<T>) {
    add_linear(&mut dst.w1, &src.w1);
    add_linear(&mut dst.w2, &src.w2);
}

fn add_self_layer<T: NdFloat>(dst: &mut SelfAttnLayer<T>, src: &SelfAttnLayer<T>) {
    add_norm(&mut dst.ln1, &src.ln1);
    add_attn(&mut dst.attn, &src.attn);
    add_norm(&mut dst.ln2, &src.ln2);
    add_ffn(&mut dst.ffn, &src.ffn);
}

impl<T: NdFloat> Seq2SeqParams<T> {
    /// Elementwise accumulation of a same-shape parameter set. Used to fold
    /// per-sentence gradients in a fixed order.
    pub fn add_from(&mut self, other: &Self) {
        self.embed += &other.embed;
        for (dst, src) in self.enc.iter_mut().zip(&other.enc) {
            add_self_layer(dst, src);
        }
        add_norm(&mut self.enc_norm, &other.enc_norm);
        for (dst, src) in self.dec.iter_mut().zip(&other.dec) {
            add_norm(&mut dst.ln1, &src.ln1);
            add_attn(&mut dst.self_attn, &src.self_attn);
            add_norm(&mut dst.ln2, &src.ln2);
            add_attn(&mut dst.cross_attn, &src.cross_attn);
            add_norm(&mut dst.ln3, &src.ln3);
            add_ffn(&mut dst.ffn, &src.ffn);
        }
        add_norm(&mut self.dec_norm, &other.dec_norm);
        if let (Some(dst), Some(src)) = (&mut self.out, &other.out) {
            *dst += src;
        }
    }
}

impl<T: NdFloat> DecOnlyParams<T> {
    /// Elementwise accumulation of a same-shape parameter set.
    pub fn add_from(&mut self, other: &Self) {
        self.embed += &other.embed;
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            add_self_layer(dst, src);
        }
        add_norm(&mut self.norm, &other.norm);
        if let (Some(dst), Some(src)) = (&mut self.out, &other.out) {
            *dst += src;
        }
    }
}

fn init_linear<T: NdFloat>(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Linear<T> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
        T::from(rng.random_range(-bound..bound)).unwrap()
    });
    Linear {
        w,
        b: Array1::zeros(out_dim),
    }
}

fn init_attn<T: NdFloat>(rng: &mut ChaCha8Rng, dim: usize) -> Attention<T> {
    Attention {
        q: init_linear(rng, dim, dim),
        k: init_linear(rng, dim, dim),
        v: init_linear(rng, dim, dim),
        o: init_linear(rng, dim, dim),
    }
}

fn init_self_layer<T: NdFloat>(rng: &mut ChaCha8Rng, dim: usize, ffn_dim: usize) -> SelfAttnLayer<T> {
    SelfAttnLayer {
        ln1: LayerNorm::identity(dim),
        attn: init_attn(rng, dim),
        ln2: LayerNorm::identity(dim),
        ffn: FeedForward {
            w1: init_linear(rng, ffn_dim, dim),
            w2: init_linear(rng, dim, ffn_dim),
        },
    }
}

fn init_decoder_layer<T: NdFloat>(rng: &mut ChaCha8Rng, dim: usize, ffn_dim: usize) -> DecoderLayer<T> {
    DecoderLayer {
        ln1: LayerNorm::identity(dim),
        self_attn: init_attn(rng, dim),
        ln2: LayerNorm::identity(dim),
        cross_attn: init_attn(rng, dim),
        ln3: LayerNorm::identity(dim),
        ffn: FeedForward {
            w1: init_linear(rng, ffn_dim, dim),
            w2: init_linear(rng, dim, ffn_dim),
        },
    }
}

fn init_embed<T: NdFloat>(rng: &mut ChaCha8Rng, vocab: usize, dim: usize) -> Array2<T> {
    let bound = 1.0 / (dim as f64).sqrt();
    Array2::from_shape_fn((vocab, dim), |_| {
        T::from(rng.random_range(-bound..bound)).unwrap()
    })
}

/// Fixed sine/cosine position table, (max_positions x d_model).
fn sinusoidal_positions<T: NdFloat>(max_positions: usize, dim: usize) -> Array2<T> {
    Array2::from_shape_fn((max_positions, dim), |(p, j)| {
        let pair = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        let value = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        T::from(value).unwrap()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn desk_config_is_valid() {
        assert!(ModelConfig::desk(5000).validate().is_ok());
    }

    #[test]
    fn head_split_is_rejected() {
        let mut cfg = ModelConfig::desk(100);
        cfg.heads = 3;
        assert!(matches!(
            cfg.validate(),
            Err(ModelError::HeadSplit { d_model: 128, heads: 3 })
        ));
    }

    #[test]
    fn dropout_of_one_is_rejected() {
        let mut cfg = ModelConfig::desk(100);
        cfg.dropout = 1.0;
        assert!(matches!(cfg.validate(), Err(ModelError::BadDropout { .. })));
    }

    #[test]
    fn flatten_round_trips_through_assign() {
        let model = Seq2Seq::<f64>::new(ModelConfig::tiny(12), 5).unwrap();
        let flat = model.params().flatten();
        let mut copy = model.params().zeroed();
        copy.assign_flat(&flat).unwrap();
        assert_eq!(copy.flatten(), flat);
    }

    #[test]
    fn assign_flat_rejects_wrong_length() {
        let model = Seq2Seq::<f64>::new(ModelConfig::tiny(12), 5).unwrap();
        let mut params = model.params().clone();
        let err = params.assign_flat(&[0.0; 3]).unwrap_err();
        assert!(matches!(err, ModelError::FlatSizeMismatch { .. }));
    }

    #[test]
    fn add_from_and_scale_match_flat_arithmetic() {
        let a = Seq2Seq::<f64>::new(ModelConfig::tiny(9), 1).unwrap();
        let b = Seq2Seq::<f64>::new(ModelConfig::tiny(9), 2).unwrap();
        let mut acc = a.params().clone();
        acc.add_from(b.params());
        let expect: Vec<f64> = a
            .params()
            .flatten()
            .iter()
            .zip(b.params().flatten())
            .map(|(x, y)| x + y)
            .collect();
        assert_eq!(acc.flatten(), expect);
        acc.scale(0.5);
        let halved: Vec<f64> = expect.iter().map(|x| x * 0.5).collect();
        assert_eq!(acc.flatten(), halved);
    }

    #[test]
    fn tiny_config_fits_grad_check_budget() {
        let model = Seq2Seq::<f64>::new(ModelConfig::tiny(20), 1).unwrap();
        assert!(model.params().param_count() <= GRAD_CHECK_PARAM_LIMIT);
    }

    #[test]
    fn checksum_changes_with_any_parameter() {
        let model = Seq2Seq::<f32>::new(ModelConfig::tiny(10), 9).unwrap();
        let before = model.params().checksum();
        let mut params = model.params().clone();
        params.embed[[0, 0]] += 1.0;
        assert_ne!(before, params.checksum());
        assert_eq!(before.len(), 64);
    }

    #[test]
    fn untied_model_exposes_output_tensor() {
        let mut cfg = ModelConfig::tiny(10);
        cfg.tied_output = false;
        let model = Seq2Seq::<f32>::new(cfg, 2).unwrap();
        let mut names = Vec::new();
        model.params().visit(&mut |name, _| names.push(name));
        assert_eq!(names.last().unwrap(), "out.w");
        let tied = Seq2Seq::<f32>::new(ModelConfig::tiny(10), 2).unwrap();
        let mut tied_names = Vec::new();
        tied.params().visit(&mut |name, _| tied_names.push(name));
        assert!(!tied_names.iter().any(|n| n == "out.w"));
    }

    #[test]
    fn position_table_matches_closed_form() {
        let pos = sinusoidal_positions::<f64>(4, 6);
        assert!((pos[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((pos[[0, 1]] - 1.0).abs() < 1e-12);
        let angle: f64 = 3.0 / 10000f64.powf(2.0 / 6.0);
        assert!((pos[[3, 2]] - angle.sin()).abs() < 1e-12);
        assert!((pos[[3, 3]] - angle.cos()).abs() < 1e-12);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Seq2Seq::<f32>::new(ModelConfig::tiny(15), 77).unwrap();
        let b = Seq2Seq::<f32>::new(ModelConfig::tiny(15), 77).unwrap();
        assert_eq!(a.params().flatten(), b.params().flatten());
        let c = Seq2Seq::<f32>::new(ModelConfig::tiny(15), 78).unwrap();
        assert_ne!(a.params().flatten(), c.params().flatten());
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin: Linear<f64> = init_linear(&mut rng, 64, 16);
        let bound = 1.0 / 4.0;
        assert!(lin.w.iter().all(|v| v.abs() <= bound));
        assert!(lin.w.iter().any(|v| v.abs() > bound / 2.0));
        assert!(lin.b.iter().all(|v| *v == 0.0));
    }
}
