//! Gloss-to-spoken-text translation toolkit.
//!
//! The crate covers the full desk-scale pipeline for translating sign-language
//! gloss sequences into spoken sentences:
//!
//! - [`corpus`]: parallel-data ingestion, normalization, splits, and silver-pair merging
//! - [`tokenizer`]: byte-pair-encoding subwords with word-start tracking
//! - [`embeddings`]: word vectors, cosine similarity, and the thresholded similarity index
//! - [`sals`]: similarity-aware soft label distributions and the soft cross-entropy loss
//! - [`model`]: a compact encoder-decoder transformer (plus a decoder-only variant) with
//!   analytic gradients, gradient checking, and low-rank adapters
//! - [`engine`]: AdamW training loop and beam-search decoding
//! - [`augment`]: back-translation and pivot-paraphrase silver-data generation
//! - [`metrics`]: BLEU-1..4, ROUGE-L, chrF++, and bucketed F-measure analyses
//! - [`synth`]: deterministic synthetic corpora for capability checks and benches
//!
//! Data-parallel inner loops (similarity index construction, per-sentence scoring,
//! batched gradient computation, per-pair augmentation) run on rayon when the
//! `parallel` feature is enabled (the default) and fall back to sequential
//! execution otherwise. Results are identical either way.

pub mod augment;
pub mod corpus;
pub mod embeddings;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod par;
pub mod sals;
pub mod synth;
pub mod tokenizer;

pub use corpus::{CorpusSplit, Origin, ParallelPair, SplitName};
pub use embeddings::{SimilarityIndex, WordEmbeddingTable};
pub use engine::{DecodeConfig, Direction, TrainConfig, TrainReport};
pub use metrics::EvalReport;
pub use model::{DecoderOnly, LoraAdapter, LoraConfig, ModelConfig, Seq2Seq};
pub use sals::{SmoothingConfig, SmoothingMode, SoftLabelPlan};
pub use tokenizer::{BpeModel, TokenizedSequence};
