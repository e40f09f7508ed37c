//! Throughput comparison of the pooled and single-thread execution paths.
//! Every group times the same function twice: once on the default worker
//! pool and once pinned to one thread through `par::run_serial`.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glosskit::embeddings::{SimilarityIndex, WordEmbeddingTable};
use glosskit::engine::{self, DecodeConfig};
use glosskit::metrics;
use glosskit::model::{ModelConfig, Seq2Seq};
use glosskit::par;
use glosskit::synth;
use glosskit::tokenizer::BpeModel;

/// Random unit vectors over an invented vocabulary, large enough that the
/// pairwise neighbor sweep dominates setup cost.
fn random_table(words: usize, dim: usize) -> (WordEmbeddingTable, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut entries = Vec::with_capacity(words);
    for i in 0..words {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        v.iter_mut().for_each(|x| *x /= norm);
        entries.push((format!("w{i:04}"), v));
    }
    let vocab: Vec<String> = entries.iter().map(|(w, _)| w.clone()).collect();
    let table = WordEmbeddingTable::from_pairs(entries).expect("nonempty");
    (table, vocab)
}

fn bench_sim_index(c: &mut Criterion) {
    let (table, vocab) = random_table(400, 64);
    let mut group = c.benchmark_group("sim_index_build");
    group.bench_function("pooled", |b| {
        b.iter(|| SimilarityIndex::build(&table, &vocab, 0.6).unwrap())
    });
    group.bench_function("serial", |b| {
        b.iter(|| par::run_serial(|| SimilarityIndex::build(&table, &vocab, 0.6).unwrap()))
    });
    group.finish();
}

fn decode_fixture() -> (Seq2Seq<f32>, BpeModel, Vec<String>, DecodeConfig) {
    let corpus = synth::reversal_corpus(120, 7);
    let sentences = corpus.all_sentences();
    let tokenizer = BpeModel::train(&sentences, 256).expect("trains");
    let model = Seq2Seq::new(
        ModelConfig {
            d_model: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 64,
            max_positions: 64,
            vocab: tokenizer.vocab_len(),
            dropout: 0.0,
            tied_output: true,
        },
        5,
    )
    .expect("valid config");
    let sources: Vec<String> = corpus.dev.iter().map(|p| p.gloss_joined()).collect();
    let decode = DecodeConfig {
        beam: 3,
        max_len: 16,
        length_penalty: 1.0,
    };
    (model, tokenizer, sources, decode)
}

fn bench_translate_batch(c: &mut Criterion) {
    let (model, tokenizer, sources, decode) = decode_fixture();
    let mut group = c.benchmark_group("translate_batch");
    group.sample_size(20);
    group.bench_function("pooled", |b| {
        b.iter(|| engine::translate_batch(&model, &tokenizer, &sources, &decode).unwrap())
    });
    group.bench_function("serial", |b| {
        b.iter(|| {
            par::run_serial(|| {
                engine::translate_batch(&model, &tokenizer, &sources, &decode).unwrap()
            })
        })
    });
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let corpus = synth::reversal_corpus(560, 13);
    let refs: Vec<String> = corpus.train.iter().map(|p| p.text.clone()).collect();
    // Hypotheses with realistic partial overlap: every third word dropped.
    let hyps: Vec<String> = refs
        .iter()
        .map(|r| {
            r.split_whitespace()
                .enumerate()
                .filter(|(i, _)| i % 3 != 2)
                .map(|(_, w)| w)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let mut group = c.benchmark_group("evaluate_corpus");
    group.bench_function("pooled", |b| {
        b.iter_batched(
            || (hyps.clone(), refs.clone()),
            |(h, r)| metrics::evaluate(&h, &r).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("serial", |b| {
        b.iter_batched(
            || (hyps.clone(), refs.clone()),
            |(h, r)| par::run_serial(|| metrics::evaluate(&h, &r).unwrap()),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_sim_index, bench_translate_batch, bench_evaluate);
criterion_main!(benches);
