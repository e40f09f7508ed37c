use glosskit::engine::{pack_pairs, Direction};
use glosskit::sals::{SmoothingConfig, SoftLabelPlan};
use glosskit::synth;
use glosskit::tokenizer::BpeModel;

#[test]
#[ignore]
fn probe_target_entropy() {
    let corpus = synth::reversal_corpus(560, 11);
    let all: Vec<String> = corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.test)
        .flat_map(|p| [p.gloss_joined(), p.text.clone()])
        .collect();
    let tok = BpeModel::train(&all, 512).unwrap();
    let index = synth::synthetic_index(0.6, 5);
    let targets: Vec<String> = corpus.train.iter().map(|p| p.text.clone()).collect();
    let plan = SoftLabelPlan::build(&tok, &targets, Some(&index), SmoothingConfig::default())
        .unwrap();

    let packed = pack_pairs(&tok, &corpus.train, Direction::GlossToText);
    let mut total_h = 0.0f64;
    let mut n = 0usize;
    let mut max_h = 0.0f64;
    let mut start_count = 0usize;
    for pair in &packed {
        for (&gold, &start) in pair.tgt_out.iter().zip(&pair.starts) {
            let row = plan.row_for_position(gold, start).unwrap();
            let mut h = 0.0f64;
            let mut mass = 0.0f64;
            row.for_each(|_, p| {
                if p > 0.0 {
                    h -= p * p.ln();
                }
                mass += p;
            });
            total_h += h;
            max_h = max_h.max(h);
            if start {
                start_count += 1;
            }
            n += 1;
            assert!((mass - 1.0).abs() < 1e-4, "row mass {mass}");
        }
    }
    println!(
        "positions {n} (starts {start_count}), mean target entropy {:.4}, max {:.4}",
        total_h / n as f64,
        max_h
    );

    // Sample row for one synonym-pair member.
    let row = plan.word_row("wind").unwrap();
    let mut entries: Vec<(u32, f32)> = row.to_vec();
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("wind row, top 8 of {}:", entries.len());
    for (id, p) in entries.iter().take(8) {
        println!("  {:>5} {:?} {:.4}", id, tok.surface(*id), p);
    }
}
