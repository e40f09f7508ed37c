//! Trains the subword tokenizer over both sides of one or more splits.

use std::path::PathBuf;

use clap::Args;
use glosskit::corpus::{self, SplitName};
use glosskit::tokenizer::BpeModel;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    /// Corpus TSV files; every gloss and text line feeds the trainer.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn run(args: &TrainTokenizerArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let budget: usize = cfg.get("vocab_size")?.unwrap_or(2000);

    let out_file = args.out_dir.join("tokenizer.json");
    let mut manifest = RunManifest::new("train-tokenizer", cfg.seed()?, cfg.resolved());
    for path in &args.corpus {
        manifest.record_input(path)?;
    }
    manifest.declare_output(&out_file);
    manifest.write(&args.out_dir)?;

    let mut sentences = Vec::new();
    for path in &args.corpus {
        let split = corpus::load_tsv(path, SplitName::Train)?;
        sentences.extend(split.all_sentences());
    }
    let tok = BpeModel::train(&sentences, budget)?;
    tok.save(&out_file)?;

    if json_lines {
        println!(
            "{}",
            serde_json::json!({
                "sentences": sentences.len(),
                "vocab": tok.vocab_len(),
                "merges": tok.merge_rules().len(),
                "output": out_file.display().to_string(),
            })
        );
    } else {
        println!(
            "trained on {} sentences: vocabulary {}, {} merges -> {}",
            sentences.len(),
            tok.vocab_len(),
            tok.merge_rules().len(),
            out_file.display()
        );
    }
    Ok(())
}
