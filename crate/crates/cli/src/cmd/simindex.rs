//! Builds the word-similarity index that drives label smoothing.

use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::Args;
use glosskit::corpus::{self, SplitName};
use glosskit::embeddings::{SimilarityIndex, WordEmbeddingTable};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct BuildSimArgs {
    /// Word embedding table: 'count dim' header then one word per line.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Corpus TSV files supplying the vocabulary to index.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Which side's words to index: text, gloss, or both.
    #[arg(long, default_value = "text")]
    pub side: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn run(args: &BuildSimArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let threshold: f32 = cfg.get("threshold")?.unwrap_or(0.6);
    if !["text", "gloss", "both"].contains(&args.side.as_str()) {
        return Err(CliError::Usage(format!(
            "--side '{}' is not text, gloss, or both",
            args.side
        )));
    }

    let out_file = args.out_dir.join("sim_index.json");
    let mut manifest = RunManifest::new("build-sim", cfg.seed()?, cfg.resolved());
    manifest.record_input(&args.embeddings)?;
    for path in &args.corpus {
        manifest.record_input(path)?;
    }
    manifest.declare_output(&out_file);
    manifest.write(&args.out_dir)?;

    let mut words: BTreeSet<String> = BTreeSet::new();
    for path in &args.corpus {
        let split = corpus::load_tsv(path, SplitName::Train)?;
        for pair in split.pairs() {
            if args.side != "gloss" {
                words.extend(pair.text.split_whitespace().map(str::to_string));
            }
            if args.side != "text" {
                words.extend(pair.gloss.iter().cloned());
            }
        }
    }
    let words: Vec<String> = words.into_iter().collect();

    let table = WordEmbeddingTable::load(&args.embeddings)?;
    let covered = words.iter().filter(|w| table.contains(w)).count();
    let index = SimilarityIndex::build(&table, &words, threshold)?;
    index.save(&out_file)?;

    let with_neighbors = words
        .iter()
        .filter(|w| !index.neighbors(w).is_empty())
        .count();
    if json_lines {
        println!(
            "{}",
            serde_json::json!({
                "words": words.len(),
                "covered": covered,
                "with_neighbors": with_neighbors,
                "threshold": threshold,
                "output": out_file.display().to_string(),
            })
        );
    } else {
        println!(
            "{} words ({} covered by embeddings), {} with neighbors at threshold {threshold} -> {}",
            words.len(),
            covered,
            with_neighbors,
            out_file.display()
        );
    }
    Ok(())
}
