//! Normalizes a raw corpus file into the toolkit's TSV split format.

use std::path::PathBuf;

use clap::Args;
use glosskit::corpus::{self, SplitName};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw corpus file.
    #[arg(long)]
    pub input: PathBuf,
    /// Input layout: 'phoenix' (pipe-separated annotation table) or 'tsv'.
    #[arg(long, default_value = "tsv")]
    pub format: String,
    /// Which split this file is.
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn run(args: &IngestArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let split_name = SplitName::parse(&args.split)
        .ok_or_else(|| CliError::Usage(format!("--split '{}' is not train, dev, or test", args.split)))?;

    let out_file = args.out_dir.join(format!("{split_name}.tsv"));
    let mut manifest = RunManifest::new("ingest", cfg.seed()?, cfg.resolved());
    manifest.record_input(&args.input)?;
    manifest.declare_output(&out_file);
    manifest.write(&args.out_dir)?;

    let split = match args.format.as_str() {
        "phoenix" => corpus::load_phoenix(&args.input, split_name)?,
        "tsv" => corpus::load_tsv(&args.input, split_name)?,
        other => {
            return Err(CliError::Usage(format!(
                "--format '{other}' is not phoenix or tsv"
            )))
        }
    };
    corpus::save_tsv(&split, &out_file)?;

    let (gloss_vocab, word_vocab) = corpus::vocab_stats(&split);
    if json_lines {
        println!(
            "{}",
            serde_json::json!({
                "split": split_name.as_str(),
                "pairs": split.len(),
                "gloss_vocab": gloss_vocab,
                "word_vocab": word_vocab,
                "output": out_file.display().to_string(),
            })
        );
    } else {
        println!(
            "{split_name}: {} pairs, {gloss_vocab} gloss labels, {word_vocab} words -> {}",
            split.len(),
            out_file.display()
        );
    }
    Ok(())
}
