//! Error-analysis tables: word F-measure by training frequency and
//! sentence F-measure by reference length, plus the generation ratio.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use glosskit::corpus::{self, SplitName};
use glosskit::metrics;

use crate::cmd::evaluate::read_lines;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Training split TSV; its text side supplies word frequencies.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn run(args: &AnalyzeArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let word_file = args.out_dir.join("word_buckets.tsv");
    let length_file = args.out_dir.join("length_buckets.tsv");
    let mut manifest = RunManifest::new("analyze", cfg.seed()?, cfg.resolved());
    manifest.record_input(&args.hyp)?;
    manifest.record_input(&args.reference)?;
    manifest.record_input(&args.train)?;
    manifest.declare_output(&word_file);
    manifest.declare_output(&length_file);
    manifest.write(&args.out_dir)?;

    let hyps = read_lines(&args.hyp)?;
    let refs = read_lines(&args.reference)?;
    let train = corpus::load_tsv(&args.train, SplitName::Train)?;
    let train_texts: Vec<String> = train.pairs().iter().map(|p| p.text.clone()).collect();

    let report = metrics::evaluate(&hyps, &refs)?;
    let words = metrics::word_fmeasure_buckets(&hyps, &refs, &train_texts)?;
    let lengths = metrics::sentence_fmeasure_by_length(&hyps, &refs)?;
    fs::write(&word_file, words.to_tsv())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", word_file.display())))?;
    fs::write(&length_file, lengths.to_tsv())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", length_file.display())))?;

    if json_lines {
        println!(
            "{}",
            serde_json::json!({
                "length_ratio": report.length_ratio,
                "out_tokens": report.out_tokens,
                "ref_tokens": report.ref_tokens,
                "word_buckets": word_file.display().to_string(),
                "length_buckets": length_file.display().to_string(),
            })
        );
    } else {
        println!(
            "generation ratio {:.4} ({} / {})",
            report.length_ratio, report.out_tokens, report.ref_tokens
        );
        println!("word buckets -> {}", word_file.display());
        println!("length buckets -> {}", length_file.display());
    }
    Ok(())
}
