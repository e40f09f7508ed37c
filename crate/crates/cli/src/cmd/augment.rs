//! Silver-pair generation: back-translation through a reverse model and
//! paraphrasing through a pivot language round trip.

use std::path::PathBuf;
use std::time::Duration;

use clap::Args;
use glosskit::augment::{
    back_translate_augment, paraphrase_augment, CommandPivot, ModelReverse, PivotTranslator,
    SelfPivot,
};
use glosskit::corpus::{self, CorpusSplit, SplitName};
use glosskit::engine::{vocab_fingerprint, DecodeConfig};
use glosskit::model::{load_seq2seq, Seq2Seq};
use glosskit::tokenizer::BpeModel;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct BacktranslateArgs {
    /// Reverse-direction (text to gloss) checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Gold pairs whose text side seeds the silver glosses.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn load_checked(
    checkpoint: &PathBuf,
    tokenizer: &BpeModel,
) -> Result<Seq2Seq<f32>, CliError> {
    let (model, meta) = load_seq2seq(checkpoint)?;
    if let Some(expected) = &meta.vocab_checksum {
        let found = vocab_fingerprint(tokenizer);
        if *expected != found {
            return Err(CliError::Data(format!(
                "tokenizer does not match {}: vocabulary checksum {found} vs recorded {expected}",
                checkpoint.display()
            )));
        }
    }
    Ok(model)
}

fn write_silver(
    pairs: Vec<glosskit::corpus::ParallelPair>,
    path: &PathBuf,
) -> Result<(), CliError> {
    let split = CorpusSplit::new(SplitName::Train, pairs)?;
    corpus::save_tsv(&split, path)?;
    Ok(())
}

pub fn run_backtranslate(args: &BacktranslateArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let silver_path = args.out_dir.join("silver.tsv");
    let mut manifest = RunManifest::new("augment-backtranslate", cfg.seed()?, cfg.resolved());
    manifest.record_input(&args.checkpoint)?;
    manifest.record_input(&args.tokenizer)?;
    manifest.record_input(&args.gold)?;
    manifest.declare_output(&silver_path);
    manifest.write(&args.out_dir)?;

    let tokenizer = BpeModel::load(&args.tokenizer)?;
    let model = load_checked(&args.checkpoint, &tokenizer)?;
    let gold = corpus::load_tsv(&args.gold, SplitName::Train)?;
    let reverse = ModelReverse {
        model: &model,
        tokenizer: &tokenizer,
        decode: cfg.decode_config()?,
    };
    let report = back_translate_augment(gold.pairs(), &reverse)?;
    write_silver(report.pairs.clone(), &silver_path)?;

    if json_lines {
        println!(
            "{}",
            serde_json::json!({
                "attempted": report.attempted,
                "emitted": report.emitted,
                "dropped_unchanged": report.dropped_unchanged,
                "dropped_empty": report.dropped_empty,
                "dropped_duplicate": report.dropped_duplicate,
                "silver": silver_path.display().to_string(),
            })
        );
    } else {
        println!(
            "attempted {} emitted {} dropped: unchanged {} empty {} duplicate {}",
            report.attempted,
            report.emitted,
            report.dropped_unchanged,
            report.dropped_empty,
            report.dropped_duplicate
        );
        println!("silver pairs -> {}", silver_path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ParaphraseArgs {
    /// Gold pairs whose gloss side is kept verbatim.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// External pivot command; `{from}` and `{to}` in its arguments are
    /// replaced with the language tags. Reads a sentence on stdin, writes
    /// the translation on stdout.
    #[arg(long, conflicts_with_all = ["outward", "inward"])]
    pub pivot_cmd: Option<String>,
    /// Source-to-pivot checkpoint for self-pivoting.
    #[arg(long, requires = "inward", requires = "tokenizer")]
    pub outward: Option<PathBuf>,
    /// Pivot-to-source checkpoint for self-pivoting.
    #[arg(long, requires = "outward")]
    pub inward: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, default_value = "de")]
    pub source_tag: String,
    #[arg(long, default_value = "en")]
    pub pivot_tag: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn run_paraphrase(args: &ParaphraseArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let silver_path = args.out_dir.join("silver.tsv");
    let mut manifest = RunManifest::new("augment-paraphrase", cfg.seed()?, cfg.resolved());
    manifest.record_input(&args.gold)?;
    for path in [&args.outward, &args.inward, &args.tokenizer]
        .into_iter()
        .flatten()
    {
        manifest.record_input(path)?;
    }
    manifest.declare_output(&silver_path);
    manifest.write(&args.out_dir)?;

    let gold = corpus::load_tsv(&args.gold, SplitName::Train)?;

    // Both pivot kinds borrow local state, so the round trip runs inside
    // the branch that owns it.
    let report = if let Some(command) = &args.pivot_cmd {
        let mut words = command.split_whitespace().map(str::to_string);
        let program = words
            .next()
            .ok_or_else(|| CliError::Usage("--pivot-cmd is empty".to_string()))?;
        let timeout = cfg.get::<u64>("pivot_timeout_secs")?.unwrap_or(30);
        let pivot = CommandPivot::new(program, words.collect(), Duration::from_secs(timeout));
        paraphrase_augment(gold.pairs(), &pivot, &args.source_tag, &args.pivot_tag)?
    } else {
        let (outward, inward, tokenizer) =
            match (&args.outward, &args.inward, &args.tokenizer) {
                (Some(o), Some(i), Some(t)) => (o, i, t),
                _ => {
                    return Err(CliError::Usage(
                        "need either --pivot-cmd or --outward, --inward, and --tokenizer"
                            .to_string(),
                    ))
                }
            };
        let tokenizer = BpeModel::load(tokenizer)?;
        let outward = load_checked(outward, &tokenizer)?;
        let inward = load_checked(inward, &tokenizer)?;
        let decode = DecodeConfig {
            max_len: cfg.get("max_len")?.unwrap_or(DecodeConfig::pivot().max_len),
            ..cfg.decode_config()?
        };
        let pivot = SelfPivot::new(
            &tokenizer,
            &outward,
            &inward,
            args.source_tag.clone(),
            args.pivot_tag.clone(),
            decode,
        );
        // Probe once so an unusable tag pair fails fast instead of being
        // recorded as a per-pair failure on every sentence.
        if let Some(first) = gold.pairs().first() {
            pivot
                .translate(&first.text, &args.source_tag, &args.pivot_tag)
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        paraphrase_augment(gold.pairs(), &pivot, &args.source_tag, &args.pivot_tag)?
    };
    write_silver(report.pairs.clone(), &silver_path)?;

    if json_lines {
        println!(
            "{}",
            serde_json::json!({
                "attempted": report.attempted,
                "emitted": report.emitted,
                "dropped_identical": report.dropped_identical,
                "dropped_empty": report.dropped_empty,
                "failures": report.failures.len(),
                "silver": silver_path.display().to_string(),
            })
        );
    } else {
        println!(
            "attempted {} emitted {} dropped: identical {} empty {} failures {}",
            report.attempted,
            report.emitted,
            report.dropped_identical,
            report.dropped_empty,
            report.failures.len()
        );
        for failure in report.failures.iter().take(5) {
            println!("  failed {}: {}", failure.id, failure.message);
        }
        println!("silver pairs -> {}", silver_path.display());
    }
    Ok(())
}
