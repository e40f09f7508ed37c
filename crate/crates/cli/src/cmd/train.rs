//! Model training. The run directory receives the manifest, the epoch log,
//! the best checkpoint (dense or adapter), and the final model.

use std::path::PathBuf;

use clap::Args;
use glosskit::corpus::{self, SplitName};
use glosskit::embeddings::SimilarityIndex;
use glosskit::engine::{self, vocab_fingerprint, TrainOutcome};
use glosskit::model::{save_adapter, save_seq2seq, CheckpointMeta, Seq2Seq};
use glosskit::tokenizer::BpeModel;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Neighborhood index; required by smoothing modes that spread mass
    /// over similar words.
    #[arg(long)]
    pub sim_index: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn run(args: &TrainArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let mut train_config = cfg.train_config()?;
    let direction = cfg.direction()?;
    train_config.checkpoint_dir = Some(args.out_dir.clone());
    train_config.log_path = Some(args.out_dir.join("train.log"));

    let mut manifest = RunManifest::new("train", train_config.seed, cfg.resolved());
    manifest.record_input(&args.train)?;
    if let Some(dev) = &args.dev {
        manifest.record_input(dev)?;
    }
    manifest.record_input(&args.tokenizer)?;
    if let Some(index) = &args.sim_index {
        manifest.record_input(index)?;
    }
    manifest.declare_output(&args.out_dir.join("model.ckpt"));
    manifest.declare_output(&args.out_dir.join("train.log"));
    manifest.write(&args.out_dir)?;

    let tokenizer = BpeModel::load(&args.tokenizer)?;
    let train_split = corpus::load_tsv(&args.train, SplitName::Train)?;
    let dev_pairs = match &args.dev {
        Some(path) => corpus::load_tsv(path, SplitName::Dev)?.pairs().to_vec(),
        None => Vec::new(),
    };
    let index = match &args.sim_index {
        Some(path) => Some(SimilarityIndex::load(path)?),
        None => None,
    };

    let model_config = cfg.model_config(tokenizer.vocab_len())?;
    let mut model = Seq2Seq::new(model_config, train_config.seed)?;
    let report = engine::train(
        &mut model,
        &tokenizer,
        index.as_ref(),
        train_split.pairs(),
        &dev_pairs,
        &train_config,
        direction,
    )?;

    for record in &report.log {
        if json_lines {
            println!("{}", serde_json::to_string(record).expect("record serializes"));
        } else {
            println!("{}", record.to_line());
        }
    }

    // The returned model carries the best parameters; in adapter mode the
    // adapter does and the base stays frozen.
    let meta = CheckpointMeta {
        config: model.config().clone(),
        step: report.final_step,
        vocab_checksum: Some(vocab_fingerprint(&tokenizer)),
        metrics: report
            .log
            .last()
            .map(|r| serde_json::to_value(r).expect("record serializes")),
    };
    match &report.adapter {
        Some(adapter) => save_adapter(&args.out_dir.join("model.adapter"), adapter)?,
        None => save_seq2seq(&args.out_dir.join("model.ckpt"), &model, &meta)?,
    }

    let summary = serde_json::json!({
        "best_epoch": report.best_epoch,
        "best_bleu4": report.best_bleu4,
        "best_checkpoint": report.best_checkpoint.as_ref().map(|p| p.display().to_string()),
        "final_step": report.final_step,
        "outcome": &report.outcome,
    });
    if json_lines {
        println!("{summary}");
    } else {
        println!(
            "done: best epoch {} bleu4 {:.2}, final step {}",
            report
                .best_epoch
                .map_or_else(|| "-".to_string(), |e| e.to_string()),
            report.best_bleu4,
            report.final_step
        );
    }

    if let TrainOutcome::Diverged { epoch, batch } = report.outcome {
        return Err(CliError::Numeric(format!(
            "training diverged at epoch {epoch}, batch {batch}; parameters rolled back"
        )));
    }
    Ok(())
}
