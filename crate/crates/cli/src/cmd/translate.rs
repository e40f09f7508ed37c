//! Batch decoding from a checkpoint. Refuses to decode with a tokenizer
//! whose vocabulary differs from the one the model was trained with.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use glosskit::engine::{self, vocab_fingerprint};
use glosskit::model::{load_adapter, load_seq2seq};
use glosskit::tokenizer::BpeModel;

use crate::cmd::evaluate::read_lines;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Hypothesis file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Low-rank adapter applied on top of the checkpoint.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Run-record directory; no manifest is written without it.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn run(args: &TranslateArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let decode = cfg.decode_config()?;
    if let Some(out_dir) = &args.out_dir {
        let mut manifest = RunManifest::new("translate", cfg.seed()?, cfg.resolved());
        manifest.record_input(&args.checkpoint)?;
        manifest.record_input(&args.tokenizer)?;
        manifest.record_input(&args.input)?;
        if let Some(adapter) = &args.adapter {
            manifest.record_input(adapter)?;
        }
        if let Some(output) = &args.output {
            manifest.declare_output(output);
        }
        manifest.write(out_dir)?;
    }

    let tokenizer = BpeModel::load(&args.tokenizer)?;
    let (model, meta) = load_seq2seq(&args.checkpoint)?;
    if let Some(expected) = &meta.vocab_checksum {
        let found = vocab_fingerprint(&tokenizer);
        if *expected != found {
            return Err(CliError::Data(format!(
                "tokenizer does not match checkpoint: vocabulary checksum {found} vs recorded {expected}"
            )));
        }
    }
    let model = match &args.adapter {
        Some(path) => load_adapter(path)?.apply(&model)?,
        None => model,
    };

    let sources = read_lines(&args.input)?;
    let hypotheses = engine::translate_batch(&model, &tokenizer, &sources, &decode)?;

    // The output file always holds plain hypothesis lines so it can feed
    // scoring directly; record formatting applies to stdout only.
    match &args.output {
        Some(path) => {
            let mut rendered = String::new();
            for hypothesis in &hypotheses {
                rendered.push_str(hypothesis);
                rendered.push('\n');
            }
            fs::write(path, &rendered)
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
            if json_lines {
                println!(
                    "{}",
                    serde_json::json!({
                        "sentences": hypotheses.len(),
                        "output": path.display().to_string(),
                    })
                );
            } else {
                println!("{} sentences -> {}", hypotheses.len(), path.display());
            }
        }
        None => {
            for (source, hypothesis) in sources.iter().zip(&hypotheses) {
                if json_lines {
                    println!(
                        "{}",
                        serde_json::json!({ "source": source, "hypothesis": hypothesis })
                    );
                } else {
                    println!("{hypothesis}");
                }
            }
        }
    }
    Ok(())
}
