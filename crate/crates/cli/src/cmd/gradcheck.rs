//! Self-contained gradient verification. Builds a deterministic miniature
//! model and compares every analytic gradient coordinate against central
//! finite differences; disagreement is a numeric failure.

use std::path::PathBuf;

use clap::Args;
use glosskit::engine::pack_pair;
use glosskit::model::{grad_check, ModelConfig, Seq2Seq};
use glosskit::sals::SoftLabelPlan;
use glosskit::synth;
use glosskit::tokenizer::BpeModel;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run-record directory; no manifest is written without it.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn run(args: &GradcheckArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let seed = cfg.seed()?;
    if let Some(out_dir) = &args.out_dir {
        let manifest = RunManifest::new("gradcheck", seed, cfg.resolved());
        manifest.write(out_dir)?;
    }

    let targets: Vec<String> = ["regen schauer", "kalt kuehl", "schauer kalt"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let sources: Vec<String> = targets
        .iter()
        .map(|t| {
            t.split_whitespace()
                .rev()
                .map(str::to_uppercase)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let mut all = targets.clone();
    all.extend(sources.iter().cloned());
    let tokenizer =
        BpeModel::train(&all, 96).map_err(|e| CliError::Data(e.to_string()))?;
    let index = synth::synthetic_index(0.6, 5);
    let plan = SoftLabelPlan::build(&tokenizer, &targets, Some(&index), cfg.smoothing()?)?;

    let model = Seq2Seq::<f64>::new(ModelConfig::tiny(tokenizer.vocab_len()), seed)?;
    let packed = pack_pair(&tokenizer, 0, &sources[0], &targets[0]);
    let labels: Vec<_> = packed
        .tgt_out
        .iter()
        .zip(&packed.starts)
        .map(|(&gold, &is_start)| plan.row_for_position(gold, is_start))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(Some)
        .collect();
    let check = grad_check(&model, &packed.src, &packed.tgt_in, &labels)?;

    if json_lines {
        println!(
            "{}",
            serde_json::json!({
                "param_count": check.param_count,
                "max_rel_err": check.max_rel_err,
                "worst": format!("{}[{}]", check.worst_name, check.worst_index),
                "analytic": check.analytic,
                "numeric": check.numeric,
                "tolerance": TOLERANCE,
            })
        );
    } else {
        println!("{check}");
    }
    if check.max_rel_err >= TOLERANCE {
        return Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= {TOLERANCE:e}",
            check.max_rel_err
        )));
    }
    Ok(())
}
