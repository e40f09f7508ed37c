//! Scores hypothesis lines against reference lines.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use glosskit::metrics;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Hypothesis file, one sentence per line.
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference file, one sentence per line.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// When given, the report and manifest are also written here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn read_lines(path: &PathBuf) -> Result<Vec<String>, CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(raw.lines().map(str::to_string).collect())
}

pub fn run(args: &EvaluateArgs, json_lines: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    if let Some(out_dir) = &args.out_dir {
        let mut manifest = RunManifest::new("evaluate", cfg.seed()?, cfg.resolved());
        manifest.record_input(&args.hyp)?;
        manifest.record_input(&args.reference)?;
        manifest.declare_output(&out_dir.join("report.txt"));
        manifest.write(out_dir)?;
    }

    let hyps = read_lines(&args.hyp)?;
    let refs = read_lines(&args.reference)?;
    let report = metrics::evaluate(&hyps, &refs)?;

    let text = report.to_text();
    if json_lines {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        print!("{text}");
    }
    if let Some(out_dir) = &args.out_dir {
        fs::write(out_dir.join("report.txt"), &text)
            .map_err(|e| CliError::Data(format!("cannot write report: {e}")))?;
    }
    Ok(())
}
