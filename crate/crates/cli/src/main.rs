//! Command-line front end for the gloss translation toolkit. Exit codes:
//! 0 success, 1 usage or configuration error, 2 data error, 3 numeric
//! failure (divergence, failed gradient check).

mod cmd;
mod config;
mod error;
mod manifest;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "glosskit", version, about = "Gloss-to-text translation toolkit")]
struct Cli {
    /// Cap on worker threads; default uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Emit machine-readable JSON records instead of human-readable lines.
    #[arg(long, global = true)]
    json_lines: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read a raw corpus file and write a normalized split TSV.
    Ingest(cmd::ingest::IngestArgs),
    /// Learn a subword vocabulary from corpus splits.
    TrainTokenizer(cmd::tokenize::TrainTokenizerArgs),
    /// Build the word-similarity neighborhood index from embeddings.
    BuildSim(cmd::simindex::BuildSimArgs),
    /// Train a translation model.
    Train(cmd::train::TrainArgs),
    /// Decode sentences through a trained checkpoint.
    Translate(cmd::translate::TranslateArgs),
    /// Score hypotheses against references.
    Evaluate(cmd::evaluate::EvaluateArgs),
    /// Generate silver pairs by back-translating gold text.
    AugmentBacktranslate(cmd::augment::BacktranslateArgs),
    /// Generate silver pairs by pivot-language paraphrasing.
    AugmentParaphrase(cmd::augment::ParaphraseArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(cmd::gradcheck::GradcheckArgs),
    /// Write error-analysis tables for a decoded test set.
    Analyze(cmd::analyze::AnalyzeArgs),
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    let json = cli.json_lines;
    match &cli.command {
        Command::Ingest(args) => cmd::ingest::run(args, json),
        Command::TrainTokenizer(args) => cmd::tokenize::run(args, json),
        Command::BuildSim(args) => cmd::simindex::run(args, json),
        Command::Train(args) => cmd::train::run(args, json),
        Command::Translate(args) => cmd::translate::run(args, json),
        Command::Evaluate(args) => cmd::evaluate::run(args, json),
        Command::AugmentBacktranslate(args) => cmd::augment::run_backtranslate(args, json),
        Command::AugmentParaphrase(args) => cmd::augment::run_paraphrase(args, json),
        Command::Gradcheck(args) => cmd::gradcheck::run(args, json),
        Command::Analyze(args) => cmd::analyze::run(args, json),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
