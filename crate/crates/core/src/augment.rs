//! Silver training-pair generation: back-translation through a reverse
//! (text to gloss) model and paraphrasing through a pivot language.
//!
//! Silver pairs keep one side byte-identical to their gold source: the text
//! side for back-translation, the gloss side for paraphrases. Output order
//! is always the input order, and the merge step in the corpus module keeps
//! the whole process idempotent.

use std::collections::HashSet;
use std::io::Write;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::corpus::{normalize_text, Origin, ParallelPair};
use crate::embeddings::SimilarityIndex;
use crate::engine::{self, DecodeConfig, Direction, EngineError, TrainConfig, TrainReport};
use crate::model::{ModelConfig, ModelError, Seq2Seq};
use crate::par;
use crate::tokenizer::BpeModel;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("{failed} of {attempted} pivot calls failed; aborting")]
    TooManyFailures { failed: usize, attempted: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Failure of a single pivot translation call.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct PivotError(pub String);

/// One translation hop between two language tags. Implementations must be
/// shareable across threads; per-pair calls may run concurrently.
pub trait PivotTranslator: Sync {
    fn translate(&self, text: &str, from_tag: &str, to_tag: &str) -> Result<String, PivotError>;
}

/// Returns its input unchanged. A round trip through it paraphrases
/// nothing, which makes it the do-nothing baseline for tests.
pub struct IdentityPivot;

impl PivotTranslator for IdentityPivot {
    fn translate(&self, text: &str, _from: &str, _to: &str) -> Result<String, PivotError> {
        Ok(text.to_string())
    }
}

/// Adapter around an external translation command. Each call spawns the
/// command with `{from}` and `{to}` placeholders substituted in its
/// arguments, writes the sentence to its standard input, and reads the
/// translation as the first line of its standard output. The protocol is
/// line-oriented UTF-8, so sentences stay well under pipe buffer sizes and
/// the child is killed after `timeout`.
pub struct CommandPivot {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl CommandPivot {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        CommandPivot {
            program: program.into(),
            args,
            timeout,
        }
    }
}

impl PivotTranslator for CommandPivot {
    fn translate(&self, text: &str, from_tag: &str, to_tag: &str) -> Result<String, PivotError> {
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{from}", from_tag).replace("{to}", to_tag))
            .collect();
        let mut child = Command::new(&self.program)
            .args(&args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| PivotError(format!("spawn {}: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // A refusal to read input surfaces as a broken pipe; report it
            // like any other failure instead of crashing the run.
            if let Err(e) = stdin.write_all(text.as_bytes()).and_then(|()| stdin.write_all(b"\n"))
            {
                let _ = child.kill();
                let _ = child.wait();
                return Err(PivotError(format!("write to {}: {e}", self.program)));
            }
        }
        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(PivotError(format!(
                            "{} timed out after {:?}",
                            self.program, self.timeout
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(PivotError(format!("wait for {}: {e}", self.program)));
                }
            }
        };
        if !status.success() {
            return Err(PivotError(format!("{} exited with {status}", self.program)));
        }
        let mut output = String::new();
        use std::io::Read;
        child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_string(&mut output)
            .map_err(|e| PivotError(format!("read from {}: {e}", self.program)))?;
        Ok(output.lines().next().unwrap_or("").to_string())
    }
}

/// Pivot built from two in-process models over a shared tokenizer: one
/// translating source-tag text into the pivot language, one translating
/// back. Tags select the direction.
pub struct SelfPivot<'a> {
    tokenizer: &'a BpeModel,
    outward: &'a Seq2Seq<f32>,
    inward: &'a Seq2Seq<f32>,
    source_tag: String,
    pivot_tag: String,
    decode: DecodeConfig,
}

impl<'a> SelfPivot<'a> {
    pub fn new(
        tokenizer: &'a BpeModel,
        outward: &'a Seq2Seq<f32>,
        inward: &'a Seq2Seq<f32>,
        source_tag: impl Into<String>,
        pivot_tag: impl Into<String>,
        decode: DecodeConfig,
    ) -> Self {
        SelfPivot {
            tokenizer,
            outward,
            inward,
            source_tag: source_tag.into(),
            pivot_tag: pivot_tag.into(),
            decode,
        }
    }
}

impl PivotTranslator for SelfPivot<'_> {
    fn translate(&self, text: &str, from_tag: &str, to_tag: &str) -> Result<String, PivotError> {
        let model = if from_tag == self.source_tag && to_tag == self.pivot_tag {
            self.outward
        } else if from_tag == self.pivot_tag && to_tag == self.source_tag {
            self.inward
        } else {
            return Err(PivotError(format!(
                "no model for direction {from_tag} to {to_tag}"
            )));
        };
        let sentence = [text.to_string()];
        let mut out = engine::translate_batch(model, self.tokenizer, &sentence, &self.decode)
            .map_err(|e| PivotError(e.to_string()))?;
        Ok(out.pop().expect("one output per input"))
    }
}

/// Supplies a gloss sequence for each spoken sentence. The production
/// implementation decodes through a reverse-trained model.
pub trait ReverseTranslator {
    fn glosses_for(&self, texts: &[String]) -> Result<Vec<String>, AugmentError>;
}

/// Reverse model plus the decoding settings used to query it.
pub struct ModelReverse<'a> {
    pub model: &'a Seq2Seq<f32>,
    pub tokenizer: &'a BpeModel,
    pub decode: DecodeConfig,
}

impl ReverseTranslator for ModelReverse<'_> {
    fn glosses_for(&self, texts: &[String]) -> Result<Vec<String>, AugmentError> {
        Ok(engine::translate_batch(
            self.model,
            self.tokenizer,
            texts,
            &self.decode,
        )?)
    }
}

/// What happened to each candidate during back-translation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BackTranslationReport {
    pub pairs: Vec<ParallelPair>,
    pub attempted: usize,
    pub emitted: usize,
    /// Generated gloss matched the gold gloss after normalization.
    pub dropped_unchanged: usize,
    /// Reverse model produced an empty gloss.
    pub dropped_empty: usize,
    /// Same (gloss, text) content as an earlier silver pair.
    pub dropped_duplicate: usize,
}

/// Decodes every gold text through the reverse translator and keeps the
/// generated glosses that differ from the gold ones. The text side of each
/// silver pair is byte-identical to its source pair.
pub fn back_translate_augment(
    gold: &[ParallelPair],
    reverse: &dyn ReverseTranslator,
) -> Result<BackTranslationReport, AugmentError> {
    let texts: Vec<String> = gold.iter().map(|p| p.text.clone()).collect();
    let generated = reverse.glosses_for(&texts)?;
    let mut report = BackTranslationReport {
        pairs: Vec::new(),
        attempted: gold.len(),
        emitted: 0,
        dropped_unchanged: 0,
        dropped_empty: 0,
        dropped_duplicate: 0,
    };
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (pair, gen) in gold.iter().zip(&generated) {
        let gen_norm = normalize_text(gen);
        if gen_norm.is_empty() {
            report.dropped_empty += 1;
            continue;
        }
        if gen_norm == normalize_text(&pair.gloss_joined()) {
            report.dropped_unchanged += 1;
            continue;
        }
        let silver = ParallelPair {
            id: format!("{}-bt", pair.id),
            gloss: gen.split_whitespace().map(str::to_string).collect(),
            text: pair.text.clone(),
            origin: Origin::SilverBacktranslation,
        };
        if !seen.insert(silver.content_key()) {
            report.dropped_duplicate += 1;
            continue;
        }
        report.pairs.push(silver);
    }
    report.emitted = report.pairs.len();
    Ok(report)
}

/// One failed pivot call, identified by the gold pair it belonged to.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PairFailure {
    pub id: String,
    pub message: String,
}

/// What happened to each candidate during paraphrasing.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ParaphraseReport {
    pub pairs: Vec<ParallelPair>,
    pub attempted: usize,
    pub emitted: usize,
    /// Round trip reproduced the original text after normalization.
    pub dropped_identical: usize,
    /// Round trip came back empty.
    pub dropped_empty: usize,
    pub failures: Vec<PairFailure>,
}

/// Round-trips every gold text through the pivot language and keeps the
/// results that changed. The gloss side of each silver pair is
/// byte-identical to its source pair. Individual pivot failures are
/// recorded and skipped; more than half failing aborts the run.
pub fn paraphrase_augment(
    gold: &[ParallelPair],
    pivot: &dyn PivotTranslator,
    source_tag: &str,
    pivot_tag: &str,
) -> Result<ParaphraseReport, AugmentError> {
    let round_trips = par::map_slice(gold, |pair| {
        let over = pivot.translate(&pair.text, source_tag, pivot_tag)?;
        pivot.translate(&over, pivot_tag, source_tag)
    });
    let mut report = ParaphraseReport {
        pairs: Vec::new(),
        attempted: gold.len(),
        emitted: 0,
        dropped_identical: 0,
        dropped_empty: 0,
        failures: Vec::new(),
    };
    for (pair, result) in gold.iter().zip(round_trips) {
        match result {
            Err(error) => report.failures.push(PairFailure {
                id: pair.id.clone(),
                message: error.to_string(),
            }),
            Ok(round) => {
                let norm = normalize_text(&round);
                if norm.is_empty() {
                    report.dropped_empty += 1;
                } else if norm == normalize_text(&pair.text) {
                    report.dropped_identical += 1;
                } else {
                    report.pairs.push(ParallelPair {
                        id: format!("{}-para", pair.id),
                        gloss: pair.gloss.clone(),
                        text: norm,
                        origin: Origin::SilverParaphrase,
                    });
                }
            }
        }
    }
    if report.failures.len() * 2 > gold.len() {
        return Err(AugmentError::TooManyFailures {
            failed: report.failures.len(),
            attempted: gold.len(),
        });
    }
    report.emitted = report.pairs.len();
    Ok(report)
}

/// Trains a fresh text-to-gloss model on the gold pairs with sides swapped.
pub fn train_reverse_model(
    model_config: ModelConfig,
    tokenizer: &BpeModel,
    index: Option<&SimilarityIndex>,
    train_pairs: &[ParallelPair],
    dev_pairs: &[ParallelPair],
    config: &TrainConfig,
) -> Result<(Seq2Seq<f32>, TrainReport), AugmentError> {
    let mut model = Seq2Seq::new(model_config, config.seed)?;
    let report = engine::train(
        &mut model,
        tokenizer,
        index,
        train_pairs,
        dev_pairs,
        config,
        Direction::TextToGloss,
    )?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn pair(id: &str, gloss: &str, text: &str) -> ParallelPair {
        ParallelPair {
            id: id.to_string(),
            gloss: gloss.split_whitespace().map(str::to_string).collect(),
            text: text.to_string(),
            origin: Origin::Gold,
        }
    }

    fn gold_set() -> Vec<ParallelPair> {
        vec![
            pair("g1", "HUND LAUF", "der hund lauft"),
            pair("g2", "KATZE SCHLAF", "die katze schlaft"),
            pair("g3", "VOGEL SING", "der vogel singt"),
            pair("g4", "HUND KATZE", "hund und katze"),
        ]
    }

    /// Looks the gold gloss up by text, mimicking a perfect reverse model.
    struct GlossOracle(HashMap<String, String>);

    impl GlossOracle {
        fn from_pairs(pairs: &[ParallelPair]) -> Self {
            GlossOracle(
                pairs
                    .iter()
                    .map(|p| (p.text.clone(), p.gloss_joined()))
                    .collect(),
            )
        }
    }

    impl ReverseTranslator for GlossOracle {
        fn glosses_for(&self, texts: &[String]) -> Result<Vec<String>, AugmentError> {
            Ok(texts
                .iter()
                .map(|t| self.0.get(t).cloned().unwrap_or_default())
                .collect())
        }
    }

    /// Fixed outputs by input index, for hand-built scenarios.
    struct ScriptedReverse(Vec<&'static str>);

    impl ReverseTranslator for ScriptedReverse {
        fn glosses_for(&self, texts: &[String]) -> Result<Vec<String>, AugmentError> {
            assert_eq!(texts.len(), self.0.len());
            Ok(self.0.iter().map(|s| s.to_string()).collect())
        }
    }

    #[test]
    fn perfect_reverse_model_yields_no_silver_pairs() {
        let gold = gold_set();
        let oracle = GlossOracle::from_pairs(&gold);
        let report = back_translate_augment(&gold, &oracle).unwrap();
        assert!(report.pairs.is_empty());
        assert_eq!(report.dropped_unchanged, 4);
        assert_eq!(report.attempted, 4);
    }

    #[test]
    fn mismatched_glosses_become_silver_pairs_in_order() {
        let gold = gold_set();
        let reverse = ScriptedReverse(vec![
            "HUND LAUF",      // matches g1, dropped
            "KATZE WACH",     // differs from g2
            "",               // empty, dropped
            "HUND HUND",      // differs from g4
        ]);
        let report = back_translate_augment(&gold, &reverse).unwrap();
        assert_eq!(report.emitted, 2);
        assert_eq!(report.dropped_unchanged, 1);
        assert_eq!(report.dropped_empty, 1);
        assert_eq!(report.pairs[0].id, "g2-bt");
        assert_eq!(report.pairs[1].id, "g4-bt");
        for (silver, source) in report.pairs.iter().zip([&gold[1], &gold[3]]) {
            assert_eq!(silver.text, source.text);
            assert_eq!(silver.origin, Origin::SilverBacktranslation);
        }
    }

    #[test]
    fn gloss_comparison_ignores_case_and_spacing() {
        let gold = vec![pair("g1", "HUND LAUF", "der hund lauft")];
        let reverse = ScriptedReverse(vec!["hund   lauf"]);
        let report = back_translate_augment(&gold, &reverse).unwrap();
        assert_eq!(report.dropped_unchanged, 1);
        assert!(report.pairs.is_empty());
    }

    #[test]
    fn duplicate_silver_content_is_removed() {
        let gold = vec![
            pair("g1", "HUND LAUF", "der hund lauft"),
            pair("g2", "HUND RENN", "der hund lauft"),
        ];
        let reverse = ScriptedReverse(vec!["HUND SPRING", "HUND SPRING"]);
        let report = back_translate_augment(&gold, &reverse).unwrap();
        assert_eq!(report.emitted, 1);
        assert_eq!(report.dropped_duplicate, 1);
    }

    #[test]
    fn identity_pivot_produces_nothing() {
        let gold = gold_set();
        let report = paraphrase_augment(&gold, &IdentityPivot, "de", "en").unwrap();
        assert!(report.pairs.is_empty());
        assert_eq!(report.dropped_identical, 4);
        assert!(report.failures.is_empty());
    }

    /// Uppercases on the way out, lowercases on the way back: a round trip
    /// that only changes case.
    struct CasePivot;

    impl PivotTranslator for CasePivot {
        fn translate(&self, text: &str, from: &str, _to: &str) -> Result<String, PivotError> {
            if from == "de" {
                Ok(text.to_uppercase())
            } else {
                Ok(text.to_lowercase())
            }
        }
    }

    #[test]
    fn case_only_round_trip_is_dropped_after_normalization() {
        let gold = gold_set();
        let report = paraphrase_augment(&gold, &CasePivot, "de", "en").unwrap();
        assert!(report.pairs.is_empty());
        assert_eq!(report.dropped_identical, 4);
    }

    /// Appends a marker word on the return hop, so every round trip
    /// differs from its source.
    struct WordAddingPivot;

    impl PivotTranslator for WordAddingPivot {
        fn translate(&self, text: &str, from: &str, _to: &str) -> Result<String, PivotError> {
            if from == "en" {
                Ok(format!("{text} wirklich"))
            } else {
                Ok(text.to_string())
            }
        }
    }

    #[test]
    fn changed_round_trips_keep_the_gloss_byte_identical() {
        let gold = gold_set();
        let report = paraphrase_augment(&gold, &WordAddingPivot, "de", "en").unwrap();
        assert_eq!(report.emitted, 4);
        for (silver, source) in report.pairs.iter().zip(&gold) {
            assert_eq!(silver.gloss, source.gloss);
            assert_eq!(silver.text, format!("{} wirklich", source.text));
            assert_eq!(silver.origin, Origin::SilverParaphrase);
            assert_eq!(silver.id, format!("{}-para", source.id));
        }
    }

    /// Fails on texts containing the configured word.
    struct FlakyPivot(&'static str);

    impl PivotTranslator for FlakyPivot {
        fn translate(&self, text: &str, from: &str, _to: &str) -> Result<String, PivotError> {
            if text.contains(self.0) {
                Err(PivotError("backend unavailable".into()))
            } else if from == "de" {
                Ok(format!("{text} x"))
            } else {
                Ok(text.to_string())
            }
        }
    }

    #[test]
    fn minority_failures_are_recorded_and_skipped() {
        let gold = gold_set();
        let report = paraphrase_augment(&gold, &FlakyPivot("katze"), "de", "en").unwrap();
        // g2 and g4 mention the word; both fail, both are recorded.
        assert_eq!(report.failures.len(), 2);
        assert_eq!(report.emitted, 2);
        assert!(report.failures.iter().any(|f| f.id == "g2"));
        assert!(report.failures.iter().any(|f| f.id == "g4"));
    }

    #[test]
    fn majority_failures_abort() {
        let gold = gold_set();
        let err = paraphrase_augment(&gold, &FlakyPivot("d"), "de", "en").unwrap_err();
        match err {
            AugmentError::TooManyFailures { failed, attempted } => {
                assert!(failed * 2 > attempted);
                assert_eq!(attempted, 4);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_round_trips_are_counted() {
        struct EmptyPivot;
        impl PivotTranslator for EmptyPivot {
            fn translate(&self, _: &str, _: &str, _: &str) -> Result<String, PivotError> {
                Ok("   ".to_string())
            }
        }
        let gold = gold_set();
        let report = paraphrase_augment(&gold, &EmptyPivot, "de", "en").unwrap();
        assert_eq!(report.dropped_empty, 4);
        assert!(report.pairs.is_empty());
    }

    #[test]
    fn command_pivot_round_trips_through_cat() {
        let pivot = CommandPivot::new("cat", vec![], Duration::from_secs(5));
        let out = pivot.translate("der hund lauft", "de", "en").unwrap();
        assert_eq!(out, "der hund lauft");
    }

    #[test]
    fn command_pivot_substitutes_language_tags() {
        // echo ignores stdin and prints its arguments, exposing the
        // substituted tags as the "translation".
        let pivot = CommandPivot::new(
            "echo",
            vec!["{from}-{to}".to_string()],
            Duration::from_secs(5),
        );
        let out = pivot.translate("whatever", "de", "en").unwrap();
        assert_eq!(out, "de-en");
    }

    #[test]
    fn command_pivot_times_out_and_kills() {
        let pivot = CommandPivot::new(
            "sleep",
            vec!["5".to_string()],
            Duration::from_millis(60),
        );
        let started = Instant::now();
        let err = pivot.translate("text", "de", "en").unwrap_err();
        assert!(started.elapsed() < Duration::from_secs(2));
        assert!(err.0.contains("timed out"), "{}", err.0);
    }

    #[test]
    fn command_pivot_reports_spawn_and_exit_failures() {
        let missing = CommandPivot::new(
            "/nonexistent/translator",
            vec![],
            Duration::from_secs(1),
        );
        assert!(missing.translate("x", "a", "b").unwrap_err().0.contains("spawn"));
        let failing = CommandPivot::new("false", vec![], Duration::from_secs(5));
        assert!(failing.translate("x", "a", "b").unwrap_err().0.contains("exited"));
    }

    #[test]
    fn self_pivot_rejects_unknown_directions() {
        let sentences = vec!["der hund lauft".to_string()];
        let tok = BpeModel::train(&sentences, 64).unwrap();
        let model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 1).unwrap();
        let pivot = SelfPivot::new(&tok, &model, &model, "de", "en", DecodeConfig {
            beam: 1,
            max_len: 8,
            length_penalty: 1.0,
        });
        assert!(pivot.translate("der hund", "de", "en").is_ok());
        assert!(pivot.translate("der hund", "en", "de").is_ok());
        assert!(pivot.translate("der hund", "fr", "de").is_err());
    }

    #[test]
    fn reverse_training_learns_the_swapped_task() {
        let gold: Vec<ParallelPair> = (0..12)
            .map(|i| {
                let source = gold_set();
                let mut p = source[i % 4].clone();
                p.id = format!("p{i}");
                p
            })
            .collect();
        let mut sentences: Vec<String> = gold.iter().map(|p| p.text.clone()).collect();
        sentences.extend(gold.iter().map(|p| p.gloss_joined()));
        let tok = BpeModel::train(&sentences, 160).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_tokens: 64,
            warmup_steps: 10,
            peak_lr: 1e-3,
            smoothing: crate::sals::SmoothingConfig {
                mode: crate::sals::SmoothingMode::OneHot,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let (model, report) = train_reverse_model(
            ModelConfig::tiny(tok.vocab_len()),
            &tok,
            None,
            &gold,
            &gold[..2],
            &config,
        )
        .unwrap();
        assert_eq!(report.log.len(), 2);
        // The model decodes text input; gloss-direction vocabulary works as
        // targets because both sides share the tokenizer.
        let reverse = ModelReverse {
            model: &model,
            tokenizer: &tok,
            decode: DecodeConfig {
                beam: 2,
                max_len: 10,
                length_penalty: 1.0,
            },
        };
        let glosses = reverse
            .glosses_for(&["der hund lauft".to_string()])
            .unwrap();
        assert_eq!(glosses.len(), 1);
    }
}
