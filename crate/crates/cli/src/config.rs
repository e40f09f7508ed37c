//! Key=value run configuration. A config file is the source of truth and
//! `--set KEY=VALUE` flags override individual keys; unknown keys are a
//! usage error so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use glosskit::engine::{DecodeConfig, Direction, TrainConfig};
use glosskit::model::{LoraConfig, ModelConfig};
use glosskit::sals::{SmoothingBasis, SmoothingConfig, SmoothingMode};

use crate::error::CliError;

pub const VALID_KEYS: &[&str] = &[
    "epochs",
    "batch_tokens",
    "peak_lr",
    "warmup_steps",
    "beta1",
    "beta2",
    "weight_decay",
    "seed",
    "smoothing_mode",
    "lambda",
    "beta",
    "basis",
    "lora_rank",
    "lora_alpha",
    "beam",
    "max_len",
    "length_penalty",
    "d_model",
    "heads",
    "enc_layers",
    "dec_layers",
    "ffn_dim",
    "max_positions",
    "dropout",
    "tied_output",
    "direction",
    "vocab_size",
    "threshold",
    "pivot_timeout_secs",
];

fn unknown_key(key: &str) -> CliError {
    CliError::Usage(format!(
        "unknown config key '{key}'; valid keys: {}",
        VALID_KEYS.join(", ")
    ))
}

/// Resolved configuration: file keys with flag overrides applied.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Reads `path` (when given) and applies `KEY=VALUE` overrides on top.
    /// File syntax: one `key = value` per line, `#` starts a comment.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let raw = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (idx, line) in raw.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}:{}: expected 'key = value'",
                        path.display(),
                        idx + 1
                    ))
                })?;
                let key = key.trim();
                if !VALID_KEYS.contains(&key) {
                    return Err(unknown_key(key));
                }
                values.insert(key.to_string(), value.trim().to_string());
            }
        }
        for entry in overrides {
            let (key, value) = entry
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set needs KEY=VALUE, got '{entry}'")))?;
            let key = key.trim();
            if !VALID_KEYS.contains(&key) {
                return Err(unknown_key(key));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                CliError::Usage(format!("config key '{key}': cannot parse '{raw}': {e}"))
            }),
        }
    }

    fn get_or<T: FromStr + Copy>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn smoothing(&self) -> Result<SmoothingConfig, CliError> {
        let defaults = SmoothingConfig::default();
        let mode = match self.values.get("smoothing_mode").map(String::as_str) {
            None => defaults.mode,
            Some("sals") => SmoothingMode::Sals,
            Some("uniform_target") => SmoothingMode::UniformTarget,
            Some("conventional") => SmoothingMode::Conventional,
            Some("one_hot") => SmoothingMode::OneHot,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "smoothing_mode '{other}' is not one of sals, uniform_target, conventional, one_hot"
                )))
            }
        };
        let basis = match self.values.get("basis").map(String::as_str) {
            None => defaults.basis,
            Some("target_vocab_size") => SmoothingBasis::TargetVocabSize,
            Some("full_vocab_size") => SmoothingBasis::FullVocabSize,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "basis '{other}' is not one of target_vocab_size, full_vocab_size"
                )))
            }
        };
        Ok(SmoothingConfig {
            mode,
            lambda: self.get_or("lambda", defaults.lambda)?,
            beta: self.get_or("beta", defaults.beta)?,
            basis,
        })
    }

    fn lora(&self) -> Result<Option<LoraConfig>, CliError> {
        let defaults = LoraConfig::default();
        match self.get::<usize>("lora_rank")? {
            None | Some(0) => Ok(None),
            Some(rank) => Ok(Some(LoraConfig {
                rank,
                alpha: self.get_or("lora_alpha", defaults.alpha)?,
            })),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            epochs: self.get_or("epochs", d.epochs)?,
            batch_tokens: self.get_or("batch_tokens", d.batch_tokens)?,
            peak_lr: self.get_or("peak_lr", d.peak_lr)?,
            warmup_steps: self.get_or("warmup_steps", d.warmup_steps)?,
            beta1: self.get_or("beta1", d.beta1)?,
            beta2: self.get_or("beta2", d.beta2)?,
            weight_decay: self.get_or("weight_decay", d.weight_decay)?,
            seed: self.get_or("seed", d.seed)?,
            smoothing: self.smoothing()?,
            lora: self.lora()?,
            checkpoint_dir: None,
            log_path: None,
        })
    }

    pub fn decode_config(&self) -> Result<DecodeConfig, CliError> {
        let d = DecodeConfig::default();
        Ok(DecodeConfig {
            beam: self.get_or("beam", d.beam)?,
            max_len: self.get_or("max_len", d.max_len)?,
            length_penalty: self.get_or("length_penalty", d.length_penalty)?,
        })
    }

    pub fn model_config(&self, vocab: usize) -> Result<ModelConfig, CliError> {
        let d = ModelConfig::desk(vocab);
        Ok(ModelConfig {
            d_model: self.get_or("d_model", d.d_model)?,
            heads: self.get_or("heads", d.heads)?,
            enc_layers: self.get_or("enc_layers", d.enc_layers)?,
            dec_layers: self.get_or("dec_layers", d.dec_layers)?,
            ffn_dim: self.get_or("ffn_dim", d.ffn_dim)?,
            max_positions: self.get_or("max_positions", d.max_positions)?,
            vocab,
            dropout: self.get_or("dropout", d.dropout)?,
            tied_output: self.get_or("tied_output", d.tied_output)?,
        })
    }

    pub fn direction(&self) -> Result<Direction, CliError> {
        match self.values.get("direction").map(String::as_str) {
            None | Some("gloss_to_text") => Ok(Direction::GlossToText),
            Some("text_to_gloss") => Ok(Direction::TextToGloss),
            Some(other) => Err(CliError::Usage(format!(
                "direction '{other}' is not one of gloss_to_text, text_to_gloss"
            ))),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get_or("seed", TrainConfig::default().seed)
    }

    /// Snapshot of every resolved key for the run manifest.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
