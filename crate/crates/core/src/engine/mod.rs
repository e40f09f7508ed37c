//! Training engine: token-budget batches, data-parallel per-sentence
//! gradients folded in a fixed order, AdamW with a warmup then inverse
//! square root schedule, per-epoch dev decoding with corpus metrics, best
//! checkpoint tracking, and adapter training over a frozen base model.

mod batch;
mod decode;
mod optim;

pub use batch::{make_batches, pack_pair, pack_pairs, Direction, PackedPair};
pub use decode::{beam_search, greedy_search, translate_batch, DecodeConfig, Hypothesis};
pub use optim::{lr_at, AdamW};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ParallelPair;
use crate::embeddings::SimilarityIndex;
use crate::metrics::{self, MetricsError};
use crate::model::{
    pair_ids, pair_loss_span, save_adapter, save_seq2seq, CheckpointMeta, DecOnlyParams,
    DecoderOnly, LoraAdapter, LoraConfig, ModelError, Seq2Seq, Seq2SeqParams,
};
use crate::par;
use crate::sals::{SalsError, SmoothingConfig, SmoothingMode, SoftLabelPlan};
use crate::tokenizer::BpeModel;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("training needs at least one pair")]
    NoTrainingPairs,
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Label(#[from] SalsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimization and bookkeeping settings for one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batch budget counting source plus decoder-input tokens.
    pub batch_tokens: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub smoothing: SmoothingConfig,
    /// When set, the base model stays frozen and only adapter factors train.
    pub lora: Option<LoraConfig>,
    /// Directory for the best checkpoint; nothing is written when absent.
    pub checkpoint_dir: Option<PathBuf>,
    /// Appended per-epoch log lines; nothing is written when absent.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_tokens: 256,
            peak_lr: 3e-3,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.998,
            weight_decay: 0.01,
            seed: 1,
            smoothing: SmoothingConfig::default(),
            lora: None,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.batch_tokens == 0 {
            return Err(EngineError::Config("batch_tokens must be positive".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(EngineError::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.warmup_steps == 0 {
            return Err(EngineError::Config("warmup_steps must be positive".into()));
        }
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(EngineError::Config(format!(
                    "{name} must be in [0, 1), got {value}"
                )));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(EngineError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        self.smoothing.validate()?;
        Ok(())
    }
}

/// One epoch of the training log. Dev fields are zero when the run has no
/// dev pairs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub chrf_pp: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch {:>3} step {:>6} train_loss {:.4} dev_loss {:.4} bleu1 {:.2} bleu2 {:.2} bleu3 {:.2} bleu4 {:.2} rouge_l {:.2} chrf_pp {:.2}",
            self.epoch,
            self.step,
            self.train_loss,
            self.dev_loss,
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l,
            self.chrf_pp
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainOutcome {
    Completed,
    /// Loss or gradients stopped being finite; parameters were rolled back
    /// to the best (or initial) state.
    Diverged { epoch: usize, batch: u64 },
}

/// Result of a training run. The model itself carries the best parameters
/// on return; in adapter mode the base stays untouched and the adapter
/// carries them instead.
#[derive(Debug)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_bleu4: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub final_step: u64,
    pub outcome: TrainOutcome,
    pub adapter: Option<LoraAdapter<f32>>,
}

/// Stable digest of the tokenizer's vocabulary, recorded in checkpoints so
/// a model is never decoded with the wrong token table.
pub fn vocab_fingerprint(tokenizer: &BpeModel) -> String {
    let mut hasher = Sha256::new();
    for id in 0..tokenizer.vocab_len() as u32 {
        if let Some(surface) = tokenizer.surface(id) {
            hasher.update(surface.as_bytes());
        }
        hasher.update([0xFF]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

fn item_rng(seed: u64, step: u64, item: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ item.wrapping_mul(0xb502_6f5a_a966_19e9);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn append_line(path: &Path, line: &str) -> Result<(), EngineError> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Label rows for every target position of one packed pair.
fn pair_labels<'p>(
    plan: &'p SoftLabelPlan,
    pair: &PackedPair,
) -> Result<Vec<Option<crate::sals::LabelRowView<'p>>>, SalsError> {
    pair.tgt_out
        .iter()
        .zip(&pair.starts)
        .map(|(&gold, &start)| plan.row_for_position(gold, start).map(Some))
        .collect()
}

/// Parameter state that training snapshots and restores: either the dense
/// model parameters or the adapter's flattened factors.
enum Snapshot {
    Dense(Seq2SeqParams<f32>),
    Adapter(Vec<f32>),
}

struct BestState {
    epoch: usize,
    bleu4: f64,
    snapshot: Snapshot,
}

/// Trains `model` on `train_pairs` in the given direction. Label smoothing
/// rows come from `config.smoothing`; modes that smooth over neighborhoods
/// need `index`. Dev pairs drive per-epoch decoding, metric tracking, and
/// best-checkpoint selection; with no dev pairs the final parameters stand.
pub fn train(
    model: &mut Seq2Seq<f32>,
    tokenizer: &BpeModel,
    index: Option<&SimilarityIndex>,
    train_pairs: &[ParallelPair],
    dev_pairs: &[ParallelPair],
    config: &TrainConfig,
    direction: Direction,
) -> Result<TrainReport, EngineError> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(EngineError::NoTrainingPairs);
    }

    let targets: Vec<String> = train_pairs
        .iter()
        .map(|p| direction.sides(p).1)
        .collect();
    let plan = SoftLabelPlan::build(tokenizer, &targets, index, config.smoothing)?;
    let dev_plan = SoftLabelPlan::build(
        tokenizer,
        &targets,
        None,
        SmoothingConfig {
            mode: SmoothingMode::OneHot,
            ..config.smoothing
        },
    )?;

    let packed = pack_pairs(tokenizer, train_pairs, direction);
    let dev_packed = pack_pairs(tokenizer, dev_pairs, direction);
    let dev_sources: Vec<String> = dev_pairs.iter().map(|p| direction.sides(p).0).collect();
    let dev_refs: Vec<String> = dev_pairs.iter().map(|p| direction.sides(p).1).collect();
    let dev_decode = DecodeConfig {
        max_len: DecodeConfig::default()
            .max_len
            .min(model.config().max_positions.saturating_sub(1)),
        ..DecodeConfig::default()
    };

    let mut adapter = match &config.lora {
        Some(lora_cfg) => Some(LoraAdapter::attach(
            model.params(),
            lora_cfg,
            config.seed ^ 0x10ad,
        )?),
        None => None,
    };
    let initial = match &adapter {
        Some(a) => Snapshot::Adapter(a.flatten()),
        None => Snapshot::Dense(model.params().clone()),
    };
    let mut opt = {
        let len = match &adapter {
            Some(a) => a.flatten().len(),
            None => model.params().param_count(),
        };
        AdamW::new(len, config.beta1, config.beta2, config.weight_decay)
    };

    let mut best: Option<BestState> = None;
    let mut best_checkpoint = None;
    let mut log = Vec::new();
    let mut outcome = TrainOutcome::Completed;
    let mut global_step: u64 = 0;

    'epochs: for epoch in 1..=config.epochs {
        let batches = make_batches(&packed, config.batch_tokens, config.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in &batches {
            let step = global_step + 1;
            let applied;
            let eff: &Seq2Seq<f32> = match &adapter {
                Some(a) => {
                    applied = a.apply(model)?;
                    &applied
                }
                None => model,
            };
            let results = par::map_indexed(batch.len(), |slot| {
                let pair = &packed[batch[slot]];
                let labels = pair_labels(&plan, pair)?;
                let mut grads = eff.params().zeroed();
                let mut rng = item_rng(config.seed, step, slot as u64);
                let (loss, counted) = eff.loss_and_grads(
                    &pair.src,
                    &pair.tgt_in,
                    &labels,
                    Some(&mut rng),
                    step,
                    &mut grads,
                )?;
                Ok::<_, EngineError>((f64::from(loss), counted, grads))
            });
            let mut folded: Option<Seq2SeqParams<f32>> = None;
            let mut batch_loss = 0.0;
            let mut batch_tokens = 0usize;
            let mut diverged = false;
            for result in results {
                match result {
                    Ok((loss, counted, grads)) => {
                        batch_loss += loss;
                        batch_tokens += counted;
                        match &mut folded {
                            Some(acc) => acc.add_from(&grads),
                            None => folded = Some(grads),
                        }
                    }
                    Err(EngineError::Model(ModelError::NonFiniteLoss { .. })) => {
                        diverged = true;
                        break;
                    }
                    Err(other) => return Err(other),
                }
            }
            let mut grads = match folded {
                Some(g) if batch_tokens > 0 && !diverged => g,
                _ if diverged => {
                    outcome = TrainOutcome::Diverged { epoch, batch: step };
                    break 'epochs;
                }
                _ => continue,
            };
            grads.scale(1.0 / batch_tokens as f32);
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;

            let lr = lr_at(step, config.peak_lr, config.warmup_steps);
            let finite = match &mut adapter {
                Some(a) => {
                    let gflat = a.grads_from(&grads)?.flatten();
                    if gflat.iter().all(|g| g.is_finite()) {
                        let mut flat = a.flatten();
                        opt.step(&mut flat, &gflat, lr);
                        a.assign_flat(&flat)?;
                        true
                    } else {
                        false
                    }
                }
                None => {
                    let gflat = grads.flatten();
                    if gflat.iter().all(|g| g.is_finite()) {
                        let mut flat = model.params().flatten();
                        opt.step(&mut flat, &gflat, lr);
                        model.params_mut().assign_flat(&flat)?;
                        true
                    } else {
                        false
                    }
                }
            };
            if !finite {
                outcome = TrainOutcome::Diverged { epoch, batch: step };
                break 'epochs;
            }
            global_step = step;
        }

        let record = evaluate_epoch(
            model,
            &adapter,
            tokenizer,
            &dev_plan,
            &dev_packed,
            &dev_sources,
            &dev_refs,
            &dev_decode,
            epoch,
            global_step,
            if epoch_tokens > 0 {
                epoch_loss / epoch_tokens as f64
            } else {
                0.0
            },
        )?;
        if let Some(path) = &config.log_path {
            append_line(path, &record.to_line())?;
        }
        let improved = !dev_pairs.is_empty()
            && best.as_ref().map_or(true, |b| record.bleu4 > b.bleu4);
        if improved {
            let snapshot = match &adapter {
                Some(a) => Snapshot::Adapter(a.flatten()),
                None => Snapshot::Dense(model.params().clone()),
            };
            best = Some(BestState {
                epoch,
                bleu4: record.bleu4,
                snapshot,
            });
            if let Some(dir) = &config.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let meta = CheckpointMeta {
                    config: model.config().clone(),
                    step: global_step,
                    vocab_checksum: Some(vocab_fingerprint(tokenizer)),
                    metrics: Some(serde_json::to_value(&record).expect("record serializes")),
                };
                let path = match &adapter {
                    Some(a) => {
                        let path = dir.join("best.adapter");
                        save_adapter(&path, a)?;
                        path
                    }
                    None => {
                        let path = dir.join("best.ckpt");
                        save_seq2seq(&path, model, &meta)?;
                        path
                    }
                };
                best_checkpoint = Some(path);
            }
        }
        log.push(record);
    }

    // Leave the best-scoring parameters in place. A diverged run with no
    // best state rolls back to the initial parameters.
    let restore = match (&best, &outcome) {
        (Some(b), _) => Some(&b.snapshot),
        (None, TrainOutcome::Diverged { .. }) => Some(&initial),
        (None, TrainOutcome::Completed) => None,
    };
    if let Some(snapshot) = restore {
        match (snapshot, &mut adapter) {
            (Snapshot::Adapter(flat), Some(a)) => a.assign_flat(flat)?,
            (Snapshot::Dense(params), None) => *model.params_mut() = params.clone(),
            _ => unreachable!("snapshot kind follows adapter mode"),
        }
    }

    Ok(TrainReport {
        log,
        best_epoch: best.as_ref().map(|b| b.epoch),
        best_bleu4: best.as_ref().map_or(0.0, |b| b.bleu4),
        best_checkpoint,
        final_step: global_step,
        outcome,
        adapter,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_epoch(
    model: &Seq2Seq<f32>,
    adapter: &Option<LoraAdapter<f32>>,
    tokenizer: &BpeModel,
    dev_plan: &SoftLabelPlan,
    dev_packed: &[PackedPair],
    dev_sources: &[String],
    dev_refs: &[String],
    decode: &DecodeConfig,
    epoch: usize,
    step: u64,
    train_loss: f64,
) -> Result<EpochRecord, EngineError> {
    let mut record = EpochRecord {
        epoch,
        step,
        train_loss,
        dev_loss: 0.0,
        bleu1: 0.0,
        bleu2: 0.0,
        bleu3: 0.0,
        bleu4: 0.0,
        rouge_l: 0.0,
        chrf_pp: 0.0,
    };
    if dev_packed.is_empty() {
        return Ok(record);
    }
    let applied;
    let eff: &Seq2Seq<f32> = match adapter {
        Some(a) => {
            applied = a.apply(model)?;
            &applied
        }
        None => model,
    };
    let losses = par::map_slice(dev_packed, |pair| {
        let labels = pair_labels(dev_plan, pair)?;
        let (loss, counted) = eff.loss_only(&pair.src, &pair.tgt_in, &labels)?;
        Ok::<_, EngineError>((f64::from(loss), counted))
    });
    let mut loss_sum = 0.0;
    let mut token_sum = 0usize;
    for result in losses {
        let (loss, counted) = result?;
        loss_sum += loss;
        token_sum += counted;
    }
    if token_sum > 0 {
        record.dev_loss = loss_sum / token_sum as f64;
    }
    let outputs = translate_batch(eff, tokenizer, dev_sources, decode)?;
    let report = metrics::evaluate(&outputs, dev_refs)?;
    record.bleu1 = report.bleu1;
    record.bleu2 = report.bleu2;
    record.bleu3 = report.bleu3;
    record.bleu4 = report.bleu4;
    record.rouge_l = report.rouge_l;
    record.chrf_pp = report.chrf_pp;
    Ok(record)
}

/// One epoch of the decoder-only training log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LmEpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Debug)]
pub struct LmReport {
    pub log: Vec<LmEpochRecord>,
    pub final_step: u64,
    pub outcome: TrainOutcome,
}

/// Combined gloss-separator-text stream for one pair, with its scored span.
fn pack_lm_pair(
    tokenizer: &BpeModel,
    pair: &ParallelPair,
    direction: Direction,
) -> (Vec<u32>, Vec<bool>) {
    let (source, target) = direction.sides(pair);
    let src_ids = tokenizer.encode_sentence(&source).ids;
    let tgt = tokenizer.encode_sentence(&target);
    let ids = pair_ids(&src_ids, &tgt.ids);
    // Word-start flags aligned to the PREDICTED token at each position:
    // position i predicts ids[i+1]. Only span positions are scored.
    let mut starts = vec![false; ids.len()];
    if let Some(span) = pair_loss_span(&ids) {
        for (offset, pos) in span.enumerate() {
            starts[pos] = tgt.word_start.get(offset).copied().unwrap_or(false);
        }
    }
    (ids, starts)
}

fn lm_labels<'p>(
    plan: &'p SoftLabelPlan,
    ids: &[u32],
    starts: &[bool],
) -> Result<Vec<Option<crate::sals::LabelRowView<'p>>>, SalsError> {
    let span = pair_loss_span(ids);
    let mut labels = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        let scored = span.as_ref().is_some_and(|s| s.contains(&i));
        if scored {
            labels.push(Some(plan.row_for_position(ids[i + 1], starts[i])?));
        } else {
            labels.push(None);
        }
    }
    Ok(labels)
}

/// Trains the decoder-only variant on combined streams. Shares the
/// optimizer, schedule, batching, and smoothing rules with `train`; epochs
/// report loss only.
pub fn train_lm(
    model: &mut DecoderOnly<f32>,
    tokenizer: &BpeModel,
    index: Option<&SimilarityIndex>,
    train_pairs: &[ParallelPair],
    dev_pairs: &[ParallelPair],
    config: &TrainConfig,
    direction: Direction,
) -> Result<LmReport, EngineError> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(EngineError::NoTrainingPairs);
    }
    if config.lora.is_some() {
        return Err(EngineError::Config(
            "adapter training applies to the encoder-decoder model".into(),
        ));
    }

    let targets: Vec<String> = train_pairs
        .iter()
        .map(|p| direction.sides(p).1)
        .collect();
    let plan = SoftLabelPlan::build(tokenizer, &targets, index, config.smoothing)?;
    let dev_plan = SoftLabelPlan::build(
        tokenizer,
        &targets,
        None,
        SmoothingConfig {
            mode: SmoothingMode::OneHot,
            ..config.smoothing
        },
    )?;
    let streams: Vec<(Vec<u32>, Vec<bool>)> = train_pairs
        .iter()
        .map(|p| pack_lm_pair(tokenizer, p, direction))
        .collect();
    let dev_streams: Vec<(Vec<u32>, Vec<bool>)> = dev_pairs
        .iter()
        .map(|p| pack_lm_pair(tokenizer, p, direction))
        .collect();

    let initial = model.params().clone();
    let mut opt = AdamW::new(
        model.params().param_count(),
        config.beta1,
        config.beta2,
        config.weight_decay,
    );
    let mut log = Vec::new();
    let mut outcome = TrainOutcome::Completed;
    let mut global_step: u64 = 0;

    'epochs: for epoch in 1..=config.epochs {
        // Reuses the batcher by treating the whole stream as target tokens.
        let order = lm_batches(&streams, config.batch_tokens, config.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in &order {
            let step = global_step + 1;
            let results = par::map_indexed(batch.len(), |slot| {
                let (ids, starts) = &streams[batch[slot]];
                let labels = lm_labels(&plan, ids, starts)?;
                let mut grads = model.params().zeroed();
                let mut rng = item_rng(config.seed, step, slot as u64);
                let (loss, counted) =
                    model.loss_and_grads(ids, &labels, Some(&mut rng), step, &mut grads)?;
                Ok::<_, EngineError>((f64::from(loss), counted, grads))
            });
            let mut folded: Option<DecOnlyParams<f32>> = None;
            let mut batch_loss = 0.0;
            let mut batch_tokens = 0usize;
            let mut diverged = false;
            for result in results {
                match result {
                    Ok((loss, counted, grads)) => {
                        batch_loss += loss;
                        batch_tokens += counted;
                        match &mut folded {
                            Some(acc) => acc.add_from(&grads),
                            None => folded = Some(grads),
                        }
                    }
                    Err(EngineError::Model(ModelError::NonFiniteLoss { .. })) => {
                        diverged = true;
                        break;
                    }
                    Err(other) => return Err(other),
                }
            }
            let mut grads = match folded {
                Some(g) if batch_tokens > 0 && !diverged => g,
                _ if diverged => {
                    outcome = TrainOutcome::Diverged { epoch, batch: step };
                    break 'epochs;
                }
                _ => continue,
            };
            grads.scale(1.0 / batch_tokens as f32);
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
            let gflat = grads.flatten();
            if gflat.iter().any(|g| !g.is_finite()) {
                outcome = TrainOutcome::Diverged { epoch, batch: step };
                break 'epochs;
            }
            let lr = lr_at(step, config.peak_lr, config.warmup_steps);
            let mut flat = model.params().flatten();
            opt.step(&mut flat, &gflat, lr);
            model.params_mut().assign_flat(&flat)?;
            global_step = step;
        }

        let mut record = LmEpochRecord {
            epoch,
            step: global_step,
            train_loss: if epoch_tokens > 0 {
                epoch_loss / epoch_tokens as f64
            } else {
                0.0
            },
            dev_loss: 0.0,
        };
        if !dev_streams.is_empty() {
            let losses = par::map_slice(&dev_streams, |(ids, starts)| {
                let labels = lm_labels(&dev_plan, ids, starts)?;
                let (loss, counted) = model.loss_only(ids, &labels)?;
                Ok::<_, EngineError>((f64::from(loss), counted))
            });
            let mut loss_sum = 0.0;
            let mut token_sum = 0usize;
            for result in losses {
                let (loss, counted) = result?;
                loss_sum += loss;
                token_sum += counted;
            }
            if token_sum > 0 {
                record.dev_loss = loss_sum / token_sum as f64;
            }
        }
        if let Some(path) = &config.log_path {
            append_line(
                path,
                &format!(
                    "epoch {:>3} step {:>6} train_loss {:.4} dev_loss {:.4}",
                    record.epoch, record.step, record.train_loss, record.dev_loss
                ),
            )?;
        }
        log.push(record);
    }

    if let TrainOutcome::Diverged { .. } = outcome {
        *model.params_mut() = initial;
    }

    Ok(LmReport {
        log,
        final_step: global_step,
        outcome,
    })
}

/// Token-budget batches over combined streams, same shuffling scheme as the
/// pair batcher.
fn lm_batches(
    streams: &[(Vec<u32>, Vec<bool>)],
    budget: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..streams.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| streams[i].0.len() / 4);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let cost = streams[i].0.len();
        if !current.is_empty() && used + cost > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += cost;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Origin;
    use crate::model::ModelConfig;
    use crate::sals::LabelRowView;

    fn pairs(n: usize) -> Vec<ParallelPair> {
        let glosses = ["HUND LAUF", "KATZE SCHLAF", "HUND KATZE SEH", "VOGEL SING"];
        let texts = [
            "der hund lauft",
            "die katze schlaft",
            "der hund sieht die katze",
            "der vogel singt",
        ];
        (0..n)
            .map(|i| ParallelPair {
                id: format!("p{i}"),
                gloss: glosses[i % 4].split_whitespace().map(str::to_string).collect(),
                text: texts[i % 4].to_string(),
                origin: Origin::Gold,
            })
            .collect()
    }

    fn setup(n: usize) -> (BpeModel, Vec<ParallelPair>) {
        let train = pairs(n);
        let mut sentences: Vec<String> = train.iter().map(|p| p.text.clone()).collect();
        sentences.extend(train.iter().map(|p| p.gloss_joined()));
        let tok = BpeModel::train(&sentences, 160).unwrap();
        (tok, train)
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_tokens: 64,
            warmup_steps: 10,
            peak_lr: 1e-3,
            smoothing: SmoothingConfig {
                mode: SmoothingMode::OneHot,
                ..SmoothingConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_default_values_hold() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 30);
        assert_eq!(c.batch_tokens, 256);
        assert_eq!(c.peak_lr, 3e-3);
        assert_eq!(c.warmup_steps, 400);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.998);
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!(c.seed, 1);
        assert!(c.lora.is_none());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.batch_tokens = 0;
        assert!(c.validate().is_err());
        c = TrainConfig { peak_lr: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c = TrainConfig { warmup_steps: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c = TrainConfig { beta2: 1.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c = TrainConfig { weight_decay: -0.1, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let (tok, train_pairs) = setup(8);
        let mut model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let before = model.params().flatten();
        let report = train(
            &mut model,
            &tok,
            None,
            &train_pairs,
            &[],
            &quick_config(0),
            Direction::GlossToText,
        )
        .unwrap();
        assert_eq!(model.params().flatten(), before);
        assert!(report.log.is_empty());
        assert_eq!(report.final_step, 0);
        assert_eq!(report.outcome, TrainOutcome::Completed);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let (tok, _) = setup(4);
        let mut model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let err = train(
            &mut model,
            &tok,
            None,
            &[],
            &[],
            &quick_config(1),
            Direction::GlossToText,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::NoTrainingPairs));
    }

    #[test]
    fn training_decreases_loss_and_is_seed_deterministic() {
        let (tok, train_pairs) = setup(12);
        let config = quick_config(4);
        let mut a = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let report_a = train(
            &mut a,
            &tok,
            None,
            &train_pairs,
            &[],
            &config,
            Direction::GlossToText,
        )
        .unwrap();
        let mut b = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let report_b = train(
            &mut b,
            &tok,
            None,
            &train_pairs,
            &[],
            &config,
            Direction::GlossToText,
        )
        .unwrap();
        assert!(report_a.log.last().unwrap().train_loss < report_a.log[0].train_loss);
        assert_eq!(a.params().flatten(), b.params().flatten());
        let lines: Vec<f64> = report_a.log.iter().map(|r| r.train_loss).collect();
        let lines_b: Vec<f64> = report_b.log.iter().map(|r| r.train_loss).collect();
        assert_eq!(lines, lines_b);
    }

    #[test]
    fn dev_tracking_restores_best_parameters() {
        let (tok, train_pairs) = setup(12);
        let dev = pairs(4);
        let mut config = quick_config(3);
        config.seed = 5;
        let mut model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let report = train(
            &mut model,
            &tok,
            None,
            &train_pairs,
            &dev,
            &config,
            Direction::GlossToText,
        )
        .unwrap();
        let best_epoch = report.best_epoch.unwrap();
        let best_record = &report.log[best_epoch - 1];
        assert_eq!(best_record.bleu4, report.best_bleu4);
        for record in &report.log {
            assert!(record.bleu4 <= report.best_bleu4 + 1e-12);
        }
    }

    #[test]
    fn epoch_log_line_carries_every_metric() {
        let record = EpochRecord {
            epoch: 2,
            step: 40,
            train_loss: 1.5,
            dev_loss: 1.25,
            bleu1: 50.0,
            bleu2: 40.0,
            bleu3: 30.0,
            bleu4: 20.0,
            rouge_l: 45.0,
            chrf_pp: 35.0,
        };
        let line = record.to_line();
        for needle in [
            "epoch", "step", "train_loss 1.5000", "dev_loss 1.2500", "bleu4 20.00",
            "rouge_l 45.00", "chrf_pp 35.00",
        ] {
            assert!(line.contains(needle), "missing {needle} in {line}");
        }
    }

    #[test]
    fn log_file_gains_one_line_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("train.log");
        let (tok, train_pairs) = setup(8);
        let mut config = quick_config(2);
        config.log_path = Some(log_path.clone());
        let mut model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        train(
            &mut model,
            &tok,
            None,
            &train_pairs,
            &[],
            &config,
            Direction::GlossToText,
        )
        .unwrap();
        let text = std::fs::read_to_string(&log_path).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn best_checkpoint_is_written_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let (tok, train_pairs) = setup(10);
        let dev = pairs(3);
        let mut config = quick_config(2);
        config.checkpoint_dir = Some(dir.path().to_path_buf());
        let mut model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let report = train(
            &mut model,
            &tok,
            None,
            &train_pairs,
            &dev,
            &config,
            Direction::GlossToText,
        )
        .unwrap();
        let path = report.best_checkpoint.unwrap();
        let (loaded, meta) = crate::model::load_seq2seq(&path).unwrap();
        assert_eq!(meta.vocab_checksum.unwrap(), vocab_fingerprint(&tok));
        // The checkpoint holds the best parameters, which train restored
        // into the model.
        assert_eq!(loaded.params().flatten(), model.params().flatten());
    }

    #[test]
    fn adapter_mode_freezes_the_base_model() {
        let (tok, train_pairs) = setup(10);
        let dev = pairs(3);
        let mut config = quick_config(2);
        config.lora = Some(LoraConfig { rank: 2, alpha: 4.0 });
        let mut model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let base_checksum = model.params().checksum();
        let report = train(
            &mut model,
            &tok,
            None,
            &train_pairs,
            &dev,
            &config,
            Direction::GlossToText,
        )
        .unwrap();
        assert_eq!(model.params().checksum(), base_checksum);
        let adapter = report.adapter.unwrap();
        assert!(adapter.flatten().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn vocab_fingerprint_tracks_vocabulary_content() {
        let (tok, _) = setup(4);
        let again = vocab_fingerprint(&tok);
        assert_eq!(vocab_fingerprint(&tok), again);
        let other = BpeModel::train(&["ganz andere worte hier".to_string()], 64).unwrap();
        assert_ne!(vocab_fingerprint(&other), again);
    }

    #[test]
    fn lm_training_decreases_loss_on_the_scored_span() {
        let (tok, train_pairs) = setup(12);
        let mut model = DecoderOnly::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let report = train_lm(
            &mut model,
            &tok,
            None,
            &train_pairs,
            &train_pairs[..4],
            &quick_config(4),
            Direction::GlossToText,
        )
        .unwrap();
        assert_eq!(report.log.len(), 4);
        assert!(report.log.last().unwrap().train_loss < report.log[0].train_loss);
        assert!(report.log.last().unwrap().dev_loss > 0.0);
    }

    #[test]
    fn lm_labels_score_only_text_positions() {
        let (tok, train_pairs) = setup(4);
        let (ids, starts) = pack_lm_pair(&tok, &train_pairs[0], Direction::GlossToText);
        let targets: Vec<String> = vec![train_pairs[0].text.clone()];
        let plan = SoftLabelPlan::build(
            &tok,
            &targets,
            None,
            SmoothingConfig {
                mode: SmoothingMode::OneHot,
                ..SmoothingConfig::default()
            },
        )
        .unwrap();
        let labels = lm_labels(&plan, &ids, &starts).unwrap();
        let span = pair_loss_span(&ids).unwrap();
        for (i, label) in labels.iter().enumerate() {
            assert_eq!(label.is_some(), span.contains(&i), "position {i}");
        }
        // Scored rows target the next token in the stream.
        for i in span {
            let mut dense_max = (0u32, 0.0f64);
            if let Some(row) = &labels[i] {
                row.for_each(|id, p| {
                    if p > dense_max.1 {
                        dense_max = (id, p);
                    }
                });
            }
            assert_eq!(dense_max.0, ids[i + 1]);
        }
    }

    #[test]
    fn sals_smoothing_trains_without_an_index_error() {
        let (tok, train_pairs) = setup(8);
        let mut model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let mut config = quick_config(1);
        config.smoothing = SmoothingConfig::default();
        let err = train(
            &mut model,
            &tok,
            None,
            &train_pairs,
            &[],
            &config,
            Direction::GlossToText,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::Label(SalsError::MissingIndex)));
    }

    #[test]
    fn uniform_smoothing_needs_no_index() {
        let (tok, train_pairs) = setup(8);
        let mut model = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let mut config = quick_config(1);
        config.smoothing = SmoothingConfig {
            mode: SmoothingMode::UniformTarget,
            ..SmoothingConfig::default()
        };
        let report = train(
            &mut model,
            &tok,
            None,
            &train_pairs,
            &[],
            &config,
            Direction::GlossToText,
        )
        .unwrap();
        assert_eq!(report.outcome, TrainOutcome::Completed);
        assert!(report.final_step > 0);
    }

    #[test]
    fn reverse_direction_swaps_what_the_model_learns() {
        let (tok, train_pairs) = setup(8);
        let config = quick_config(2);
        let mut fwd = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        let mut rev = Seq2Seq::<f32>::new(ModelConfig::tiny(tok.vocab_len()), 3).unwrap();
        train(&mut fwd, &tok, None, &train_pairs, &[], &config, Direction::GlossToText).unwrap();
        train(&mut rev, &tok, None, &train_pairs, &[], &config, Direction::TextToGloss).unwrap();
        assert_ne!(fwd.params().flatten(), rev.params().flatten());
    }

    #[test]
    fn label_rows_for_packed_pair_cover_every_position() {
        let (tok, train_pairs) = setup(4);
        let targets: Vec<String> = train_pairs.iter().map(|p| p.text.clone()).collect();
        let plan = SoftLabelPlan::build(
            &tok,
            &targets,
            None,
            SmoothingConfig {
                mode: SmoothingMode::UniformTarget,
                ..SmoothingConfig::default()
            },
        )
        .unwrap();
        let packed = pack_pair(&tok, 0, "HUND LAUF", &train_pairs[0].text);
        let labels = pair_labels(&plan, &packed).unwrap();
        assert_eq!(labels.len(), packed.tgt_in.len());
        for label in &labels {
            let mut total = 0.0;
            label.as_ref().unwrap().for_each(|_, p| total += p);
            assert!((total - 1.0).abs() < 1e-5);
        }
        let _ = LabelRowView::Sparse(&[]);
    }
}
