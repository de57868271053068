//! Two-stage training: masked-token pretraining, then classifier fine-tuning.

mod mask;
mod optim;
mod split;

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use claimrisk_tensor::{Tape, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Batch, EncoderConfig, EncoderError, EncoderState, Stage};
use crate::eval::{roc_auc, EvalError};
use crate::kv::{parse_value, ConfigError, KvConfig};
use crate::vocab::{is_special, LabeledSample, Vocabulary};

pub use mask::{mask_tokens, n_selected, CorruptionMode, MaskedTokens};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
pub use split::{split_by_beneficiary, Split, SplitAssignment, DEFAULT_RATIOS, MIN_BENEFICIARIES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 10 beneficiaries to split, got {0}")]
    TooFewBeneficiaries(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sample has no maskable token")]
    NothingToMask,
    #[error("no gradient for parameter #{0}")]
    GradMissing(usize),
    #[error("beneficiary {0} appears in both training and validation data")]
    SplitOverlap(String),
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Encoder(EncoderError::Tensor(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_fraction: f64,
    pub max_epochs: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub mask_fraction: f64,
    pub corruption: CorruptionMode,
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Caps optimizer steps per epoch; 0 means one full pass.
    pub max_steps_per_epoch: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_peak: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.1,
            max_epochs: 10,
            patience: 3,
            mask_fraction: 0.15,
            corruption: CorruptionMode::MaskRandomKeep,
            seed: 7,
            grad_clip: 1.0,
            max_steps_per_epoch: 0,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(TrainError::InvalidConfig(format!("{name}={v} must lie in (0,1)")))
            }
        };
        open_unit("mask_fraction", self.mask_fraction)?;
        open_unit("warmup_fraction", self.warmup_fraction)?;
        open_unit("beta1", self.beta1)?;
        open_unit("beta2", self.beta2)?;
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.eval_batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "patience, batch_size, max_epochs and eval_batch_size must be positive".into(),
            ));
        }
        if !(self.lr_peak > 0.0) || self.weight_decay < 0.0 || !(self.eps > 0.0) || self.grad_clip < 0.0 {
            return Err(TrainError::InvalidConfig("lr_peak and eps must be positive, weight_decay and grad_clip non-negative".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr_peak" => self.lr_peak = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "mask_fraction" => self.mask_fraction = parse_value(key, value)?,
            "corruption" => self.corruption = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "max_steps_per_epoch" => self.max_steps_per_epoch = parse_value(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub metric: String,
    pub val_metric: f64,
    pub baseline: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    /// Tab-separated `key=value` fields.
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "stage={}\tepoch={}\tsteps={}\tlr={:.3e}\ttrain_loss={:.6}\t{}={:.6}",
            self.stage, self.epoch, self.steps, self.lr, self.train_loss, self.metric, self.val_metric
        );
        if let Some(b) = self.baseline {
            line.push_str(&format!("\tbaseline={b:.6}"));
        }
        line.push_str(&format!("\tseconds={:.1}", self.seconds));
        line
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

fn check_disjoint(train: &[LabeledSample], validate: &[LabeledSample]) -> Result<(), TrainError> {
    let ids: HashSet<&str> = train.iter().map(|s| s.beneficiary_id.as_str()).collect();
    match validate.iter().find(|s| ids.contains(s.beneficiary_id.as_str())) {
        Some(s) => Err(TrainError::SplitOverlap(s.beneficiary_id.clone())),
        None => Ok(()),
    }
}

type BatchLoss<'a> =
    dyn FnMut(&EncoderState, &mut Tape<f32>, &[Var], &[usize], &mut ChaCha8Rng) -> Result<Var, TrainError> + 'a;

/// Shared optimizer loop: shuffle, step, validate once per epoch, keep the
/// best state, stop after `patience` validations without improvement.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    mut state: EncoderState,
    stage: Stage,
    stage_name: &str,
    metric: &str,
    n_train: usize,
    config: &TrainConfig,
    batch_loss: &mut BatchLoss<'_>,
    validate: &dyn Fn(&EncoderState) -> Result<(f64, Option<f64>), TrainError>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(EncoderState, TrainHistory), TrainError> {
    config.validate()?;
    state.set_stage(stage);
    let active = state.stage_params(stage);
    let sizes: Vec<usize> = active.iter().map(|&i| state.params()[i].1.len()).collect();
    let decay: Vec<bool> = active.iter().map(|&i| state.params()[i].1.shape().len() >= 2).collect();
    let mut opt = AdamW::new(config.adamw(), &sizes);
    let full = n_train.div_ceil(config.batch_size);
    let per_epoch = if config.max_steps_per_epoch > 0 { full.min(config.max_steps_per_epoch) } else { full };
    let total = per_epoch * config.max_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut history = TrainHistory { best_metric: f64::NEG_INFINITY, ..TrainHistory::default() };
    let mut best = state.clone();
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size).take(per_epoch) {
            let mut tape = Tape::new();
            let p = state.leaves(&mut tape);
            let loss = batch_loss(&state, &mut tape, &p, chunk, &mut rng)?;
            loss_sum += f64::from(tape.scalar(loss));
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f32>> = active
                .iter()
                .map(|&i| tape.grad(p[i]).map(<[f32]>::to_vec).ok_or(TrainError::GradMissing(i)))
                .collect::<Result<_, _>>()?;
            clip_grad_norm(&mut grads, config.grad_clip);
            step += 1;
            lr = cosine_lr(step, total, config.lr_peak, config.warmup_fraction);
            let mut params: Vec<_> = state
                .params_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| active.binary_search(i).is_ok())
                .map(|(_, (_, t))| t)
                .collect();
            let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| Some(&g[..])).collect();
            opt.step(&mut params, &grad_refs, &decay, lr)?;
        }
        let (val_metric, baseline) = validate(&state)?;
        let entry = EpochLog {
            stage: stage_name.to_string(),
            epoch,
            steps: step,
            lr,
            train_loss: loss_sum / per_epoch.max(1) as f64,
            metric: metric.to_string(),
            val_metric,
            baseline,
            seconds: started.elapsed().as_secs_f64(),
        };
        log(&entry);
        history.epochs.push(entry);
        if val_metric > history.best_metric {
            history.best_metric = val_metric;
            history.best_epoch = epoch;
            best = state.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                history.stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }
    best.clear_grads();
    Ok((best, history))
}

/// Most frequent non-special token id.
pub fn majority_token(samples: &[LabeledSample]) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in samples.iter().flat_map(|s| &s.tokens) {
        if !is_special(t as usize) {
            *counts.entry(t as usize).or_default() += 1;
        }
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0))).map(|(t, _)| t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedEval {
    pub accuracy: f64,
    /// Accuracy of always predicting the majority token at the same positions.
    pub baseline: f64,
    pub n_positions: usize,
}

/// Masked-token accuracy in inference mode with masks drawn from `seed`.
pub fn masked_accuracy(
    state: &EncoderState,
    samples: &[LabeledSample],
    majority: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<MaskedEval, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = state.config.vocab_size;
    let masked: Vec<(usize, MaskedTokens)> = samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            mask_tokens(&s.tokens, vocab_size, config.mask_fraction, config.corruption, &mut rng).ok().map(|m| (i, m))
        })
        .collect();
    let counts: Vec<(usize, usize, usize)> = masked
        .par_chunks(config.eval_batch_size)
        .map(|chunk| {
            let (batch, positions, targets) = masked_batch(samples, chunk);
            let mut tape = Tape::new();
            let p = state.leaves(&mut tape);
            let fwd = state.encode_on(&mut tape, &p, &batch, None)?;
            let logits = state.mtl_logits_on(&mut tape, &p, fwd.hidden, &positions)?;
            let v = tape.value(logits);
            let mut correct = 0;
            for (row, &t) in v.chunks(vocab_size).zip(&targets) {
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
                    .map(|(i, _)| i);
                correct += usize::from(arg == Some(t));
            }
            let base = targets.iter().filter(|&&t| t == majority).count();
            Ok((correct, base, targets.len()))
        })
        .collect::<Result<_, TrainError>>()?;
    let (correct, base, n) = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    if n == 0 {
        return Err(TrainError::EmptyDataset("masked validation"));
    }
    Ok(MaskedEval { accuracy: correct as f64 / n as f64, baseline: base as f64 / n as f64, n_positions: n })
}

/// Packs corrupted sequences; returns the batch, global rows of the masked
/// positions and their original ids.
fn masked_batch(samples: &[LabeledSample], items: &[(usize, MaskedTokens)]) -> (Batch, Vec<usize>, Vec<usize>) {
    let batch = Batch::new(
        items.iter().map(|(i, m)| (&m.tokens[..], &samples[*i].segment_ids[..], &samples[*i].time_bucket_ids[..])),
        0,
    );
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for ((_, m), &(start, _)) in items.iter().zip(&batch.layout.spans) {
        positions.extend(m.positions.iter().map(|p| start + p));
        targets.extend(&m.originals);
    }
    (batch, positions, targets)
}

/// Masked-token pretraining of embeddings, blocks and the tied vocabulary
/// head. Validation metric: masked accuracy on `validate` (fixed masks).
pub fn pretrain_mtl(
    train: &[LabeledSample],
    validate: &[LabeledSample],
    state: EncoderState,
    vocab: &Vocabulary,
    config: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(EncoderState, TrainHistory), TrainError> {
    state.check_vocab(vocab)?;
    check_disjoint(train, validate)?;
    let train: Vec<&LabeledSample> = train.iter().filter(|s| s.tokens.iter().any(|&t| !is_special(t as usize))).collect();
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if validate.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let owned: Vec<LabeledSample> = train.iter().map(|s| (*s).clone()).collect();
    let majority = majority_token(&owned).ok_or(TrainError::NothingToMask)?;
    let vocab_size = state.config.vocab_size;
    let mut batch_loss = |st: &EncoderState, tape: &mut Tape<f32>, p: &[Var], idx: &[usize], rng: &mut ChaCha8Rng| {
        let items: Vec<(usize, MaskedTokens)> = idx
            .iter()
            .map(|&i| Ok((i, mask_tokens(&owned[i].tokens, vocab_size, config.mask_fraction, config.corruption, rng)?)))
            .collect::<Result<_, TrainError>>()?;
        let (batch, positions, targets) = masked_batch(&owned, &items);
        let fwd = st.encode_on(tape, p, &batch, Some(rng as &mut dyn RngCore))?;
        let logits = st.mtl_logits_on(tape, p, fwd.hidden, &positions)?;
        Ok(tape.cross_entropy(logits, &targets)?)
    };
    let val_seed = config.seed ^ 0x5eed_5eed;
    let validate_fn = |st: &EncoderState| {
        let m = masked_accuracy(st, validate, majority, config, val_seed)?;
        Ok((m.accuracy, Some(m.baseline)))
    };
    run_stage(
        state,
        Stage::Pretrain,
        "pretrain",
        "val_masked_accuracy",
        owned.len(),
        config,
        &mut batch_loss,
        &validate_fn,
        log,
    )
}

/// Binary cross-entropy fine-tuning of embeddings, blocks and classifier.
/// Validation metric: AUC on `validate`.
pub fn finetune_classifier(
    train: &[LabeledSample],
    validate: &[LabeledSample],
    state: EncoderState,
    vocab: &Vocabulary,
    config: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(EncoderState, TrainHistory), TrainError> {
    state.check_vocab(vocab)?;
    check_disjoint(train, validate)?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if validate.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let labels: Vec<u8> = validate.iter().map(|s| s.label).collect();
    let mut batch_loss = |st: &EncoderState, tape: &mut Tape<f32>, p: &[Var], idx: &[usize], rng: &mut ChaCha8Rng| {
        let refs: Vec<&LabeledSample> = idx.iter().map(|&i| &train[i]).collect();
        let batch = Batch::from_samples(&refs, 0);
        let y: Vec<f32> = refs.iter().map(|s| f32::from(s.label)).collect();
        let fwd = st.encode_on(tape, p, &batch, Some(rng as &mut dyn RngCore))?;
        let z = st.classify_on(tape, p, fwd.hidden, &batch)?;
        Ok(tape.binary_cross_entropy(z, &y)?)
    };
    let validate_fn = |st: &EncoderState| {
        let scores = st.predict_logits(validate, config.eval_batch_size)?;
        Ok((roc_auc(&scores, &labels)?, None))
    };
    run_stage(
        state,
        Stage::Finetune,
        "finetune",
        "val_auc",
        train.len(),
        config,
        &mut batch_loss,
        &validate_fn,
        log,
    )
}

/// Initialises an encoder, optionally pretrains it, then fine-tunes the
/// classifier. Returns the final state and one history per stage run.
#[allow(clippy::too_many_arguments)]
pub fn train_pipeline(
    train: &[LabeledSample],
    validate: &[LabeledSample],
    vocab: &Vocabulary,
    encoder: EncoderConfig,
    init_seed: u64,
    pretrain: Option<&TrainConfig>,
    finetune: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(EncoderState, Vec<TrainHistory>), TrainError> {
    let mut state = EncoderState::init(encoder, vocab.hash(), init_seed)?;
    let mut histories = Vec::new();
    if let Some(cfg) = pretrain {
        let (s, h) = pretrain_mtl(train, validate, state, vocab, cfg, log)?;
        state = s;
        histories.push(h);
    }
    let (state, h) = finetune_classifier(train, validate, state, vocab, finetune, log)?;
    histories.push(h);
    Ok((state, histories))
}
