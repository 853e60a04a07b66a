use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;

use super::masking::{mask_tokens, MaskStrategy, MlmBatch};
use super::optim::{Adam, AdamConfig};
use super::{EpochRecord, TrainLog};
use crate::encoder::{cross_entropy, EncoderModel, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng::substream;
use crate::tokenizer::TokenizedSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_prob: f64,
    pub strategy: MaskStrategy,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 64,
            epochs: 1000,
            mask_prob: 0.15,
            strategy: MaskStrategy::Standard,
            weight_decay: 0.01,
        }
    }
}

impl PretrainConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("optimizer".into(), "adamw".into()),
            ("lr".into(), format!("{:?}", self.lr)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("mask_prob".into(), format!("{:?}", self.mask_prob)),
            ("strategy".into(), self.strategy.to_string()),
            ("weight_decay".into(), format!("{:?}", self.weight_decay)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss {
    pub value: f64,
    pub targets: usize,
    /// Set when no position carried a label; `value` is then 0.
    pub empty: bool,
}

/// Mean cross-entropy of `[B, T, V]` logits over labelled positions.
pub fn mlm_loss(logits: &Array3<f64>, labels: &[Vec<i64>]) -> Result<MlmLoss> {
    let (b, t, v) = logits.dim();
    if labels.len() != b || labels.iter().any(|row| row.len() != t) {
        return Err(Error::Input(format!("labels do not match logits of shape [{b}, {t}, {v}]")));
    }
    let mut picked = Vec::new();
    let mut targets = Vec::new();
    for (s, row) in labels.iter().enumerate() {
        for (j, &label) in row.iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            if label < 0 || label as usize >= v {
                return Err(Error::Input(format!("label {label} outside vocab of {v}")));
            }
            picked.push((s, j));
            targets.push(label as usize);
        }
    }
    if targets.is_empty() {
        log::warn!("MLM loss requested for a batch without masked positions");
        return Ok(MlmLoss {
            value: 0.0,
            targets: 0,
            empty: true,
        });
    }
    let mut rows = Array2::zeros((targets.len(), v));
    for (r, &(s, j)) in picked.iter().enumerate() {
        rows.row_mut(r).assign(&logits.slice(ndarray::s![s, j, ..]));
    }
    Ok(MlmLoss {
        value: cross_entropy(&rows, &targets).0,
        targets: targets.len(),
        empty: false,
    })
}

fn finite(loss: f64, context: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numerical(format!("loss became {loss} {context}")))
    }
}

/// Share of masked positions whose arg-max prediction equals the label.
fn masked_accuracy(model: &EncoderModel, batch: &MlmBatch) -> Result<Option<f64>> {
    let (hidden, _) = model.forward_sequences(&batch.sequences(), None)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (h, labels) in hidden.iter().zip(&batch.labels) {
        let rows: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != IGNORE_INDEX).collect();
        if rows.is_empty() {
            continue;
        }
        let picked = h.select(ndarray::Axis(0), &rows);
        let (logits, _) = model.mlm_head_rows(&picked)?;
        for (r, &j) in rows.iter().enumerate() {
            let row = logits.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("vocab is non-empty");
            hits += usize::from(best as i64 == labels[j]);
            total += 1;
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// MLM pretraining with AdamW. Each epoch visits the corpus in a fresh
/// seeded order; every batch draws its own masking and dropout streams.
/// Validation accuracy is measured on one fixed masking of `validation`.
pub fn pretrain(
    model: &mut EncoderModel,
    corpus: &[TokenizedSequence],
    validation: &[TokenizedSequence],
    config: &PretrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    let started = Instant::now();
    let vocab = model.config().vocab_size;
    let mut pairs = model.config().to_pairs();
    pairs.extend(config.to_pairs());
    let mut log = TrainLog::new(seed, pairs);
    let mut opt = Adam::new(AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::adamw(config.lr)
    });
    let val_batch = if validation.is_empty() {
        None
    } else {
        let mut rng = substream(seed, "pretrain/validation-mask");
        Some(mask_tokens(validation, config.mask_prob, config.strategy, vocab, &mut rng)?)
    };

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut substream(seed, &format!("pretrain/shuffle/{epoch}")));
        let (mut weighted, mut targets) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TokenizedSequence> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mut mask_rng = substream(seed, &format!("masking/{epoch}/{b}"));
            let masked = mask_tokens(&batch, config.mask_prob, config.strategy, vocab, &mut mask_rng)?;
            model.zero_grad();
            let mut drop_rng = substream(seed, &format!("pretrain/dropout/{epoch}/{b}"));
            let step = model.mlm_forward_backward(&masked.sequences(), &masked.labels, Some(&mut drop_rng))?;
            if step.targets == 0 {
                continue;
            }
            finite(step.loss, &format!("at epoch {epoch}, batch {b}"))?;
            opt.step(model, &|_| true);
            weighted += step.loss * step.targets as f64;
            targets += step.targets;
        }
        if targets == 0 {
            log::warn!("epoch {epoch} had no masked positions");
        }
        let loss = if targets == 0 { 0.0 } else { weighted / targets as f64 };
        let val_acc = match &val_batch {
            Some(vb) => masked_accuracy(model, vb)?,
            None => None,
        };
        log::info!("pretrain epoch {epoch}: loss {loss:.6}");
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            val_acc,
        });
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Repeated optimizer steps on one pre-masked batch. Returns the loss seen
/// before each update.
pub fn fit_fixed_batch(
    model: &mut EncoderModel,
    batch: &MlmBatch,
    optimizer: AdamConfig,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(optimizer);
    let seqs = batch.sequences();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        model.zero_grad();
        let mut drop_rng = substream(seed, &format!("fixed-batch/dropout/{step}"));
        let out = model.mlm_forward_backward(&seqs, &batch.labels, Some(&mut drop_rng))?;
        losses.push(finite(out.loss, &format!("at step {step}"))?);
        opt.step(model, &|_| true);
    }
    Ok(losses)
}
