use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

use super::optim::{Adam, AdamConfig};
use super::{count_trainable, EpochRecord, FreezePolicy, TrainLog};
use crate::encoder::{
    cross_entropy, load_tensors, read_checkpoint, read_sidecar, write_checkpoint, write_sidecar,
    BackwardScope, Dtype, EncoderModel, ModelConfig, SequenceRef,
};
use crate::error::{Error, Result};
use crate::nn::{join, BiLstm, BiLstmCache, Linear, Module, TensorMut, TensorView};
use crate::rng::{substream, Rng};
use crate::tokenizer::TokenizedSequence;

pub const HEAD_HIDDEN: usize = 128;

/// Projection, Bi-LSTM over the real positions, and a linear classifier
/// on the concatenated final states.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub projection: Linear,
    pub bilstm: BiLstm,
    pub classifier: Linear,
}

#[derive(Debug, Clone)]
struct HeadCache {
    x: Array2<f64>,
    lstm: BiLstmCache,
    readout: Array2<f64>,
}

impl ClassifierHead {
    pub fn zeros(d_model: usize, hidden: usize, n_classes: usize) -> Self {
        Self {
            projection: Linear::zeros(d_model, d_model),
            bilstm: BiLstm::zeros(d_model, hidden),
            classifier: Linear::zeros(2 * hidden, n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.outputs()
    }

    /// Uniform(±1/sqrt(fan_in)) for the dense layers, the LSTM's own rule
    /// for the recurrent part.
    pub fn init(&mut self, rng: &mut Rng) {
        for layer in [&mut self.projection, &mut self.classifier] {
            let bound = 1.0 / (layer.inputs() as f64).sqrt();
            layer.weight.init_uniform(rng, bound);
            layer.bias.init_uniform(rng, bound);
        }
        self.bilstm.init(rng);
    }

    fn forward(&self, x: &Array2<f64>) -> (Array1<f64>, HeadCache) {
        let projected = self.projection.forward(x);
        let (readout, lstm) = self.bilstm.forward(&projected);
        let readout = readout.insert_axis(Axis(0));
        let logits = self.classifier.forward(&readout).row(0).to_owned();
        (
            logits,
            HeadCache {
                x: x.clone(),
                lstm,
                readout,
            },
        )
    }

    fn backward(&mut self, cache: &HeadCache, dlogits: &Array2<f64>) -> Array2<f64> {
        let d_readout = self.classifier.backward(&cache.readout, dlogits);
        let d_projected = self.bilstm.backward(&cache.lstm, &d_readout.row(0).to_owned());
        self.projection.backward(&cache.x, &d_projected)
    }
}

impl Module for ClassifierHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.projection.visit(&join(prefix, "projection"), f);
        self.bilstm.visit(&join(prefix, "bilstm"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.projection.visit_mut(&join(prefix, "projection"), f);
        self.bilstm.visit_mut(&join(prefix, "bilstm"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub tokens: TokenizedSequence,
    pub label: usize,
}

/// Encoder without its MLM head, followed by a [`ClassifierHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub encoder: EncoderModel,
    pub head: ClassifierHead,
    pub policy: FreezePolicy,
}

impl Module for HybridModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.encoder.visit(prefix, f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.encoder.visit_mut(prefix, f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Attaches a freshly initialized head to a pretrained encoder.
pub fn build_hybrid(
    mut encoder: EncoderModel,
    n_classes: usize,
    policy: FreezePolicy,
    seed: u64,
) -> Result<HybridModel> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    policy.validate(encoder.config().n_layers)?;
    encoder.detach_lm_head();
    let mut head = ClassifierHead::zeros(encoder.config().d_model, HEAD_HIDDEN, n_classes);
    head.init(&mut substream(seed, "init/head"));
    Ok(HybridModel {
        encoder,
        head,
        policy,
    })
}

fn real_rows(mask: &[u8]) -> Vec<usize> {
    (0..mask.len()).filter(|&j| mask[j] == 1).collect()
}

impl HybridModel {
    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.policy.is_trainable(name, self.encoder.config().n_layers)
    }

    pub fn num_trainable(&self) -> usize {
        count_trainable(&self.encoder, Some(self.policy), Some(&self.head))
    }

    /// `[B, n_classes]` logits in inference mode.
    pub fn logits(&self, seqs: &[SequenceRef<'_>]) -> Result<Array2<f64>> {
        let (hidden, _) = self.encoder.forward_sequences(seqs, None)?;
        let mut out = Array2::zeros((seqs.len(), self.n_classes()));
        for (i, (h, seq)) in hidden.iter().zip(seqs).enumerate() {
            let x = h.select(Axis(0), &real_rows(seq.mask));
            out.row_mut(i).assign(&self.head.forward(&x).0);
        }
        Ok(out)
    }

    pub fn predict(&self, seqs: &[SequenceRef<'_>]) -> Result<Vec<usize>> {
        let logits = self.logits(seqs)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .expect("at least two classes")
            })
            .collect())
    }

    /// Forward and backward for one batch; gradients accumulate. Returns the
    /// mean cross-entropy.
    pub fn forward_backward(&mut self, batch: &[&LabeledSequence], rng: Option<&mut Rng>) -> Result<f64> {
        let seqs: Vec<SequenceRef<'_>> = batch.iter().map(|e| SequenceRef::from(&e.tokens)).collect();
        let n_layers = self.encoder.config().n_layers;
        let trainable_layers = self.policy.trainable_layers(n_layers);
        let (hidden, cache) = self.encoder.forward_sequences(&seqs, rng)?;
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut d_hidden = Vec::with_capacity(batch.len());
        for ((h, seq), example) in hidden.iter().zip(&seqs).zip(batch) {
            if example.label >= self.n_classes() {
                return Err(Error::Input(format!(
                    "label {} outside {} classes",
                    example.label,
                    self.n_classes()
                )));
            }
            let rows = real_rows(seq.mask);
            let (logits, head_cache) = self.head.forward(&h.select(Axis(0), &rows));
            let (l, mut dlogits) = cross_entropy(&logits.insert_axis(Axis(0)), &[example.label]);
            loss += l * scale;
            dlogits *= scale;
            let dx = self.head.backward(&head_cache, &dlogits);
            if trainable_layers > 0 {
                let mut d = Array2::zeros(h.raw_dim());
                for (r, &j) in rows.iter().enumerate() {
                    d.row_mut(j).assign(&dx.row(r));
                }
                d_hidden.push(d);
            }
        }
        if trainable_layers > 0 {
            let scope = BackwardScope {
                lowest_layer: n_layers - trainable_layers,
                embeddings: false,
            };
            self.encoder.backward(&cache, &d_hidden, scope);
        }
        Ok(loss)
    }

    pub fn save(&self, path: &Path, dtype: Dtype, extra: &[(String, String)]) -> Result<()> {
        write_checkpoint(path, self, dtype)?;
        let mut pairs = self.encoder.config().to_pairs();
        pairs.push(("lm_head".into(), "false".into()));
        pairs.push(("n_classes".into(), self.n_classes().to_string()));
        pairs.push(("head_hidden".into(), self.head.bilstm.hidden().to_string()));
        pairs.push(("freeze".into(), self.policy.to_string()));
        pairs.extend(extra.iter().cloned());
        write_sidecar(path, &pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pairs = read_sidecar(path)?;
        let config = ModelConfig::from_pairs(&pairs)?;
        let field = |key: &str| {
            pairs
                .get(key)
                .ok_or_else(|| Error::Format(format!("hybrid checkpoint is missing `{key}`")))
        };
        let n_classes: usize = field("n_classes")?
            .parse()
            .map_err(|_| Error::Format("bad n_classes".into()))?;
        let hidden: usize = field("head_hidden")?
            .parse()
            .map_err(|_| Error::Format("bad head_hidden".into()))?;
        let policy: FreezePolicy = field("freeze")?.parse()?;
        let mut encoder = EncoderModel::zeroed(&config)?;
        encoder.detach_lm_head();
        let mut model = Self {
            head: ClassifierHead::zeros(config.d_model, hidden, n_classes),
            encoder,
            policy,
        };
        load_tensors(&mut model, &read_checkpoint(path)?, false)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![3e-5, 4e-3, 5e-3],
            batch_size: 8,
            epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub lr: f64,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub val_acc: f64,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: HybridModel,
    pub best_lr: f64,
    pub val_acc: f64,
    pub sweep: Vec<SweepResult>,
}

impl FinetuneOutcome {
    /// Log of the selected learning rate.
    pub fn log(&self) -> &TrainLog {
        &self
            .sweep
            .iter()
            .find(|s| s.lr == self.best_lr)
            .expect("selected rate is in the sweep")
            .log
    }
}

fn accuracy(model: &HybridModel, data: &[LabeledSequence]) -> Result<f64> {
    let seqs: Vec<SequenceRef<'_>> = data.iter().map(|e| SequenceRef::from(&e.tokens)).collect();
    let preds = model.predict(&seqs)?;
    let hits = preds.iter().zip(data).filter(|(p, e)| **p == e.label).count();
    Ok(hits as f64 / data.len() as f64)
}

fn check_labels(data: &[LabeledSequence], n_classes: usize, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput(format!("{what} set")));
    }
    if let Some(e) = data.iter().find(|e| e.label >= n_classes) {
        return Err(Error::Input(format!(
            "{what} label {} outside {n_classes} classes",
            e.label
        )));
    }
    Ok(())
}

/// Trains a copy of `initial` at every learning rate with Adam, keeping the
/// epoch with the best validation accuracy per rate, then the best rate.
/// Only tensors the freeze policy allows are updated.
pub fn finetune(
    initial: &HybridModel,
    train: &[LabeledSequence],
    val: &[LabeledSequence],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let n_classes = initial.n_classes();
    check_labels(train, n_classes, "training")?;
    check_labels(val, n_classes, "validation")?;
    if config.learning_rates.is_empty() || config.batch_size == 0 {
        return Err(Error::Parameter("need learning rates and a positive batch size".into()));
    }
    for class in 0..n_classes {
        if !train.iter().any(|e| e.label == class) {
            log::warn!("class {class} has no training examples");
        }
    }
    let n_layers = initial.encoder.config().n_layers;
    let policy = initial.policy;
    let trainable = move |name: &str| policy.is_trainable(name, n_layers);

    let mut best: Option<(HybridModel, f64, f64)> = None;
    let mut sweep = Vec::new();
    for &lr in &config.learning_rates {
        let started = Instant::now();
        let mut pairs = initial.encoder.config().to_pairs();
        pairs.extend([
            ("optimizer".to_string(), "adam".to_string()),
            ("lr".into(), format!("{lr:?}")),
            ("batch_size".into(), config.batch_size.to_string()),
            ("epochs".into(), config.epochs.to_string()),
            ("freeze".into(), policy.to_string()),
        ]);
        let mut log = TrainLog::new(seed, pairs);
        let mut model = initial.clone();
        let mut opt = Adam::new(AdamConfig::adam(lr));
        let mut kept = (model.clone(), accuracy(&model, val)?, None);
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut substream(seed, &format!("finetune/shuffle/{epoch}")));
            let (mut total, mut batches) = (0.0, 0usize);
            for (b, chunk) in order.chunks(config.batch_size).enumerate() {
                let batch: Vec<&LabeledSequence> = chunk.iter().map(|&i| &train[i]).collect();
                model.zero_grad();
                let mut drop_rng = substream(seed, &format!("finetune/dropout/{epoch}/{b}"));
                let loss = model.forward_backward(&batch, Some(&mut drop_rng))?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "fine-tuning loss became {loss} at lr {lr}, epoch {epoch}, batch {b}"
                    )));
                }
                opt.step(&mut model, &trainable);
                total += loss;
                batches += 1;
            }
            let val_acc = accuracy(&model, val)?;
            log.epochs.push(EpochRecord {
                epoch,
                loss: total / batches as f64,
                val_acc: Some(val_acc),
            });
            if kept.2.is_none() || val_acc > kept.1 {
                kept = (model.clone(), val_acc, Some(epoch));
            }
        }
        log.wall_clock_secs = started.elapsed().as_secs_f64();
        log::info!("lr {lr}: best validation accuracy {:.4}", kept.1);
        if best.as_ref().is_none_or(|b| kept.1 > b.1) {
            best = Some((kept.0, kept.1, lr));
        }
        sweep.push(SweepResult {
            lr,
            best_epoch: kept.2,
            val_acc: kept.1,
            log,
        });
    }
    let (model, val_acc, best_lr) = best.expect("at least one learning rate");
    Ok(FinetuneOutcome {
        model,
        best_lr,
        val_acc,
        sweep,
    })
}
