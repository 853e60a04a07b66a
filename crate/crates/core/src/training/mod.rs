//! MLM pretraining and supervised fine-tuning of the hybrid classifier.

mod hybrid;
mod masking;
mod optim;
mod pretrain;

pub use hybrid::{
    build_hybrid, finetune, ClassifierHead, FinetuneConfig, FinetuneOutcome, HybridModel,
    LabeledSequence, SweepResult, HEAD_HIDDEN,
};
pub use masking::{eligible, mask_tokens, MaskStrategy, MlmBatch};
pub use optim::{Adam, AdamConfig};
pub use pretrain::{fit_fixed_batch, mlm_loss, pretrain, MlmLoss, PretrainConfig};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::nn::Module;

/// Which encoder blocks train during fine-tuning. Embeddings never do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    AllFrozen,
    LastN(usize),
    AllUnfrozen,
}

impl FreezePolicy {
    /// Number of top blocks that train.
    pub fn trainable_layers(self, n_layers: usize) -> usize {
        match self {
            FreezePolicy::AllFrozen => 0,
            FreezePolicy::LastN(n) => n.min(n_layers),
            FreezePolicy::AllUnfrozen => n_layers,
        }
    }

    pub fn validate(self, n_layers: usize) -> Result<()> {
        match self {
            FreezePolicy::LastN(n) if n == 0 || n > n_layers => Err(Error::Config(format!(
                "freeze policy last-{n} needs 1..={n_layers} trainable blocks"
            ))),
            _ => Ok(()),
        }
    }

    /// Whether the tensor `name` of a hybrid model receives updates.
    pub fn is_trainable(self, name: &str, n_layers: usize) -> bool {
        if name.starts_with("head.") {
            return true;
        }
        let Some(rest) = name.strip_prefix("encoder.layer.") else {
            return false;
        };
        let layer: usize = rest
            .split('.')
            .next()
            .and_then(|i| i.parse().ok())
            .unwrap_or(usize::MAX);
        layer < n_layers && layer >= n_layers - self.trainable_layers(n_layers)
    }
}

impl std::fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FreezePolicy::AllFrozen => write!(f, "all-frozen"),
            FreezePolicy::LastN(n) => write!(f, "last-{n}"),
            FreezePolicy::AllUnfrozen => write!(f, "all-unfrozen"),
        }
    }
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;

    /// Accepts `all-frozen`, `last-<n>`, `half` (last 3) and `all-unfrozen`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-frozen" => Ok(Self::AllFrozen),
            "all-unfrozen" => Ok(Self::AllUnfrozen),
            "half" => Ok(Self::LastN(3)),
            other => other
                .strip_prefix("last-")
                .and_then(|n| n.parse().ok())
                .map(Self::LastN)
                .ok_or_else(|| Error::Config(format!("unknown freeze policy {other:?}"))),
        }
    }
}

/// Trainable parameter count. `freeze = None` is pretraining (everything,
/// MLM head included); otherwise the encoder's MLM head is not counted.
pub fn count_trainable(
    model: &EncoderModel,
    freeze: Option<FreezePolicy>,
    head: Option<&ClassifierHead>,
) -> usize {
    let n_layers = model.config().n_layers;
    let mut total = 0;
    model.visit("", &mut |t| {
        let counted = match freeze {
            None => true,
            Some(p) => p.is_trainable(t.name, n_layers),
        };
        if counted {
            total += t.value.len();
        }
    });
    total + head.map_or(0, |h| h.num_parameters())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
}

/// Per-epoch loss series plus the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
    /// Kept out of serialized output so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn new(seed: u64, config: Vec<(String, String)>) -> Self {
        Self {
            seed,
            config,
            epochs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// `epoch=<i> loss=<f> val_acc=<f>` per epoch.
    pub fn to_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| {
                let acc = e.val_acc.map_or("nan".to_string(), |a| format!("{a:.6}"));
                format!("epoch={} loss={:.6} val_acc={}\n", e.epoch, e.loss, acc)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }
}

/// Trailing moving average with the given window (`n - window + 1` values).
pub fn smoothed(series: &[f64], window: usize) -> Vec<f64> {
    series
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
