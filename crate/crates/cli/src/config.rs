//! `section.key = value` pipeline configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use heartbert_core::encoder::ModelConfig;
use heartbert_core::quantizer::{Alphabet, LloydMaxConfig};
use heartbert_core::rng::sha256_hex;
use heartbert_core::signal::MAX_WINDOW_LEN;
use heartbert_core::tasks::{SynthProfile, Task, DEFAULT_RATIOS};
use heartbert_core::tokenizer::NUM_SPECIALS;
use heartbert_core::training::{FinetuneConfig, FreezePolicy, MaskStrategy, PretrainConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {} not found", .0.display())]
    Missing(PathBuf),
    #[error("cannot read config {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("duplicate config key `{0}`")]
    Duplicate(String),
    #[error("{key}: {msg}")]
    Field { key: String, msg: String },
}

fn field(key: &str, msg: impl Display) -> ConfigError {
    ConfigError::Field {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub work_dir: PathBuf,
    /// Raw records, beat annotations (`.ann`) and sleep epochs (`.sleep`).
    pub input: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSection {
    pub task: Task,
    pub per_class: Option<usize>,
    pub ratios: (f64, f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub max_window: usize,
    pub quantizer: LloydMaxConfig,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// `vocab_size` and `max_positions` follow the tokenizer section.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub val_fraction: f64,
    pub finetune: FinetuneConfig,
    pub freeze: FreezePolicy,
    pub task: TaskSection,
    pub synth: SynthProfile,
    pub sleep_epochs: usize,
    /// Keys set explicitly, in file order after overrides.
    pub overrides: Vec<(String, String)>,
}

struct Entries {
    map: BTreeMap<String, String>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| field(key, format!("cannot parse {raw:?}: {e}"))),
        }
    }

    fn take_list(&mut self, key: &str, default: Vec<f64>) -> Result<Vec<f64>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| field(key, format!("cannot parse {v:?}: {e}")))
                })
                .collect(),
        }
    }
}

/// Reads `key = value` lines. `#` starts a comment line.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            msg: format!("expected `section.key = value`, got {line:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(ConfigError::Duplicate(k.to_string()));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_entries(Vec::new()).expect("defaults are valid")
    }
}

impl PipelineConfig {
    /// Loads a config file; `None` gives the defaults. `overrides` are
    /// `key=value` strings applied on top of the file.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut entries = match path {
            None => Vec::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| {
                    if source.kind() == std::io::ErrorKind::NotFound {
                        ConfigError::Missing(p.to_path_buf())
                    } else {
                        ConfigError::Io {
                            path: p.to_path_buf(),
                            source,
                        }
                    }
                })?;
                parse_entries(&text)?
            }
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                msg: format!("override {o:?} is not key=value"),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            entries.retain(|(seen, _)| *seen != k);
            entries.push((k, v));
        }
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(String, String)>) -> Result<Self, ConfigError> {
        let overrides = entries.clone();
        let mut e = Entries {
            map: entries.into_iter().collect(),
        };
        let model_default = ModelConfig::default();
        let pre_default = PretrainConfig::default();
        let ft_default = FinetuneConfig::default();
        let synth_default = SynthProfile::default();
        let lm_default = LloydMaxConfig::default();

        let seed = e.take("seed", 0u64)?;
        let work_dir: PathBuf = e.take("paths.work_dir", PathBuf::from("."))?;
        let input = e.take("paths.input", work_dir.join("raw"))?;
        let max_window = e.take("signal.max_window", MAX_WINDOW_LEN)?;

        let quantizer = LloydMaxConfig {
            levels: e.take("quantizer.levels", lm_default.levels)?,
            tol: e.take("quantizer.tol", lm_default.tol)?,
            max_iter: e.take("quantizer.max_iter", lm_default.max_iter)?,
            max_samples: e.take("quantizer.max_samples", lm_default.max_samples)?,
            seed,
        };
        let vocab_size = e.take("tokenizer.vocab_size", model_default.vocab_size)?;
        let max_seq_len = e.take("tokenizer.max_seq_len", model_default.max_seq_len())?;

        let mask_prob = e.take("pretrain.mask_prob", pre_default.mask_prob)?;
        let model = ModelConfig {
            n_layers: e.take("model.n_layers", model_default.n_layers)?,
            n_heads: e.take("model.n_heads", model_default.n_heads)?,
            d_model: e.take("model.d_model", model_default.d_model)?,
            d_ff: e.take("model.d_ff", model_default.d_ff)?,
            dropout: e.take("model.dropout", model_default.dropout)?,
            tie_lm_head: e.take("model.tie_lm_head", model_default.tie_lm_head)?,
            layer_norm_eps: e.take("model.layer_norm_eps", model_default.layer_norm_eps)?,
            vocab_size,
            max_positions: max_seq_len + 2,
            mask_prob,
            ..model_default
        };
        let strategy: MaskStrategy = e.take("pretrain.strategy", pre_default.strategy)?;
        let pretrain = PretrainConfig {
            lr: e.take("pretrain.lr", pre_default.lr)?,
            batch_size: e.take("pretrain.batch_size", pre_default.batch_size)?,
            epochs: e.take("pretrain.epochs", pre_default.epochs)?,
            weight_decay: e.take("pretrain.weight_decay", pre_default.weight_decay)?,
            mask_prob,
            strategy,
        };
        let val_fraction = e.take("pretrain.val_fraction", 0.0f64)?;
        let finetune = FinetuneConfig {
            learning_rates: e.take_list("finetune.learning_rates", ft_default.learning_rates)?,
            batch_size: e.take("finetune.batch_size", ft_default.batch_size)?,
            epochs: e.take("finetune.epochs", ft_default.epochs)?,
        };
        let freeze: FreezePolicy = e.take("finetune.freeze", FreezePolicy::AllFrozen)?;

        let per_class = match e.take("task.per_class", 0usize)? {
            0 => None,
            n => Some(n),
        };
        let ratio_list = e.take_list(
            "task.ratios",
            vec![DEFAULT_RATIOS.0, DEFAULT_RATIOS.1, DEFAULT_RATIOS.2],
        )?;
        let task = TaskSection {
            task: e.take("task.name", Task::Heartbeat4)?,
            per_class,
            ratios: match ratio_list[..] {
                [a, b, c] => (a, b, c),
                _ => return Err(field("task.ratios", "expected three comma-separated values")),
            },
        };
        let synth = SynthProfile {
            n_records: e.take("synth.n_records", synth_default.n_records)?,
            rate_hz: e.take("synth.rate_hz", synth_default.rate_hz)?,
            duration_secs: e.take("synth.duration_secs", synth_default.duration_secs)?,
            base_freq_hz: e.take("synth.base_freq_hz", synth_default.base_freq_hz)?,
            noise: e.take("synth.noise", synth_default.noise)?,
            rr_jitter: e.take("synth.rr_jitter", synth_default.rr_jitter)?,
            n_classes: e.take("synth.n_classes", synth_default.n_classes)?,
            seed,
        };
        let sleep_epochs = e.take("synth.sleep_epochs", 60usize)?;

        if let Some(key) = e.map.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        let cfg = Self {
            seed,
            paths: Paths { work_dir, input },
            max_window,
            quantizer,
            vocab_size,
            max_seq_len,
            model,
            pretrain,
            val_fraction,
            finetune,
            freeze,
            task,
            synth,
            sleep_epochs,
            overrides,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.max_window == 0 || self.max_window > MAX_WINDOW_LEN {
            return Err(field("signal.max_window", format!("must be in 1..={MAX_WINDOW_LEN}")));
        }
        Alphabet::with_levels(self.quantizer.levels).map_err(|e| field("quantizer.levels", e))?;
        if !(self.quantizer.tol >= 0.0) {
            return Err(field("quantizer.tol", "must be non-negative"));
        }
        if self.quantizer.max_iter == 0 || self.quantizer.max_samples == 0 {
            return Err(field("quantizer.max_iter", "iteration and sample limits must be positive"));
        }
        if self.vocab_size < NUM_SPECIALS + self.quantizer.levels {
            return Err(field(
                "tokenizer.vocab_size",
                format!(
                    "{} cannot hold {NUM_SPECIALS} specials plus {} symbols",
                    self.vocab_size, self.quantizer.levels
                ),
            ));
        }
        if self.max_seq_len < 3 {
            return Err(field("tokenizer.max_seq_len", "must be at least 3"));
        }
        let m = &self.model;
        if m.n_heads == 0 || !m.d_model.is_multiple_of(m.n_heads) {
            return Err(field(
                "model.n_heads",
                format!("d_model {} is not divisible by n_heads {}", m.d_model, m.n_heads),
            ));
        }
        m.validate().map_err(|e| field("model", e))?;
        if self.pretrain.batch_size == 0 {
            return Err(field("pretrain.batch_size", "must be positive"));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(field("pretrain.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(field("pretrain.val_fraction", "must be in [0, 1)"));
        }
        if self.finetune.learning_rates.is_empty() || self.finetune.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
            return Err(field("finetune.learning_rates", "need at least one positive rate"));
        }
        if self.finetune.batch_size == 0 {
            return Err(field("finetune.batch_size", "must be positive"));
        }
        self.freeze
            .validate(m.n_layers)
            .map_err(|e| field("finetune.freeze", e))?;
        let (a, b, c) = self.task.ratios;
        if a <= 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(field("task.ratios", "must be non-negative and sum to 1"));
        }
        if self.synth.n_records == 0 || !(self.synth.duration_secs > 0.0) {
            return Err(field("synth.n_records", "need at least one record of positive duration"));
        }
        if !(1..=4).contains(&self.synth.n_classes) {
            return Err(field("synth.n_classes", "must be in 1..=4"));
        }
        Ok(())
    }

    /// Resolved configuration as sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        let m = &self.model;
        let p = &self.pretrain;
        let f = &self.finetune;
        let s = &self.synth;
        let q = &self.quantizer;
        let rates: Vec<String> = f.learning_rates.iter().map(|r| format!("{r:?}")).collect();
        let (a, b, c) = self.task.ratios;
        let mut lines = vec![
            format!("seed={}", self.seed),
            format!("signal.max_window={}", self.max_window),
            format!("quantizer.levels={}", q.levels),
            format!("quantizer.tol={:?}", q.tol),
            format!("quantizer.max_iter={}", q.max_iter),
            format!("quantizer.max_samples={}", q.max_samples),
            format!("tokenizer.vocab_size={}", self.vocab_size),
            format!("tokenizer.max_seq_len={}", self.max_seq_len),
            format!("model.n_layers={}", m.n_layers),
            format!("model.n_heads={}", m.n_heads),
            format!("model.d_model={}", m.d_model),
            format!("model.d_ff={}", m.d_ff),
            format!("model.dropout={:?}", m.dropout),
            format!("model.tie_lm_head={}", m.tie_lm_head),
            format!("model.layer_norm_eps={:?}", m.layer_norm_eps),
            format!("pretrain.lr={:?}", p.lr),
            format!("pretrain.batch_size={}", p.batch_size),
            format!("pretrain.epochs={}", p.epochs),
            format!("pretrain.mask_prob={:?}", p.mask_prob),
            format!("pretrain.strategy={}", p.strategy),
            format!("pretrain.weight_decay={:?}", p.weight_decay),
            format!("pretrain.val_fraction={:?}", self.val_fraction),
            format!("finetune.learning_rates={}", rates.join(",")),
            format!("finetune.batch_size={}", f.batch_size),
            format!("finetune.epochs={}", f.epochs),
            format!("finetune.freeze={}", self.freeze),
            format!("task.name={}", self.task.task),
            format!("task.per_class={}", self.task.per_class.unwrap_or(0)),
            format!("task.ratios={a:?},{b:?},{c:?}"),
            format!("synth.n_records={}", s.n_records),
            format!("synth.rate_hz={:?}", s.rate_hz),
            format!("synth.duration_secs={:?}", s.duration_secs),
            format!("synth.base_freq_hz={:?}", s.base_freq_hz),
            format!("synth.noise={:?}", s.noise),
            format!("synth.rr_jitter={:?}", s.rr_jitter),
            format!("synth.n_classes={}", s.n_classes),
            format!("synth.sleep_epochs={}", self.sleep_epochs),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Hash of the resolved settings. Paths are excluded so that the same
    /// run in another directory carries the same hash.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    /// Model settings with the vocabulary of an actual tokenizer.
    pub fn model_for_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            ..self.model.clone()
        }
    }
}
