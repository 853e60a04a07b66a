//! RoBERTa-shaped transformer encoder with a weight-tied MLM head.
//!
//! Embeddings (word + position + token type, then layer norm) feed a stack
//! of post-norm blocks: self-attention, add & norm, GELU feed-forward, add &
//! norm. Padding keys are excluded from attention. Real tokens take
//! position ids from 2 upwards; padding takes position id 1.

mod checkpoint;

pub use checkpoint::{
    load_tensors, read_checkpoint, read_sidecar, sidecar_path, tensor_digest, write_checkpoint,
    write_sidecar, Dtype,
    StoredTensor, CHECKPOINT_MAGIC,
};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    apply_mask, dropout_mask, gelu, gelu_backward, join, softmax_backward, softmax_rows,
    LayerNorm, LayerNormCache, Linear, Module, Param, Param1, Param2, TensorMut, TensorView,
};
use crate::rng::{self, Rng};
use crate::tokenizer::TokenizedSequence;

/// Position id used for padding; real tokens start right after it.
pub const PADDING_POSITION: usize = 1;
/// Label value for positions that carry no MLM target.
pub const IGNORE_INDEX: i64 = -100;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub n_token_types: usize,
    pub mask_prob: f64,
    pub dropout: f64,
    pub tie_lm_head: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 52_000,
            max_positions: 514,
            n_token_types: 1,
            mask_prob: 0.15,
            dropout: 0.1,
            tie_lm_head: true,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A two-block, width-8 model for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 32,
            vocab_size: 20,
            max_positions: 18,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer, head and width counts must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.n_token_types == 0 {
            return fail("vocab_size and n_token_types must be positive".into());
        }
        if self.max_positions < 3 {
            return fail("max_positions must cover the padding offset plus one token".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return fail(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Longest sequence (including BOS/EOS) the position table supports.
    pub fn max_seq_len(&self) -> usize {
        self.max_positions - 2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_positions".into(), self.max_positions.to_string()),
            ("n_token_types".into(), self.n_token_types.to_string()),
            ("mask_prob".into(), format!("{:?}", self.mask_prob)),
            ("dropout".into(), format!("{:?}", self.dropout)),
            ("tie_lm_head".into(), self.tie_lm_head.to_string()),
            ("layer_norm_eps".into(), format!("{:?}", self.layer_norm_eps)),
        ]
    }

    /// Reads the keys written by [`ModelConfig::to_pairs`]; other keys are
    /// left for the caller.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = pairs
                .get(key)
                .ok_or_else(|| Error::Format(format!("model config is missing `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Format(format!("model config `{key}` = {raw:?} is invalid")))
        }
        let cfg = Self {
            n_layers: get(pairs, "n_layers")?,
            n_heads: get(pairs, "n_heads")?,
            d_model: get(pairs, "d_model")?,
            d_ff: get(pairs, "d_ff")?,
            vocab_size: get(pairs, "vocab_size")?,
            max_positions: get(pairs, "max_positions")?,
            n_token_types: get(pairs, "n_token_types")?,
            mask_prob: get(pairs, "mask_prob")?,
            dropout: get(pairs, "dropout")?,
            tie_lm_head: get(pairs, "tie_lm_head")?,
            layer_norm_eps: get(pairs, "layer_norm_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Borrowed ids and attention mask of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceRef<'a> {
    pub ids: &'a [u32],
    pub mask: &'a [u8],
}

impl<'a> From<&'a TokenizedSequence> for SequenceRef<'a> {
    fn from(seq: &'a TokenizedSequence) -> Self {
        Self {
            ids: &seq.ids,
            mask: &seq.attention_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub word: Param2,
    pub position: Param2,
    pub token_type: Param2,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct EmbeddingCache {
    ids: Vec<u32>,
    positions: Vec<usize>,
    norm: LayerNormCache,
    drop: Option<Array2<f64>>,
}

impl Embeddings {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            word: Param::zeros((cfg.vocab_size, cfg.d_model)),
            position: Param::zeros((cfg.max_positions, cfg.d_model)),
            token_type: Param::zeros((cfg.n_token_types, cfg.d_model)),
            norm: LayerNorm::new(cfg.d_model, cfg.layer_norm_eps),
        }
    }

    fn forward(
        &self,
        seq: SequenceRef<'_>,
        dropout: f64,
        rng: Option<&mut Rng>,
    ) -> (Array2<f64>, EmbeddingCache) {
        let positions = position_ids(seq.mask);
        let d = self.word.value.ncols();
        let mut x = Array2::zeros((seq.ids.len(), d));
        for (j, mut row) in x.rows_mut().into_iter().enumerate() {
            row.assign(&self.word.value.row(seq.ids[j] as usize));
            row += &self.position.value.row(positions[j]);
            row += &self.token_type.value.row(0);
        }
        let (mut y, norm) = self.norm.forward(&x);
        let drop = dropout_mask(rng, y.dim(), dropout);
        apply_mask(&mut y, drop.as_ref());
        (
            y,
            EmbeddingCache {
                ids: seq.ids.to_vec(),
                positions,
                norm,
                drop,
            },
        )
    }

    fn backward(&mut self, cache: &EmbeddingCache, dy: &Array2<f64>) {
        let mut dy = dy.clone();
        apply_mask(&mut dy, cache.drop.as_ref());
        let dx = self.norm.backward(&cache.norm, &dy);
        for (j, row) in dx.rows().into_iter().enumerate() {
            let mut w = self.word.grad.row_mut(cache.ids[j] as usize);
            w += &row;
            let mut p = self.position.grad.row_mut(cache.positions[j]);
            p += &row;
        }
        let mut t = self.token_type.grad.row_mut(0);
        t += &dx.sum_axis(Axis(0));
    }
}

impl Module for Embeddings {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.word.visit(&join(prefix, "word_embeddings.weight"), f);
        self.position.visit(&join(prefix, "position_embeddings.weight"), f);
        self.token_type.visit(&join(prefix, "token_type_embeddings.weight"), f);
        self.norm.visit(&join(prefix, "layer_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.word.visit_mut(&join(prefix, "word_embeddings.weight"), f);
        self.position.visit_mut(&join(prefix, "position_embeddings.weight"), f);
        self.token_type.visit_mut(&join(prefix, "token_type_embeddings.weight"), f);
        self.norm.visit_mut(&join(prefix, "layer_norm"), f);
    }
}

/// Position ids under the padding-offset convention.
pub fn position_ids(mask: &[u8]) -> Vec<usize> {
    let mut seen = 0;
    mask.iter()
        .map(|&m| {
            if m == 1 {
                seen += 1;
                PADDING_POSITION + seen
            } else {
                PADDING_POSITION
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax output per head, before dropout.
    probs: Vec<Array2<f64>>,
    drops: Vec<Option<Array2<f64>>>,
    ctx: Array2<f64>,
}

impl SelfAttention {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            n_heads: cfg.n_heads,
        }
    }

    fn forward(
        &self,
        x: &Array2<f64>,
        key_mask: &[bool],
        dropout: f64,
        mut rng: Option<&mut Rng>,
    ) -> (Array2<f64>, AttentionCache) {
        let (steps, d) = x.dim();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut ctx = Array2::zeros((steps, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        let mut drops = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for (j, &keep) in key_mask.iter().enumerate() {
                if !keep {
                    scores.column_mut(j).fill(f64::NEG_INFINITY);
                }
            }
            softmax_rows(&mut scores);
            let drop = dropout_mask(rng.as_deref_mut(), (steps, steps), dropout);
            let mut used = scores.clone();
            apply_mask(&mut used, drop.as_ref());
            ctx.slice_mut(cols).assign(&used.dot(&v.slice(cols)));
            probs.push(scores);
            drops.push(drop);
        }
        let out = self.output.forward(&ctx);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                drops,
                ctx,
            },
        )
    }

    fn backward(&mut self, cache: &AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let (steps, d) = cache.x.dim();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.output.backward(&cache.ctx, dy);
        let mut dq = Array2::zeros((steps, d));
        let mut dk = Array2::zeros((steps, d));
        let mut dv = Array2::zeros((steps, d));
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let probs = &cache.probs[h];
            let mut used = probs.clone();
            apply_mask(&mut used, cache.drops[h].as_ref());
            let dctx_h = dctx.slice(cols);
            dv.slice_mut(cols).assign(&used.t().dot(&dctx_h));
            let mut dprobs = dctx_h.dot(&cache.v.slice(cols).t());
            apply_mask(&mut dprobs, cache.drops[h].as_ref());
            let dscores = softmax_backward(probs, &dprobs) * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.query.backward(&cache.x, &dq);
        dx += &self.key.backward(&cache.x, &dk);
        dx += &self.value.backward(&cache.x, &dv);
        dx
    }
}

impl Module for SelfAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output.dense"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output.dense"), f);
    }
}

/// One post-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attention: SelfAttention,
    pub attention_norm: LayerNorm,
    pub intermediate: Linear,
    pub output: Linear,
    pub output_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct LayerCache {
    attention: AttentionCache,
    attention_drop: Option<Array2<f64>>,
    attention_norm: LayerNormCache,
    h1: Array2<f64>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
    output_drop: Option<Array2<f64>>,
    output_norm: LayerNormCache,
}

impl EncoderLayer {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            attention: SelfAttention::zeros(cfg),
            attention_norm: LayerNorm::new(cfg.d_model, cfg.layer_norm_eps),
            intermediate: Linear::zeros(cfg.d_model, cfg.d_ff),
            output: Linear::zeros(cfg.d_ff, cfg.d_model),
            output_norm: LayerNorm::new(cfg.d_model, cfg.layer_norm_eps),
        }
    }

    fn forward(
        &self,
        x: &Array2<f64>,
        key_mask: &[bool],
        dropout: f64,
        mut rng: Option<&mut Rng>,
    ) -> (Array2<f64>, LayerCache) {
        let (mut a, attention) = self.attention.forward(x, key_mask, dropout, rng.as_deref_mut());
        let attention_drop = dropout_mask(rng.as_deref_mut(), a.dim(), dropout);
        apply_mask(&mut a, attention_drop.as_ref());
        let (h1, attention_norm) = self.attention_norm.forward(&(x + &a));
        let pre_activation = self.intermediate.forward(&h1);
        let activation = gelu(&pre_activation);
        let mut o = self.output.forward(&activation);
        let output_drop = dropout_mask(rng, o.dim(), dropout);
        apply_mask(&mut o, output_drop.as_ref());
        let (h2, output_norm) = self.output_norm.forward(&(&h1 + &o));
        (
            h2,
            LayerCache {
                attention,
                attention_drop,
                attention_norm,
                h1,
                pre_activation,
                activation,
                output_drop,
                output_norm,
            },
        )
    }

    fn backward(&mut self, cache: &LayerCache, dy: &Array2<f64>) -> Array2<f64> {
        let d_sum2 = self.output_norm.backward(&cache.output_norm, dy);
        let mut d_out = d_sum2.clone();
        apply_mask(&mut d_out, cache.output_drop.as_ref());
        let d_act = self.output.backward(&cache.activation, &d_out);
        let d_pre = gelu_backward(&cache.pre_activation, &d_act);
        let d_h1 = self.intermediate.backward(&cache.h1, &d_pre) + &d_sum2;
        let d_sum1 = self.attention_norm.backward(&cache.attention_norm, &d_h1);
        let mut d_attn = d_sum1.clone();
        apply_mask(&mut d_attn, cache.attention_drop.as_ref());
        self.attention.backward(&cache.attention, &d_attn) + &d_sum1
    }
}

impl Module for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.attention_norm.visit(&join(prefix, "attention.output.layer_norm"), f);
        self.intermediate.visit(&join(prefix, "intermediate.dense"), f);
        self.output.visit(&join(prefix, "output.dense"), f);
        self.output_norm.visit(&join(prefix, "output.layer_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.attention_norm.visit_mut(&join(prefix, "attention.output.layer_norm"), f);
        self.intermediate.visit_mut(&join(prefix, "intermediate.dense"), f);
        self.output.visit_mut(&join(prefix, "output.dense"), f);
        self.output_norm.visit_mut(&join(prefix, "output.layer_norm"), f);
    }
}

/// Dense + GELU + layer norm, then a projection onto the vocabulary that
/// reuses the word embedding matrix unless untied.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead {
    pub dense: Linear,
    pub norm: LayerNorm,
    pub bias: Param1,
    /// `[vocab, d_model]`; only present when the head is untied.
    pub decoder: Option<Param2>,
}

#[derive(Debug, Clone)]
pub struct MlmHeadCache {
    rows: Array2<f64>,
    pre_activation: Array2<f64>,
    norm: LayerNormCache,
    normed: Array2<f64>,
}

impl MlmHead {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            dense: Linear::zeros(cfg.d_model, cfg.d_model),
            norm: LayerNorm::new(cfg.d_model, cfg.layer_norm_eps),
            bias: Param::zeros(cfg.vocab_size),
            decoder: (!cfg.tie_lm_head).then(|| Param::zeros((cfg.vocab_size, cfg.d_model))),
        }
    }
}

impl Module for MlmHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.dense.visit(&join(prefix, "dense"), f);
        self.norm.visit(&join(prefix, "layer_norm"), f);
        self.bias.visit(&join(prefix, "bias"), f);
        if let Some(decoder) = &self.decoder {
            decoder.visit(&join(prefix, "decoder.weight"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.dense.visit_mut(&join(prefix, "dense"), f);
        self.norm.visit_mut(&join(prefix, "layer_norm"), f);
        self.bias.visit_mut(&join(prefix, "bias"), f);
        if let Some(decoder) = &mut self.decoder {
            decoder.visit_mut(&join(prefix, "decoder.weight"), f);
        }
    }
}

/// Per-sequence activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    embeddings: Vec<EmbeddingCache>,
    layers: Vec<Vec<LayerCache>>,
}

impl EncoderCache {
    /// Attention probabilities of `head` in `layer` for sequence `seq`.
    pub fn attention(&self, seq: usize, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[seq][layer].attention.probs[head]
    }
}

/// Which parts of the encoder receive gradients in a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardScope {
    /// Blocks with index `>= lowest_layer` are back-propagated through.
    pub lowest_layer: usize,
    /// Also reach the embeddings (only meaningful when `lowest_layer == 0`).
    pub embeddings: bool,
}

impl BackwardScope {
    pub fn full() -> Self {
        Self {
            lowest_layer: 0,
            embeddings: true,
        }
    }
}

/// Result of one MLM forward/backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmStep {
    pub loss: f64,
    pub targets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub lm_head: Option<MlmHead>,
}

impl Module for EncoderModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.embeddings.visit(&join(prefix, "embeddings"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("encoder.layer.{i}")), f);
        }
        if let Some(head) = &self.lm_head {
            head.visit(&join(prefix, "lm_head"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.embeddings.visit_mut(&join(prefix, "embeddings"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("encoder.layer.{i}")), f);
        }
        if let Some(head) = &mut self.lm_head {
            head.visit_mut(&join(prefix, "lm_head"), f);
        }
    }
}

/// Builds and initializes a model: truncated-normal(0.02) weights, unit
/// layer-norm scales, zero biases.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<EncoderModel> {
    let mut model = EncoderModel::zeroed(config)?;
    let mut rng = rng::substream(seed, "init/encoder");
    model.visit_mut("", &mut |t| init_tensor(t, &mut rng));
    Ok(model)
}

/// Weight-init rule shared by every module: layer norms keep (1, 0), other
/// `weight` tensors draw truncated normal, everything else stays zero.
pub(crate) fn init_tensor(t: TensorMut<'_>, rng: &mut Rng) {
    if t.name.contains("layer_norm") || !t.name.ends_with("weight") {
        return;
    }
    let normal = rand_distr::Normal::new(0.0, INIT_STD).expect("valid std");
    for v in t.value.iter_mut() {
        *v = loop {
            let x: f64 = rand_distr::Distribution::sample(&normal, rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        };
    }
}

impl EncoderModel {
    /// All-zero weights (unit layer-norm scales); zeroed allocations are
    /// lazily committed, so this is cheap even at full size.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            embeddings: Embeddings::zeros(config),
            layers: (0..config.n_layers).map(|_| EncoderLayer::zeros(config)).collect(),
            lm_head: Some(MlmHead::zeros(config)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Removes the MLM head (used when the encoder becomes a feature extractor).
    pub fn detach_lm_head(&mut self) -> Option<MlmHead> {
        self.lm_head.take()
    }

    fn check_input(&self, seq: SequenceRef<'_>) -> Result<()> {
        if seq.ids.len() != seq.mask.len() {
            return Err(Error::Input(format!(
                "{} ids but {} mask entries",
                seq.ids.len(),
                seq.mask.len()
            )));
        }
        if seq.ids.is_empty() {
            return Err(Error::Input("empty sequence".into()));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {id} outside vocab of {}",
                self.config.vocab_size
            )));
        }
        let real = seq.mask.iter().filter(|&&m| m == 1).count();
        if real == 0 {
            return Err(Error::Input("sequence has no unmasked tokens".into()));
        }
        if real > self.config.max_seq_len() {
            return Err(Error::Input(format!(
                "{real} tokens exceed the maximum sequence length {}",
                self.config.max_seq_len()
            )));
        }
        Ok(())
    }

    /// Forward pass over variable-length sequences. Passing `rng` enables
    /// dropout (training mode).
    pub fn forward_sequences(
        &self,
        seqs: &[SequenceRef<'_>],
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<Array2<f64>>, EncoderCache)> {
        let p = self.config.dropout;
        let mut hidden = Vec::with_capacity(seqs.len());
        let mut cache = EncoderCache {
            embeddings: Vec::with_capacity(seqs.len()),
            layers: Vec::with_capacity(seqs.len()),
        };
        for &seq in seqs {
            self.check_input(seq)?;
            let key_mask: Vec<bool> = seq.mask.iter().map(|&m| m == 1).collect();
            let (mut x, emb) = self.embeddings.forward(seq, p, rng.as_deref_mut());
            let mut layer_caches = Vec::with_capacity(self.layers.len());
            for layer in &self.layers {
                let (y, c) = layer.forward(&x, &key_mask, p, rng.as_deref_mut());
                x = y;
                layer_caches.push(c);
            }
            hidden.push(x);
            cache.embeddings.push(emb);
            cache.layers.push(layer_caches);
        }
        Ok((hidden, cache))
    }

    /// Inference forward pass over an equal-length batch: `[batch, seq, d_model]`.
    pub fn forward(&self, batch: &[TokenizedSequence]) -> Result<Array3<f64>> {
        let seqs: Vec<SequenceRef<'_>> = batch.iter().map(SequenceRef::from).collect();
        let (hidden, _) = self.forward_sequences(&seqs, None)?;
        stack(&hidden)
    }

    /// Back-propagates `d_hidden` (one `[T, d]` block per sequence).
    pub fn backward(&mut self, cache: &EncoderCache, d_hidden: &[Array2<f64>], scope: BackwardScope) {
        for (s, dy) in d_hidden.iter().enumerate() {
            let mut d = dy.clone();
            for l in (scope.lowest_layer..self.layers.len()).rev() {
                d = self.layers[l].backward(&cache.layers[s][l], &d);
            }
            if scope.lowest_layer == 0 && scope.embeddings {
                self.embeddings.backward(&cache.embeddings[s], &d);
            }
        }
    }

    /// MLM head over `[M, d_model]` rows: `[M, vocab]` logits.
    pub fn mlm_head_rows(&self, rows: &Array2<f64>) -> Result<(Array2<f64>, MlmHeadCache)> {
        let head = self
            .lm_head
            .as_ref()
            .ok_or_else(|| Error::Input("model has no MLM head".into()))?;
        let pre_activation = head.dense.forward(rows);
        let (normed, norm) = head.norm.forward(&gelu(&pre_activation));
        let decoder = head.decoder.as_ref().unwrap_or(&self.embeddings.word);
        let logits = normed.dot(&decoder.value.t()) + &head.bias.value;
        Ok((
            logits,
            MlmHeadCache {
                rows: rows.clone(),
                pre_activation,
                norm,
                normed,
            },
        ))
    }

    /// Back-propagates `dlogits` through the head (including the tied
    /// embedding matrix) and returns the gradient for the input rows.
    pub fn mlm_head_backward(&mut self, cache: &MlmHeadCache, dlogits: &Array2<f64>) -> Array2<f64> {
        let head = self.lm_head.as_mut().expect("forward succeeded, so the head exists");
        head.bias.grad += &dlogits.sum_axis(Axis(0));
        let decoder = match head.decoder.as_mut() {
            Some(d) => d,
            None => &mut self.embeddings.word,
        };
        ndarray::linalg::general_mat_mul(1.0, &dlogits.t(), &cache.normed, 1.0, &mut decoder.grad);
        let d_normed = dlogits.dot(&decoder.value);
        let d_act = head.norm.backward(&cache.norm, &d_normed);
        let d_pre = gelu_backward(&cache.pre_activation, &d_act);
        head.dense.backward(&cache.rows, &d_pre)
    }

    /// `[batch, seq, vocab]` logits for encoder output `hidden`.
    pub fn mlm_logits(&self, hidden: &Array3<f64>) -> Result<Array3<f64>> {
        let (b, t, d) = hidden.dim();
        let rows = hidden
            .to_shape((b * t, d))
            .map_err(|e| Error::Input(e.to_string()))?
            .to_owned();
        let (logits, _) = self.mlm_head_rows(&rows)?;
        let v = logits.ncols();
        logits
            .into_shape_with_order((b, t, v))
            .map_err(|e| Error::Input(e.to_string()))
    }

    /// Forward, masked cross-entropy and full backward for one MLM batch.
    /// Gradients accumulate; the caller zeroes them between steps.
    pub fn mlm_forward_backward(
        &mut self,
        seqs: &[SequenceRef<'_>],
        labels: &[Vec<i64>],
        rng: Option<&mut Rng>,
    ) -> Result<MlmStep> {
        let (hidden, cache) = self.forward_sequences(seqs, rng)?;
        let (rows, targets, index) = gather_targets(&hidden, labels, self.config.vocab_size)?;
        if targets.is_empty() {
            return Ok(MlmStep {
                loss: 0.0,
                targets: 0,
            });
        }
        let (logits, head_cache) = self.mlm_head_rows(&rows)?;
        let (loss, dlogits) = cross_entropy(&logits, &targets);
        let d_rows = self.mlm_head_backward(&head_cache, &dlogits);
        let mut d_hidden: Vec<Array2<f64>> =
            hidden.iter().map(|h| Array2::zeros(h.raw_dim())).collect();
        for (r, &(s, t)) in index.iter().enumerate() {
            d_hidden[s].row_mut(t).assign(&d_rows.row(r));
        }
        self.backward(&cache, &d_hidden, BackwardScope::full());
        Ok(MlmStep {
            loss,
            targets: targets.len(),
        })
    }

    /// Mean masked cross-entropy without touching gradients.
    pub fn mlm_loss(&self, seqs: &[SequenceRef<'_>], labels: &[Vec<i64>]) -> Result<MlmStep> {
        let (hidden, _) = self.forward_sequences(seqs, None)?;
        let (rows, targets, _) = gather_targets(&hidden, labels, self.config.vocab_size)?;
        if targets.is_empty() {
            return Ok(MlmStep {
                loss: 0.0,
                targets: 0,
            });
        }
        let (logits, _) = self.mlm_head_rows(&rows)?;
        Ok(MlmStep {
            loss: cross_entropy(&logits, &targets).0,
            targets: targets.len(),
        })
    }

    /// Writes the checkpoint and its `key=value` config sidecar.
    pub fn save(&self, path: &Path, dtype: Dtype, extra: &[(String, String)]) -> Result<()> {
        write_checkpoint(path, self, dtype)?;
        let mut pairs = self.config.to_pairs();
        pairs.push(("lm_head".into(), self.lm_head.is_some().to_string()));
        pairs.extend(extra.iter().cloned());
        checkpoint::write_sidecar(path, &pairs)
    }

    /// Loads a checkpoint written by [`EncoderModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let pairs = checkpoint::read_sidecar(path)?;
        let config = ModelConfig::from_pairs(&pairs)?;
        let mut model = Self::zeroed(&config)?;
        if pairs.get("lm_head").map(String::as_str) == Some("false") {
            model.lm_head = None;
        }
        let tensors = read_checkpoint(path)?;
        load_tensors(&mut model, &tensors, false)?;
        Ok(model)
    }
}

fn gather_targets(
    hidden: &[Array2<f64>],
    labels: &[Vec<i64>],
    vocab: usize,
) -> Result<(Array2<f64>, Vec<usize>, Vec<(usize, usize)>)> {
    if hidden.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} sequences but {} label rows",
            hidden.len(),
            labels.len()
        )));
    }
    let mut index = Vec::new();
    let mut targets = Vec::new();
    for (s, (h, row)) in hidden.iter().zip(labels).enumerate() {
        if row.len() != h.nrows() {
            return Err(Error::Input(format!(
                "sequence {s}: {} labels for {} positions",
                row.len(),
                h.nrows()
            )));
        }
        for (t, &label) in row.iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            if label < 0 || label as usize >= vocab {
                return Err(Error::Input(format!("label {label} outside vocab of {vocab}")));
            }
            index.push((s, t));
            targets.push(label as usize);
        }
    }
    let d = hidden.first().map_or(0, |h| h.ncols());
    let mut rows = Array2::zeros((index.len(), d));
    for (r, &(s, t)) in index.iter().enumerate() {
        rows.row_mut(r).assign(&hidden[s].row(t));
    }
    Ok((rows, targets, index))
}

/// Mean cross-entropy of `logits` rows against `targets`, with its gradient.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let n = targets.len() as f64;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        probs[[r, t]] -= 1.0;
    }
    probs /= n;
    (loss / n, probs)
}

/// Stacks equal-length `[T, d]` blocks into `[B, T, d]`.
pub fn stack(blocks: &[Array2<f64>]) -> Result<Array3<f64>> {
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::stack(Axis(0), &views)
        .map_err(|_| Error::Input("batch sequences must share one length".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, EOS, PAD};

    fn seq(ids: &[u32], real: usize) -> TokenizedSequence {
        TokenizedSequence {
            ids: ids.to_vec(),
            attention_mask: (0..ids.len()).map(|i| u8::from(i < real)).collect(),
            overflow: false,
        }
    }

    #[test]
    fn default_config_shape() {
        let c = ModelConfig::default();
        assert_eq!((c.n_layers, c.n_heads, c.d_model), (6, 12, 768));
        assert_eq!(c.max_seq_len(), 512);
        assert_eq!(c.head_dim(), 64);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(EncoderModel::zeroed(&bad).is_err());
        let pairs: BTreeMap<_, _> = ModelConfig::tiny().to_pairs().into_iter().collect();
        assert_eq!(ModelConfig::from_pairs(&pairs).unwrap(), ModelConfig::tiny());
    }

    #[test]
    fn position_ids_skip_padding() {
        assert_eq!(position_ids(&[1, 1, 1, 0, 0]), vec![2, 3, 4, 1, 1]);
    }

    #[test]
    fn forward_shapes_and_errors() {
        let model = build_model(&ModelConfig::tiny(), 1).unwrap();
        let batch = vec![seq(&[BOS, 7, 8, 9, 10, 11, 12, 13, 14, EOS], 10); 2];
        let out = model.forward(&batch).unwrap();
        assert_eq!(out.dim(), (2, 10, 8));
        let logits = model.mlm_logits(&out).unwrap();
        assert_eq!(logits.dim(), (2, 10, 20));

        assert!(matches!(
            model.forward(&[seq(&[BOS, 20, EOS], 3)]),
            Err(Error::Input(_))
        ));
        let too_long: Vec<u32> = (0..17).map(|i| 5 + i % 10).collect();
        assert!(model.forward(&[seq(&too_long, 17)]).is_err());
        let ragged = vec![seq(&[BOS, 5, EOS], 3), seq(&[BOS, EOS], 2)];
        assert!(model.forward(&ragged).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(&ModelConfig::tiny(), 9).unwrap();
        let b = build_model(&ModelConfig::tiny(), 9).unwrap();
        let c = build_model(&ModelConfig::tiny(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.embeddings.word.value.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        assert!(a.layers[0].attention_norm.gamma.value.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_rows_are_distributions_over_real_keys() {
        let model = build_model(&ModelConfig::tiny(), 2).unwrap();
        let s = seq(&[BOS, 5, 6, 7, EOS, PAD, PAD], 5);
        let (_, cache) = model.forward_sequences(&[SequenceRef::from(&s)], None).unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                let p = cache.attention(0, layer, head);
                for row in p.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                    assert_eq!(row[5], 0.0);
                    assert_eq!(row[6], 0.0);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array2::zeros((1, 52_000));
        let (loss, grad) = cross_entropy(&logits, &[17]);
        assert!((loss - 52_000f64.ln()).abs() < 1e-12);
        assert!((grad.sum()).abs() < 1e-12);
    }
}
