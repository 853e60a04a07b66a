//! ECG signals as a synthetic language: signal conversion, BPE
//! tokenization, a transformer encoder pretrained with masked language
//! modelling, and hybrid encoder + Bi-LSTM classifiers for downstream tasks.

pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod quantizer;
pub mod rng;
pub mod signal;
pub mod tasks;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
