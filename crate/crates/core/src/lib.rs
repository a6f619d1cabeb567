//! Miniature BERT-style encoder with masked-LM pre-training, paraphrase
//! relation injection and a downstream fine-tuning harness.

pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod injection;
pub mod pretrain;
pub mod tokenizer;

pub use error::{Error, Result};
