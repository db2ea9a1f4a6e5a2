//! Prompt learning through a next-sentence-prediction head.
//!
//! A small BERT-style encoder is pre-trained on MLM and NSP, then every
//! classification task is phrased as "does sentence B follow sentence A":
//! each candidate label becomes a templated second sentence and the NSP
//! head's IsNext probability scores it.

pub mod checkpoint;
pub mod corpus;
pub mod data;
mod error;
pub mod harness;
pub mod model;
pub mod pretrain;
pub mod prompting;
pub mod scoring;
pub mod tokenizer;
pub mod tuning;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{Batch, Bound, EncoderConfig, EncoderModel, Preset};
pub use tokenizer::{EncodedPair, Vocab};
