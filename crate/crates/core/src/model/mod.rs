pub mod attention;
pub mod config;
pub mod layers;
pub mod seq2seq;

pub use config::{ModelConfig, Variant};
pub use seq2seq::{EncoderOutput, Model, Seq2SeqBatch, IGNORE_INDEX};
