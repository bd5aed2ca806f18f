//! Corpus handling, checkpoints, configuration and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod experiments;

pub use checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, CheckpointState, Counters, RawCheckpoint, Record, RecordData,
};
pub use experiments::{mask_eval, probe_stats, MaskEval};
pub use config::{load_config, parse_kv, render_kv, KvMap};
pub use corpus::{
    batch_iter, detokenize, split_train_eval, synthetic_corpus, tokenize_bytes, tokenize_documents, windows,
    BatchStream, Corpus, BOS, EOS, PAD, UNK, VOCAB_SIZE,
};

#[cfg(test)]
mod tests;
