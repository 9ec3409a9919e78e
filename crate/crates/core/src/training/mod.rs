//! Byte tokenizer, data pipeline, training loop and checkpoints.

mod checkpoint;
mod config;
mod data;
mod tokenizer;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::TrainConfig;
pub use data::{
    batch_sampler, load_documents, split_documents, Batch, CorpusSplits, Document, TokenStream, WindowSampler,
};
pub use tokenizer::{detokenize, tokenize_bytes, BOS, VOCAB_SIZE};
pub use trainer::{train, train_step, StepMetrics, TrainRun, TrainState};

#[cfg(test)]
mod tests;
