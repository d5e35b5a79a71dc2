//! Sequence-to-sequence translation with syntactic graph-convolutional
//! encoder layers: a reverse-mode autodiff tape, BoW/CNN/BiGRU encoders with
//! gated, direction- and label-aware GCN layers on top, an attention decoder,
//! Adam training with BLEU-based model selection, and a synthetic reordering
//! task that the graph layers solve and plain recurrent encoders cannot.

pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
