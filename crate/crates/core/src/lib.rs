//! Dual-branch recurrent-fusion classifier for shot-structured video.
//!
//! One branch embeds per-frame facial landmark graphs with graph attention
//! and aggregates them over time with an LSTM→GRU stack; the other embeds
//! sampled clips with a small 3D residual network. A learnable sigmoid gate
//! mixes the two embeddings, and a two-stage reduction head produces binary
//! logits. Everything runs on an in-crate reverse-mode tape so gradients
//! can be verified against finite differences end to end.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
