//! Core engine for two-stage story generation.
//!
//! A prompt is first expanded into an outline (keywords or an extractive
//! abstract), and the outline is then expanded into a full story. Both stages
//! are causal transformer language models trained from scratch on the tensor
//! autodiff engine in [`tensor`]. The story stage carries two auxiliary
//! training signals: a discourse-relation classification head over adjacent
//! sentence pairs and a coreference supervision term on the last layer's
//! attention weights.
//!
//! The crate is `no_std`-compatible (`alloc` required): it performs no IO.
//! Corpus files, checkpoints on disk, and the command-line surface live in
//! the companion `plotforge-cli` crate. Checkpoints serialize to byte
//! buffers here; training loops report progress through callbacks.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod rng;
pub mod scalar;
pub mod outline;
pub mod tensor;
pub mod tokenizer;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};
