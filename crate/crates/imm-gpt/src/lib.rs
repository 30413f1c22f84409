//! Character-level GPT training stack with a pluggable implicit memory
//! module: a small slot bank inside each transformer block that every
//! position writes a summary into and reads back with soft attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`element`] / [`tape`]: a reverse-mode autodiff engine over flat
//!   row-major tensors, generic over f32 (training) and f64 (verification).
//! - [`tokenizer`]: character vocabulary, encoding, and batch sampling.
//! - [`imm`]: the memory bank semantics plus a slow reference
//!   implementation used as an oracle for the fused tape kernel.
//! - [`model`]: the transformer with optional per-block memory.
//! - [`train`]: AdamW, the LR schedule, the training loop, and step timing.
//! - [`checkpoint`]: single-file model serialization.
//! - [`gradcheck`]: finite-difference verification of the whole model.
//! - [`cli`]: the command-line front end (`train`, `compare`, `gradcheck`,
//!   `sample`, `profile`).

pub mod checkpoint;
pub mod cli;
pub mod element;
pub mod gradcheck;
pub mod imm;
pub mod model;
pub mod tape;
pub mod train;
pub mod tokenizer;
pub mod threads;
