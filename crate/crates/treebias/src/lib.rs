//! Contextual speech recognition with tree-constrained pointer generators,
//! at desk scale.
//!
//! The crate trains small attention encoder-decoder (AED) and neural
//! transducer (RNN-T) recognizers on synthetic corpora, biases them toward
//! a per-utterance list of rare words organized as a wordpiece prefix tree,
//! and measures the effect on rare-word error rates. On top of the biasing
//! component it implements minimum (biasing) word error sequence training
//! over N-best lists and external language-model fusion with per-component
//! discounting during beam search.
//!
//! Everything runs on CPU over an in-crate reverse-mode autodiff engine
//! ([`numerics`]); no external ML runtime is involved. Start with the
//! runnable programs under `examples/` — each one demonstrates a major
//! capability end to end — or with the `treebias` binary, which drives the
//! full corpus → train → decode → score pipeline from a TOML config.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
