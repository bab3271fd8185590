//! Masked visual modeling pretraining with learned hard-patch mining.
//!
//! A teacher network predicts per-patch reconstruction difficulty, an
//! easy-to-hard scheduler turns those predictions into masks, and a student
//! is trained jointly on reconstruction and a pairwise loss-ranking
//! objective. Everything runs on a small double-precision tensor core with
//! reverse-mode differentiation; no GPU, no external ML runtime.

pub mod commands;
pub mod config;
pub mod eval;
pub mod dataio;
pub mod diffmath;
pub mod engine;
pub mod error;
pub mod model;
pub mod patchkit;

pub use error::{HpmError, Result};
