//! Joint lyrics translation and lyrics-melody alignment.
//!
//! A transformer encoder-decoder translates lyrics while an adaptive
//! grouping head decides, token by token, how many melody notes each
//! translated token is sung on.

pub mod alignment;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod training;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
