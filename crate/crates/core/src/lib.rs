//! Region-routed selective attention over a spatially tiled visual KV cache.
//!
//! Each decoding query scores mean-pooled region descriptors, keeps the TopK
//! regions per head, and attends to text, per-unit context tokens and the
//! selected regions only. Dense attention is kept alongside as the oracle.

pub mod attention;
pub mod cli;
pub mod config;
pub mod cost_model;
pub mod decode;
pub mod error;
pub mod kv_store;
pub mod layout;
pub mod numerics;
pub mod routing;
pub mod snapshot;
pub mod trainer;
pub mod verify;

pub use error::{GazeError, Result};
