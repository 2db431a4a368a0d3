//! Streaming KV-cache memory engine.
//!
//! Frames are encoded with sparse sliding-window attention, their full KV
//! features are kept in a tiered per-layer store, and questions retrieve the
//! most relevant frames by internal (KV-based) scoring, external embeddings,
//! or a rank fusion of both.

pub mod analysis;
pub mod encoder;
pub mod kv_store;
pub mod numerics;
pub mod retrieval;
pub mod toy_model;
