//! Minimal reverse-mode autodiff over `ndarray`, plus parameter storage and
//! the AdamW optimizer.
//!
//! The engine is deliberately small: a handful of fused ops (convolutions,
//! group norm, attention matmuls, softmax) recorded on an append-only tape.
//! Everything is single-threaded and deterministic; the same graph built from
//! the same inputs produces bit-identical values and gradients. Ops are
//! generic over the element type, so tests can rebuild the exact same model
//! in `f64` when checking analytic gradients against finite differences.

mod adamw;
mod params;
mod tape;

pub use adamw::{clip_global_norm, AdamW, AdamWConfig, AdamWState};
pub use params::{register_store, GraphParams, ParamStore};
pub use tape::{Grads, Graph, Var};
