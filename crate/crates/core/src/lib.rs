//! Generative space-time video enhancement at desk scale.
//!
//! A frozen video diffusion prior (a small 3D-UNet with interleaved spatial
//! and temporal layers) is combined with a trainable condition branch that
//! injects low-frame-rate, low-resolution video evidence through
//! zero-initialized convolutions. Training data is manufactured by a
//! space-time augmentation pipeline (frame sliding window, spatial
//! downscaling, latent noise augmentation) and the condition branch is made
//! aware of the augmentation parameters through per-frame embedding addition
//! on key frames.
//!
//! Everything runs on CPU with explicit seeds; given the same seeds, every
//! pipeline in this crate is bit-reproducible.

pub mod augment;
pub mod autoencoder;
pub mod backbone;
pub mod config;
pub mod controlnet;
pub mod enhance;
pub mod error;
pub mod nn;
pub mod num;
pub mod plot;
pub mod repro;
pub mod rng;
pub mod schedule;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
