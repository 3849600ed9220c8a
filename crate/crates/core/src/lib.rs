//! Multi-LoRA transformer inference with shared KV caches.
//!
//! Agents built on one frozen backbone with per-agent LoRA adapters can share
//! most of their key/value cache: keys and the base value projection are
//! shared, and the adapter contribution is kept as a rank-`r` cache that is
//! expanded inside attention. This crate provides the building blocks
//! (matrices, adapters, the blocked low-rank attention kernel, the
//! scheme-aware cache store), a small decoder that runs multi-agent traces
//! under each caching scheme with exact MAC accounting, and the similarity
//! analysis that motivates the split.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below name the common instantiations.

pub mod analysis;
pub mod attention;
pub mod container;
pub mod engine;
pub mod error;
pub mod kvcache;
pub mod linalg;
pub mod lora;
pub mod scalar;
pub mod traces;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type LoraAdapter64 = lora::LoraAdapter<f64>;
pub type LoraAdapter32 = lora::LoraAdapter<f32>;
pub type MultiLoraSet64 = lora::MultiLoraSet<f64>;
pub type MultiLoraSet32 = lora::MultiLoraSet<f32>;

pub type KvStore64 = kvcache::KvStore<f64>;
pub type KvStore32 = kvcache::KvStore<f32>;
pub type Model64 = engine::Model<f64>;
pub type Model32 = engine::Model<f32>;
