//! Desk-scale multimodal fake-news detection: toy modality encoders,
//! proxy-anchor metric learning, cross-modal tri-transformer fusion, and a
//! deterministic training/evaluation/ablation harness over synthetic
//! feature datasets.
//!
//! Everything is exact-gradient f64 on an explicit tape; no GPU, no
//! pretrained weights, no external numerics.

pub mod config;
pub mod data;
pub mod detector;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metric;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{CromeError, Result};
pub use model::model_gradcheck;
