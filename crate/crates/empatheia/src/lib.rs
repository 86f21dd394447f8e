//! Multimodal empathetic response generation at desk scale.
//!
//! The crate covers the full pipeline: corpus loading and validation,
//! chain-of-empathy prompt construction, a tiny adapter-tuned decoder-only
//! backbone with modality splicing, content/style extraction modules,
//! generator-facing contracts, staged training with freeze audits, and
//! deterministic evaluation and export tooling.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod content_sync;
pub mod data;
pub mod emotions;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod features;
pub mod generators;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod resampler;
pub mod rng;
pub mod stats;
pub mod style_disentangle;
pub mod synth;
pub mod tokenizer;
pub mod training;
