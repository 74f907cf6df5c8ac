//! Visual cloze completion (VCC) for video anomaly detection.
//!
//! The crate covers the whole pipeline: video-event extraction from
//! appearance and motion cues, spatio-temporal cube construction, visual
//! cloze tests, completion networks (UNet and ST-UNet), ensemble scoring,
//! and frame/pixel-level evaluation. Everything runs on the CPU and is
//! deterministic for a fixed seed.

pub mod adapters;
pub mod array_file;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod image_ops;
pub mod nn;
pub mod pipeline;
pub mod roi;
pub mod scoring;
pub mod stages;
pub mod training;
pub mod vct;

pub use error::{Result, VccError};
