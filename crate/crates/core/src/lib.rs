//! Staged EEG-to-3D pipeline: decoding, geometry-aware reasoning,
//! text-to-image-to-mesh generation, multi-view rendering and the
//! rendering-based evaluation metrics.

pub mod align;
pub mod cache;
pub mod config;
pub mod dataset;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod providers;
pub mod reasoning;
pub mod renderer;
pub mod report;
pub mod stage;
pub mod toydiffusion;
pub mod util;
