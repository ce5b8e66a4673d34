//! Anchor-based neural Gaussian splatting: sparse anchors spawn view-adaptive
//! Gaussians through small MLP decoders, rendered by a differentiable tile
//! rasterizer and trained end to end.

pub mod config;
pub mod decoders;
pub mod error;
pub mod gaussgen;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod rasterizer;
pub mod scaffold;
pub mod scene_io;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
