//! Multiphase segmentation of volumetric rock images with a dual-encoder network.
//!
//! The crate covers the full path from grayscale volumes to pore-scale
//! descriptors: preprocessing, a small reverse-mode autodiff engine, the
//! network, the boundary-aware loss, two-stage training, tiled inference
//! and morphometric metrics. Synthetic phantoms provide exact ground truth.

pub mod augment;
pub mod config;
pub mod autodiff;
pub mod error;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod patches;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod volume;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use volume::{LabelVolume, Volume};
