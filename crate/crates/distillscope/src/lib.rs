//! Desk-scale knowledge-distillation pipeline: a dual-encoder teacher
//! (windowed global encoder plus region-aware local encoder) distilled
//! into a compact ViT student, with classification metrics and four
//! saliency methods, all on top of a small reverse-mode autograd core.

pub mod blocks;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
