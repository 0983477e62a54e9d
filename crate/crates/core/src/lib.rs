//! Unsupervised semantic segmentation kernels: a small vision transformer
//! whose last attention block is refined by ASPP with an epoch-dependent
//! dilation schedule, Segmenter-style mask decoding, CAM seeds, pixel-adaptive
//! refinement of pseudo labels and a teacher-student training loop.

pub mod aspp;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use geometry::{output_size, ConvGeometry};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
