//! Pure-Rust U-shaped efficient-attention transformer for binary lesion
//! segmentation, with inter-scale context fusion on the skip connections.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod block;
pub mod data;
pub mod error;
pub mod iscf;
pub mod model;
pub mod ops;
pub mod params;
pub mod patch;
pub mod pipeline;
pub mod tensor;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ModelParams, Parameter};
pub use tensor::Tensor;
