//! Multi-dataset co-training of a small pooled-attention video transformer
//! with an informative embedding regularizer, directed cross-dataset logit
//! projections and uncertainty-weighted per-dataset losses.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod mvit;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use autograd::{Conv3dSpec, Graph, Var};
pub use error::{Error, Result};
pub use kernels::ConvGeometry;
pub use tensor::{Real, Tensor};
