//! Local self-attention networks for image classification and segmentation,
//! post-training INT8 quantization with integer-only inference, and a static
//! parameter / operation / size / energy cost model.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod layers;
pub mod models;
mod par;
pub mod quant;
pub mod reference;
pub mod tensor;
pub mod verify;

pub use error::{ArchiveError, Error, Result};
pub use par::{current_threads, with_threads};
pub use tensor::{ElemKind, Float, Shape4, Tensor};
