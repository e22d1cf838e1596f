//! Siamese self-supervised representation learning on a small reverse-mode
//! autodiff core: tensors, layers, CNN/transformer backbones, the
//! projection/prediction heads with the symmetric negative-cosine loss, data
//! pipelines, and training/evaluation loops.

pub mod backbones;
pub mod data;
pub mod error;
pub mod nn;
pub mod simsiam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
