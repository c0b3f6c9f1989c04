//! Token-wise adaptive multi-modal prompt learning on a frozen miniature
//! dual encoder.

pub mod clip_head;
pub mod encoders;
pub mod error;
pub mod eval_harness;
pub mod image_adapter;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
