//! A small convolutional-network framework for deeply supervised residual
//! networks: hand-written layer kernels, a DAG executor with auxiliary
//! classifier heads, the shortcut-insertion rewrite, the weighted multi-head
//! loss, a gradient-vanishing probe that picks where the auxiliary head goes,
//! and an SGD trainer with crop augmentation and 10-crop evaluation.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostic;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod rng;
pub mod supervision;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
