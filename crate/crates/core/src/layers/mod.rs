//! Forward and backward kernels for every layer kind in the network.
//!
//! Backward passes are written by hand. Each forward call stashes what its
//! backward needs in a [`LayerCache`]; the backward call consumes it, so a
//! second backward without a fresh forward is a state error.

mod activation;
mod conv;
mod dropout;
mod linear;
mod pool;

pub use activation::{relu_backward, relu_forward};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_extent};
pub use dropout::{dropout_backward, dropout_forward};
pub use linear::{fc_backward, fc_forward};
pub use pool::{
    avgpool_backward, avgpool_forward, maxpool_backward, maxpool_forward, pool_output_extent,
};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Train or test behaviour for dropout and auxiliary branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Test,
}

/// Trainable parameters of one conv or fully connected layer.
///
/// Conv weights are `[out_ch, in_ch, k, k]`, fc weights `[out, in]`; the bias
/// is `[out]` in both cases.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 && weights.rank() != 4 {
            bail!(Shape, "weights must be rank 2 or 4, got {:?}", weights.shape());
        }
        if bias.rank() != 1 || bias.shape()[0] != weights.shape()[0] {
            bail!(
                Shape,
                "bias {:?} does not match weights {:?}",
                bias.shape(),
                weights.shape()
            );
        }
        Ok(LayerParams { weights, bias })
    }

    pub fn zeros_like(&self) -> LayerParams {
        LayerParams {
            weights: Tensor::zeros(self.weights.shape()).unwrap(),
            bias: Tensor::zeros(self.bias.shape()).unwrap(),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }
}

#[derive(Debug)]
enum Stash {
    Conv {
        input: Tensor,
        out_shape: Vec<usize>,
    },
    MaxPool {
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        kernel: usize,
        stride: usize,
    },
    Relu {
        shape: Vec<usize>,
        active: Vec<bool>,
    },
    Dropout {
        shape: Vec<usize>,
        // None in test mode: backward is the identity.
        scale: Option<Vec<f64>>,
    },
    Fc {
        input: Tensor,
        in_shape: Vec<usize>,
    },
}

impl Stash {
    fn name(&self) -> &'static str {
        match self {
            Stash::Conv { .. } => "conv2d",
            Stash::MaxPool { .. } => "maxpool",
            Stash::AvgPool { .. } => "avgpool",
            Stash::Relu { .. } => "relu",
            Stash::Dropout { .. } => "dropout",
            Stash::Fc { .. } => "fc",
        }
    }
}

/// Per-call scratch holding the forward inputs, masks and indices a backward
/// pass needs. Single owner; not shareable between concurrent runs.
#[derive(Debug, Default)]
pub struct LayerCache {
    stash: Option<Stash>,
}

impl LayerCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.stash.is_none()
    }

    fn put(&mut self, stash: Stash) {
        self.stash = Some(stash);
    }

    fn take(&mut self, expected: &'static str) -> Result<Stash> {
        match self.stash.take() {
            Some(s) if s.name() == expected => Ok(s),
            Some(s) => {
                let found = s.name();
                self.stash = Some(s);
                bail!(State, "{expected} backward on a cache filled by {found} forward")
            }
            None => bail!(State, "{expected} backward without a matching forward"),
        }
    }
}

pub(crate) fn check_grad_shape(op: &str, grad: &Tensor, expected: &[usize]) -> Result<()> {
    if grad.shape() != expected {
        bail!(
            State,
            "{op} backward: gradient shape {:?} does not match forward output {expected:?}",
            grad.shape()
        );
    }
    Ok(())
}

pub(crate) fn nchw(op: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => bail!(Shape, "{op} expects [N, C, H, W] input, got {s:?}"),
    }
}
