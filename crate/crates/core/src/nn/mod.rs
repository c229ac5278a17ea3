//! Dense tensors, layers with hand-written backward passes, and the residual
//! CNN used as the composer classifier.
//!
//! Layers follow a cache-then-backprop protocol: [`Layer::forward_train`]
//! stores what the backward pass needs, [`Layer::backward`] consumes the
//! upstream gradient, accumulates parameter gradients and returns the input
//! gradient. [`Layer::infer`] is the cache-free evaluation-mode path and takes
//! `&self`, so a frozen model can serve many threads.

mod checkpoint;
mod layers;
mod loss;
mod resnet;
mod scalar;
mod tensor;

pub use checkpoint::{
    decode_tensors, encode_tensors, load_checkpoint, load_meta, save_checkpoint, sidecar_path, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use layers::{
    conv2d_backward, conv2d_forward, BatchNorm2d, Conv2d, ConvGrads, GlobalAvgPool, Linear, MaxPool2d, Relu,
    BN_EPS, BN_MOMENTUM,
};
pub use loss::{cross_entropy, softmax_rows};
pub use resnet::{BasicBlock, Block, Bottleneck, Depth, ModelConfig, ResNet};
pub use scalar::{matmul, DType, Scalar};
pub use tensor::{Param, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("batch norm in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward called without a cached forward pass")]
    NoCache,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

/// A named tensor slot handed out by [`Layer::visit_mut`].
pub enum Slot<'a, T> {
    /// Trainable parameter with its gradient buffer.
    Param(&'a mut Param<T>),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut Tensor<T>),
}

pub trait Layer<T: Scalar> {
    /// Training-mode forward; caches activations for [`Layer::backward`].
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError>;

    /// Backpropagates `grad` (w.r.t. the last output), accumulating parameter
    /// gradients, and returns the gradient w.r.t. the last input.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError>;

    /// Evaluation-mode forward without caching.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError>;

    /// Visits every parameter and buffer with its dotted path.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    /// Number of trainable scalars.
    fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit_mut("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.value.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
