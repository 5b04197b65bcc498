//! Small, deterministic CPU building blocks for training desk-scale
//! convolutional generators: NHWC tensors, layers with explicit backward
//! passes, spectral normalization and Adam.
//!
//! Everything is single-threaded and reduces in a fixed order, so two runs
//! fed the same inputs produce bit-identical parameters.

mod conv;
mod gemm;
mod layers;
mod optim;
mod param;
mod sequential;
pub mod spectral;
mod tensor;

pub use conv::{col2im, im2col, Conv2d, ConvGeom, ConvTranspose2d};
pub use gemm::gemm;
pub use layers::{Activation, ActivationKind, BatchNorm, Dense, Reshape};
pub use optim::{Adam, AdamConfig};
pub use param::Param;
pub use sequential::Sequential;
pub use spectral::SpectralNorm;
pub use tensor::Tensor;

/// Whether a forward pass is part of training (batch statistics, power
/// iteration updates) or a frozen evaluation query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Training pass whose batch statistics come from the first `n` batch
    /// items only. Later items are normalized with those statistics and
    /// never reach the running averages.
    TrainPrefix(usize),
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// A differentiable layer holding the activations it needs for `backward`.
///
/// `backward` must follow the matching `forward`. When `param_grads` is
/// false the layer only propagates the input gradient and leaves its
/// parameter gradients untouched.
pub trait Layer: Send {
    fn name(&self) -> &str;
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor;
    fn backward(&mut self, grad: &Tensor, param_grads: bool) -> Tensor;
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}
