//! A small convolutional network engine for CPU training.
//!
//! Activations are stored channel-major (`C×N×H×W`) so that every convolution
//! over a whole mini-batch is a single matrix product, and batch normalization
//! reduces over contiguous memory. Each layer records what it needs during a
//! training-mode forward pass and exposes an explicit `backward`.
//!
//! Evaluation-mode forwards take `&self` and never touch caches, so a trained
//! model can be shared across threads for feature extraction.

mod act;
mod checkpoint;
mod conv;
mod error;
mod gemm;
mod linear;
pub mod loss;
mod norm;
mod optim;
mod param;
mod pool;
mod relu;
mod resnet;

pub use act::Act;
pub use checkpoint::{read_state, write_state, StateDict};
pub use conv::Conv2d;
pub use error::{NnError, Result};
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use optim::{MultiStepLr, Sgd};
pub use param::Param;
pub use pool::{GlobalAvgPool, MaxPool2d};
pub use relu::Relu;
pub use resnet::{BasicBlock, ResNet, ResNetConfig, StemKind};

/// A feature extractor that maps a batch of images to `N×d` row-major features.
pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    fn feature_dim(&self) -> usize;

    /// Training-mode forward. Caches intermediate values for [`Backbone::backward`].
    fn forward_train(&mut self, x: &Act) -> Vec<f32>;

    /// Backpropagates `grad` (`N×d`) through the last training forward,
    /// accumulating parameter gradients.
    fn backward(&mut self, grad: &[f32]);

    /// Evaluation-mode forward using running statistics.
    fn forward_eval(&self, x: &Act) -> Vec<f32>;

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Visits every persistent tensor (parameters and running statistics) by name.
    fn visit_state(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f32>));

    fn clear_cache(&mut self);

    fn clone_box(&self) -> Box<dyn Backbone>;
}

impl Clone for Box<dyn Backbone> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Builds a backbone from a registered name.
///
/// Known names: `resnet8`, `resnet20`, `resnet32` (32×32 inputs) and `resnet18`
/// (larger inputs). `base_width` overrides the first-stage channel count.
pub fn backbone_from_name(
    name: &str,
    base_width: Option<usize>,
    seed: u64,
) -> Result<Box<dyn Backbone>> {
    let cfg = ResNetConfig::from_name(name, base_width)?;
    Ok(Box::new(ResNet::new(name, cfg, seed)))
}
