//! Fully point-wise convolutional networks for image statistics.
//!
//! The crate builds tiny CNNs whose convolutions are all 1×1, feeds them
//! pixel-ensembles (shuffled image blocks), and applies them to two classic
//! estimation problems: global color cast (color constancy) and per-patch
//! haze transmission (dehazing). A standalone equivalence checker validates
//! the kernel-collapse argument that justifies the architecture, and an
//! inspection toolkit re-projects neuron activations onto source images to
//! build weighted histograms of what the networks attend to.
//!
//! All numeric code is generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below fix the default double-precision instantiation.

pub mod color_constancy;
pub mod dehazing;
pub mod ensemble;
pub mod equivalence;
pub mod error;
pub mod inspect;
pub mod models;
pub mod netpbm;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default double-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default double-precision kernel.
pub type KernelWeights = nn::KernelWeights<f64>;
/// Default double-precision pixel-ensemble.
pub type PixelEnsemble = ensemble::PixelEnsemble<f64>;
/// Default double-precision parameter store.
pub type ParamStore = models::ParamStore<f64>;

/// Single-precision variants.
pub type TensorF32 = tensor::Tensor<f32>;
pub type KernelWeightsF32 = nn::KernelWeights<f32>;
