//! Multimodal volumetric tumor co-segmentation.
//!
//! The crate covers the whole pipeline: the volume/mask/study data model and
//! its raw+JSON file format, preprocessing (in-plane B-spline resampling,
//! cropping, z-score and SUV normalisation), tumor-aware patch sampling and
//! geometric augmentation, modality-specific dense encoder/decoder networks
//! with a built-in reverse-mode engine, the soft dice co-segmentation loss,
//! DSC/ASSD metrics, synthetic phantoms, cross-validated training and
//! sliding-window inference.
//!
//! Numeric code is generic over [`Real`] (`f32`/`f64`); the aliases below
//! fix the common choices.

pub mod augment;
pub mod eval;
pub mod infer;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod phantom;
pub mod preprocess;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod volume;

pub use scalar::Real;
pub use tensor::Tensor;

/// Single-precision tensor used for training and inference.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision model.
pub type Model32 = network::ModelGraph<f32>;
/// Double-precision model.
pub type Model64 = network::ModelGraph<f64>;
/// Exact Dice similarity as a reduced fraction.
pub type DscRatio = num_rational::Ratio<u64>;
