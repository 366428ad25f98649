//! Image dehazing toolkit built on a minimal reverse-mode autodiff core.
//!
//! The crate layers, bottom up:
//!
//! - [`tensor`] / [`tape`] / [`gradcheck`]: dense NCHW tensors, a recorded
//!   tape for reverse-mode differentiation, and the finite-difference oracle.
//! - [`ops`]: convolution, pooling, resampling, activations, and
//!   deterministic weight initialization.
//! - [`physics`]: the atmospheric scattering model — synthesis, analytic
//!   inversion, and procedural scene generation.
//! - [`haam`] / [`mfem`]: the haze-aware attention module and the multiscale
//!   frequency enhancement module.
//! - [`backbone`]: the encoder–decoder network assembling both modules into
//!   residual blocks with selective-kernel skip fusion.
//! - [`loss`] / [`metrics`]: the training objective and PSNR/SSIM.
//! - [`trainer`]: deterministic Adam training with cosine annealing and the
//!   ablation harness.
//! - [`checkpoint`]: binary named-tensor serialization with integrity check.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod haam;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod mfem;
pub mod ops;
pub mod physics;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use tape::{Tape, ValId};
pub use tensor::{Scalar, Shape, Tensor};
