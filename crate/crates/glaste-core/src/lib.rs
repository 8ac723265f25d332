//! Differentiable operators and a desk-scale scene-text-editing pipeline.
//!
//! The crate provides, from the bottom up:
//!
//! * [`tensor`] — dense tensors with reverse-mode automatic differentiation
//!   (conv2d, linear, activations, instance statistics, Adam);
//! * [`spectral`] — real 2-D FFT and the Fourier-domain convolution block
//!   used by the inpainting path;
//! * [`geometry`] — rotated boxes, normalized-coordinate affine maps,
//!   bilinear/grid sampling and rotated-region pooling;
//! * [`nets`] — style and content encoders, the AdaIN-conditioned text
//!   synthesizer, patch discriminators and a small CTC recognizer;
//! * [`losses`] — adversarial, joint L1, joint perceptual and CTC losses;
//! * [`data`] — a procedural generator of paired scene-text samples;
//! * [`pipeline`] — the end-to-end model, training loop and checkpointing;
//! * [`metrics`] — MSE/PSNR/SSIM and recognition accuracy / CER;
//! * [`gradcheck`] — the central-finite-difference verification suite.

pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Scalar, Tape, Tensor};

/// Deterministic RNG used throughout; one stream per (purpose, seed).
pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
