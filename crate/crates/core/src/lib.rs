//! Dual-energy sparse-view CT reconstruction at desk scale.
//!
//! The pipeline: synthesize two-channel (H/L energy) phantoms, forward-project
//! them with a fan-beam Siddon projector, subsample views, and reconstruct the
//! missing data with a dual-domain (projection + wavelet) score-based diffusion
//! sampler whose prior is informed by virtual-mask cross-energy perturbation.
//!
//! Channel convention everywhere: channel 0 is the H-energy image/sinogram,
//! channel 1 the L-energy one. Six-channel tensors produced by [`vct::vct`]
//! are ordered `[H, L, HL, L, H, LH]`.

pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod scorenet;
pub mod tensor;
pub mod vct;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorKind};
