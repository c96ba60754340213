//! Dual-domain selective-scan network for underwater image enhancement.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense NCHW arrays and a define-by-run reverse-mode tape.
//! * [`scan`] the selective state-space recurrence and its four-direction 2D layer.
//! * [`spectral`] radix-2 FFT and the amplitude/phase input channels.
//! * [`blocks`] multi-scale fusion, background-light colour fusion, encoder/decoder stages.
//! * [`network`] the U-shaped model, ablation ladder, AdamW and cosine schedule, checkpoints.
//! * [`objective`] training losses and full-reference metrics (PSNR, SSIM, FSIM).
//! * [`sim`] the underwater imaging model and a synthetic paired-data generator.
//! * [`imageio`] 8-bit PNG read/write.

pub mod blocks;
pub mod error;
pub mod imageio;
pub mod nn;
pub mod network;
pub mod objective;
pub mod scan;
pub mod sim;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, NodeId, Tensor};
