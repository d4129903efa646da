//! Reference-guided accelerated MRI reconstruction with a texture
//! transformer module.
//!
//! The crate covers the whole pipeline: simulated Cartesian under-sampling
//! ([`kspace`]), cross-attention texture transfer from a fully-sampled
//! reference ([`ttm`]), a cascaded data-consistent reconstruction backbone
//! ([`backbone`]), synthetic phantom data with mutual-information reference
//! matching ([`data`]), PSNR/SSIM evaluation ([`metrics`]) and the training
//! protocol ([`train`]).

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kspace;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod train;
pub mod ttm;

pub use error::{Error, Result};
