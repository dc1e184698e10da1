//! Multichannel beamforming with mask-supervised complex Gaussian mixture
//! models.
//!
//! The processing chain is STFT, block segmentation, optional mask
//! application, a beamformer (delay-and-sum, mask-based MVDR, or MVDR driven
//! by two- or three-component CGMM posteriors), optional post-masking, and
//! overlap-add resynthesis. A seeded scene simulator with oracle masks and an
//! SI-SNR evaluator are included for testing without recorded data.

pub mod beamform;
pub mod cli;
pub mod cgmm;
pub mod error;
pub mod io;
pub mod linalg;
pub mod mask;
pub mod pipeline;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
