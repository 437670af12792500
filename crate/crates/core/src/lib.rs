//! Stereo endoscopic super-resolution followed by instrument segmentation.

pub mod data;
mod error;
pub mod extract;
pub mod metrics;
pub mod nn;
pub mod pam;
pub mod recon;
pub mod resize;
pub mod seg;
pub mod train;

pub use error::{Error, Result};
pub use segsr_autograd as autograd;
