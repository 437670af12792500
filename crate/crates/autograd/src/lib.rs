//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! walks the recorded nodes in reverse creation order. Image tensors use the
//! NCHW layout throughout.
//!
//! Everything is single-threaded and evaluation order is fixed, so repeated
//! runs on the same machine produce bit-identical values and gradients.

pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use ops::conv::ConvGeom;
pub use ops::spatial::{pixel_shuffle_tensor, pixel_unshuffle_tensor};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
