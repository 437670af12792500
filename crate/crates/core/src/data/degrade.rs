use segsr_autograd::Tensor;

use crate::data::image_dims;
use crate::error::{ensure, Result};
use crate::resize::bicubic_resize;

pub fn validate_scale(scale: usize) -> Result<()> {
    ensure!(scale == 2 || scale == 4, InvalidArgument, "scale must be 2 or 4, got {scale}");
    Ok(())
}

/// Bicubic (a = −0.5), antialiased downscale of a (3, H, W) image by `scale`,
/// clamped to [0, 1].
pub fn degrade(hr: &Tensor, scale: usize) -> Result<Tensor> {
    validate_scale(scale)?;
    let (h, w) = image_dims(hr)?;
    ensure!(
        h % scale == 0 && w % scale == 0,
        InvalidArgument,
        "image is {h}x{w}, which is not divisible by scale {scale}; crop it to a multiple of {scale} first"
    );
    Ok(bicubic_resize(hr, h / scale, w / scale, true).map(|v| v.clamp(0.0, 1.0)))
}
