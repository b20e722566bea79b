//! Image I/O, luma conversion, bicubic resampling and quality metrics.

mod image;
mod quality;
mod resize;

pub use image::{png_load, png_save, PlanarImage};
pub use quality::{psnr_planes, psnr_y, ssim_planes, ssim_y, gaussian_window};
pub use resize::{bicubic_resize, cubic_weights, resize_plane, resize_tensor};

/// BT.601 studio-swing luma of an RGB pixel with components in [0, 1].
pub fn rgb_to_y_pixel(r: f64, g: f64, b: f64) -> f64 {
    16.0 + 65.481 * r + 128.553 * g + 24.966 * b
}

/// Luma plane (values in [16, 235]) of an RGB image.
pub fn rgb_to_y(img: &PlanarImage) -> Result<Vec<f64>, crate::error::ImageError> {
    if img.channels != 3 {
        return Err(crate::error::ImageError::Format(format!(
            "rgb_to_y needs 3 channels, got {}",
            img.channels
        )));
    }
    Ok(img
        .data
        .chunks_exact(3)
        .map(|p| rgb_to_y_pixel(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
        .collect())
}

/// Luma for RGB images; single-channel images are taken as luma already.
pub fn luma(img: &PlanarImage) -> Result<Vec<f64>, crate::error::ImageError> {
    match img.channels {
        1 => Ok(img.data.iter().map(|&v| v as f64).collect()),
        _ => rgb_to_y(img),
    }
}
