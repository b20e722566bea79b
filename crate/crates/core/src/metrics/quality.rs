use crate::error::ImageError;

use super::{luma, PlanarImage};

const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;

fn check_planes(a: &[f64], b: &[f64], w: usize, h: usize, shave: usize) -> Result<(usize, usize), ImageError> {
    if a.len() != w * h || b.len() != w * h {
        return Err(ImageError::Format(format!(
            "plane sizes {} and {} do not match {w}x{h}",
            a.len(),
            b.len()
        )));
    }
    if 2 * shave >= w.min(h) {
        return Err(ImageError::Format(format!("shave {shave} too large for {w}x{h}")));
    }
    Ok((w - 2 * shave, h - 2 * shave))
}

fn inner(p: &[f64], w: usize, shave: usize, iw: usize, ih: usize) -> Vec<f64> {
    (0..ih)
        .flat_map(|y| p[(y + shave) * w + shave..(y + shave) * w + shave + iw].iter().copied())
        .collect()
}

/// PSNR in dB over two `w × h` planes on a 0..255 scale after removing a
/// `shave`-pixel border. Identical planes give `f64::INFINITY`.
pub fn psnr_planes(a: &[f64], b: &[f64], w: usize, h: usize, shave: usize) -> Result<f64, ImageError> {
    let (iw, ih) = check_planes(a, b, w, h, shave)?;
    let (a, b) = (inner(a, w, shave, iw, ih), inner(b, w, shave, iw, ih));
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (iw * ih) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (L * L / mse).log10())
}

fn same_dims(a: &PlanarImage, b: &PlanarImage) -> Result<(), ImageError> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(ImageError::Format(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// PSNR on the luma channel.
pub fn psnr_y(a: &PlanarImage, b: &PlanarImage, shave: usize) -> Result<f64, ImageError> {
    same_dims(a, b)?;
    psnr_planes(&luma(a)?, &luma(b)?, a.width, a.height, shave)
}

/// Normalized 11-tap Gaussian with σ = 1.5.
pub fn gaussian_window() -> [f64; WIN] {
    let mut g = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter, keeping only fully covered positions.
fn filter_valid(p: &[f64], w: usize, h: usize, g: &[f64; WIN]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - WIN, h + 1 - WIN);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..WIN).map(|k| g[k] * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|k| g[k] * horiz[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM over two planes on a 0..255 scale: 11×11 Gaussian
/// window (σ 1.5), K1 0.01, K2 0.03, averaged over valid positions.
pub fn ssim_planes(a: &[f64], b: &[f64], w: usize, h: usize, shave: usize) -> Result<f64, ImageError> {
    let (iw, ih) = check_planes(a, b, w, h, shave)?;
    if iw < WIN || ih < WIN {
        return Err(ImageError::Format(format!("{iw}x{ih} is smaller than the {WIN}x{WIN} window")));
    }
    let (a, b) = (inner(a, w, shave, iw, ih), inner(b, w, shave, iw, ih));
    let g = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, ow, oh) = filter_valid(&a, iw, ih, &g);
    let (mu_b, _, _) = filter_valid(&b, iw, ih, &g);
    let (e_aa, _, _) = filter_valid(&prod(&a, &a), iw, ih, &g);
    let (e_bb, _, _) = filter_valid(&prod(&b, &b), iw, ih, &g);
    let (e_ab, _, _) = filter_valid(&prod(&a, &b), iw, ih, &g);
    let c1 = (K1 * L).powi(2);
    let c2 = (K2 * L).powi(2);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / (ow * oh) as f64)
}

/// SSIM on the luma channel.
pub fn ssim_y(a: &PlanarImage, b: &PlanarImage, shave: usize) -> Result<f64, ImageError> {
    same_dims(a, b)?;
    ssim_planes(&luma(a)?, &luma(b)?, a.width, a.height, shave)
}
