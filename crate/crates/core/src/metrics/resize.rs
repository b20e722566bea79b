use crate::error::ImageError;
use crate::tensor::{Scalar, Shape, Tensor};

use super::PlanarImage;

const A: f64 = -0.5;

fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Weights of the four taps at offsets −1, 0, 1, 2 for a sample at
/// fractional position `f` ∈ [0, 1) past tap 0.
pub fn cubic_weights(f: f64) -> [f64; 4] {
    [cubic(1.0 + f), cubic(f), cubic(1.0 - f), cubic(2.0 - f)]
}

/// Source taps and weights for every output position along one axis.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let i0 = src.floor();
            let w = cubic_weights(src - i0);
            let clamp = |k: f64| (k.max(0.0) as usize).min(n_in - 1);
            ([clamp(i0 - 1.0), clamp(i0), clamp(i0 + 1.0), clamp(i0 + 2.0)], w)
        })
        .collect()
}

/// Separable bicubic resampling of a `w × h` plane to `ow × oh`, with
/// half-pixel centres and clamped edges.
pub fn resize_plane(p: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let xt = axis_taps(w, ow);
    let yt = axis_taps(h, oh);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for (x, (idx, wt)) in xt.iter().enumerate() {
            horiz[y * ow + x] = (0..4).map(|k| wt[k] * row[idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for (y, (idx, wt)) in yt.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = (0..4).map(|k| wt[k] * horiz[idx[k] * ow + x]).sum();
        }
    }
    out
}

fn out_dim(n: usize, factor: f64) -> Result<usize, ImageError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(ImageError::Format(format!("resize factor {factor} must be positive")));
    }
    let o = (n as f64 * factor).round();
    if o < 1.0 {
        return Err(ImageError::Format(format!("resizing {n} px by {factor} leaves no pixels")));
    }
    Ok(o as usize)
}

/// Bicubic resize by `factor`; output dims are the rounded products.
pub fn bicubic_resize(img: &PlanarImage, factor: f64) -> Result<PlanarImage, ImageError> {
    let (ow, oh) = (out_dim(img.width, factor)?, out_dim(img.height, factor)?);
    let c = img.channels;
    let mut data = vec![0u8; ow * oh * c];
    for ch in 0..c {
        let plane: Vec<f64> = img.data.iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let out = resize_plane(&plane, img.width, img.height, ow, oh);
        for (i, v) in out.into_iter().enumerate() {
            data[i * c + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    PlanarImage::new(ow, oh, c, data)
}

/// Bicubic resize of every plane of a tensor to `oh × ow`, unquantized.
pub fn resize_tensor<T: Scalar>(t: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = t.shape();
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut data = Vec::with_capacity(out_shape.numel());
    for plane in t.data().chunks(s.plane().max(1)).take(s.n * s.c) {
        let p: Vec<f64> = plane.iter().map(|v| v.as_f64()).collect();
        data.extend(resize_plane(&p, s.w, s.h, ow, oh).into_iter().map(T::from_f64));
    }
    Tensor::from_vec(out_shape, data).expect("resize shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
        let w = cubic_weights(0.5);
        assert_eq!(w, [-0.0625, 0.5625, 0.5625, -0.0625]);
    }

    proptest! {
        #[test]
        fn weights_partition_unity(f in 0.0f64..1.0) {
            prop_assert!((cubic_weights(f).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn constants_survive_any_factor(v in 0u8..=255, w in 1usize..20, h in 1usize..20, factor in 0.2f64..3.0) {
            prop_assume!((w as f64 * factor).round() >= 1.0 && (h as f64 * factor).round() >= 1.0);
            let img = PlanarImage::new(w, h, 3, vec![v; w * h * 3]).unwrap();
            let out = bicubic_resize(&img, factor).unwrap();
            prop_assert!(out.data.iter().all(|&x| x == v));
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let data: Vec<u8> = (0..5 * 4 * 3).map(|i| (i * 29 % 256) as u8).collect();
        let img = PlanarImage::new(5, 4, 3, data).unwrap();
        assert_eq!(bicubic_resize(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn ramp_downscale_matches_hand_weights() {
        // Row 0,10,...,70. Output 0 samples at 0.5 with taps clamped to
        // [0,0,10,20]; output 3 at 6.5 with taps [50,60,70,70].
        let row: Vec<f64> = (0..8).map(|i| 10.0 * i as f64).collect();
        let out = resize_plane(&row, 8, 1, 4, 1);
        let want = [4.375, 25.0, 45.0, 65.625];
        for (o, w) in out.iter().zip(want) {
            assert!((o - w).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn bad_factors() {
        let img = PlanarImage::new(4, 4, 1, vec![0; 16]).unwrap();
        assert!(bicubic_resize(&img, 0.0).is_err());
        assert!(bicubic_resize(&img, 0.1).is_err());
        assert!(bicubic_resize(&img, f64::NAN).is_err());
    }
}
