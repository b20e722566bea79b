//! Spatial resampling: 2×2 pooling, 2× upsampling, pixel shuffle, and the
//! reflect padding / cropping used to align inputs to the window grid.

use crate::autodiff::{Tape, Var};
use crate::error::ShapeError;
use crate::tensor::{Scalar, Shape, Tensor};

use super::gather::{gather_kernel, sparse_linear_kernel};
use super::reflect_index;
use super::window::WindowGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

fn check_even(s: Shape) -> Result<(), ShapeError> {
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(ShapeError::invalid(
            "pool_half",
            format!("spatial dims {}x{} must be even", s.h, s.w),
        ));
    }
    Ok(())
}

fn avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let d = x.data();
    let quarter = T::from_f64(0.25);
    let mut data = Vec::with_capacity(out.numel());
    for plane in d.chunks(s.plane().max(1)).take(s.n * s.c) {
        for y in 0..out.h {
            let r0 = &plane[2 * y * s.w..(2 * y + 1) * s.w];
            let r1 = &plane[(2 * y + 1) * s.w..(2 * y + 2) * s.w];
            for x in 0..out.w {
                // Pairwise sum keeps constant inputs exact.
                let top = r0[2 * x] + r0[2 * x + 1];
                let bot = r1[2 * x] + r1[2 * x + 1];
                data.push((top + bot) * quarter);
            }
        }
    }
    Tensor::from_vec(out, data).expect("avg_pool shape")
}

/// Index of the (first) maximum of every 2×2 block.
fn max_pool_map<T: Scalar>(x: &Tensor<T>) -> (Shape, Vec<usize>) {
    let s = x.shape();
    let out = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let d = x.data();
    let mut map = Vec::with_capacity(out.numel());
    for p in 0..s.n * s.c {
        let base = p * s.plane();
        for y in 0..out.h {
            for x in 0..out.w {
                let cands = [
                    base + 2 * y * s.w + 2 * x,
                    base + 2 * y * s.w + 2 * x + 1,
                    base + (2 * y + 1) * s.w + 2 * x,
                    base + (2 * y + 1) * s.w + 2 * x + 1,
                ];
                let best = cands
                    .into_iter()
                    .reduce(|a, b| if d[b] > d[a] { b } else { a })
                    .expect("four candidates");
                map.push(best);
            }
        }
    }
    (out, map)
}

/// 2×2, stride-2 pooling.
pub fn pool_half<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>, ShapeError> {
    check_even(x.shape())?;
    Ok(match mode {
        PoolMode::Avg => avg_pool(x),
        PoolMode::Max => {
            let (shape, map) = max_pool_map(x);
            gather_kernel(x, shape, &map)
        }
    })
}

fn nearest_map(s: Shape) -> (Shape, Vec<usize>) {
    let out = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut map = Vec::with_capacity(out.numel());
    for p in 0..s.n * s.c {
        for y in 0..out.h {
            for x in 0..out.w {
                map.push(p * s.plane() + (y / 2) * s.w + x / 2);
            }
        }
    }
    (out, map)
}

/// Half-pixel-centre source taps for doubling an axis of length `n`.
fn bilinear_axis(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn bilinear_taps(s: Shape) -> (Shape, Vec<usize>, Vec<f64>) {
    let out = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let ys = bilinear_axis(s.h);
    let xs = bilinear_axis(s.w);
    let mut src = Vec::with_capacity(out.numel() * 4);
    let mut wt = Vec::with_capacity(out.numel() * 4);
    for p in 0..s.n * s.c {
        let base = p * s.plane();
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                src.extend([
                    base + y0 * s.w + x0,
                    base + y0 * s.w + x1,
                    base + y1 * s.w + x0,
                    base + y1 * s.w + x1,
                ]);
                wt.extend([
                    (1.0 - fy) * (1.0 - fx),
                    (1.0 - fy) * fx,
                    fy * (1.0 - fx),
                    fy * fx,
                ]);
            }
        }
    }
    (out, src, wt)
}

/// Double both spatial dims.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    match mode {
        UpsampleMode::Nearest => {
            let (shape, map) = nearest_map(x.shape());
            gather_kernel(x, shape, &map)
        }
        UpsampleMode::Bilinear => {
            let (shape, src, wt) = bilinear_taps(x.shape());
            sparse_linear_kernel(x, shape, 4, &src, &wt)
        }
    }
}

fn pixel_shuffle_map(s: Shape, r: usize) -> Result<(Shape, Vec<usize>), ShapeError> {
    if r == 0 || s.c % (r * r) != 0 {
        return Err(ShapeError::invalid(
            "pixel_shuffle",
            format!("{} channels not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let c = s.c / (r * r);
    let out = Shape::new(s.n, c, r * s.h, r * s.w);
    let mut map = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for k in 0..c {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let (i, di) = (oy / r, oy % r);
                    let (j, dj) = (ox / r, ox % r);
                    map.push(s.index(n, k * r * r + di * r + dj, i, j));
                }
            }
        }
    }
    Ok((out, map))
}

fn pixel_unshuffle_map(s: Shape, r: usize) -> Result<(Shape, Vec<usize>), ShapeError> {
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(ShapeError::invalid(
            "pixel_unshuffle",
            format!("{}x{} not divisible by {r}", s.h, s.w),
        ));
    }
    let out = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut map = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for ch in 0..out.c {
            let (k, di, dj) = (ch / (r * r), (ch % (r * r)) / r, ch % r);
            for i in 0..out.h {
                for j in 0..out.w {
                    map.push(s.index(n, k, r * i + di, r * j + dj));
                }
            }
        }
    }
    Ok((out, map))
}

pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, ShapeError> {
    let (shape, map) = pixel_shuffle_map(x.shape(), r)?;
    Ok(gather_kernel(x, shape, &map))
}

pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, ShapeError> {
    let (shape, map) = pixel_unshuffle_map(x.shape(), r)?;
    Ok(gather_kernel(x, shape, &map))
}

fn pad_map(s: Shape, pad_h: usize, pad_w: usize) -> (Shape, Vec<usize>) {
    let out = Shape::new(s.n, s.c, s.h + pad_h, s.w + pad_w);
    let mut map = Vec::with_capacity(out.numel());
    for p in 0..s.n * s.c {
        for y in 0..out.h {
            let sy = reflect_index(y as isize, s.h);
            for x in 0..out.w {
                map.push(p * s.plane() + sy * s.w + reflect_index(x as isize, s.w));
            }
        }
    }
    (out, map)
}

fn crop_map(s: Shape, h: usize, w: usize) -> (Shape, Vec<usize>) {
    let out = Shape::new(s.n, s.c, h, w);
    let mut map = Vec::with_capacity(out.numel());
    for p in 0..s.n * s.c {
        for y in 0..h {
            map.extend((0..w).map(|x| p * s.plane() + y * s.w + x));
        }
    }
    (out, map)
}

/// Multiple that `h` and `w` must reach for `levels` halvings of `window`-sized windows.
pub fn grid_multiple(window: usize, levels: usize) -> usize {
    window << levels.saturating_sub(1)
}

fn grid_for(s: Shape, window: usize, levels: usize) -> Result<WindowGrid, ShapeError> {
    if window == 0 || levels == 0 {
        return Err(ShapeError::invalid("pad_to_grid", "window and levels must be >= 1"));
    }
    if s.h == 0 || s.w == 0 {
        return Err(ShapeError::invalid("pad_to_grid", "input smaller than 1 px"));
    }
    let m = grid_multiple(window, levels);
    let ph = s.h.div_ceil(m) * m - s.h;
    let pw = s.w.div_ceil(m) * m - s.w;
    Ok(WindowGrid {
        window,
        rows: (s.h + ph) / window,
        cols: (s.w + pw) / window,
        pad_h: ph,
        pad_w: pw,
    })
}

/// Reflect-pad right/bottom so both dims are multiples of `window · 2^(levels-1)`.
pub fn pad_to_grid<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    levels: usize,
) -> Result<(Tensor<T>, WindowGrid), ShapeError> {
    let grid = grid_for(x.shape(), window, levels)?;
    let (shape, map) = pad_map(x.shape(), grid.pad_h, grid.pad_w);
    Ok((gather_kernel(x, shape, &map), grid))
}

/// Keep the top-left `h × w` region.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>, ShapeError> {
    let s = x.shape();
    if h > s.h || w > s.w {
        return Err(ShapeError::invalid("crop", format!("{h}x{w} exceeds {}x{}", s.h, s.w)));
    }
    let (shape, map) = crop_map(s, h, w);
    Ok(gather_kernel(x, shape, &map))
}

impl<T: Scalar> Tape<T> {
    pub fn pool_half(&mut self, x: &Var<T>, mode: PoolMode) -> Result<Var<T>, ShapeError> {
        let s = x.shape();
        check_even(s)?;
        Ok(match mode {
            PoolMode::Avg => {
                let out = avg_pool(x.value());
                self.record("avg_pool", &[x], out, move |g, _| {
                    let quarter = T::from_f64(0.25);
                    let mut gx = Tensor::zeros(s);
                    let ow = s.w / 2;
                    let d = gx.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        let (p, rem) = (i / (s.plane() / 4), i % (s.plane() / 4));
                        let (y, x) = (rem / ow, rem % ow);
                        let base = p * s.plane() + 2 * y * s.w + 2 * x;
                        let v = gv * quarter;
                        d[base] += v;
                        d[base + 1] += v;
                        d[base + s.w] += v;
                        d[base + s.w + 1] += v;
                    }
                    vec![Some(gx)]
                })
            }
            PoolMode::Max => {
                let (shape, map) = max_pool_map(x.value());
                self.gather("max_pool", x, shape, map)
            }
        })
    }

    pub fn upsample2x(&mut self, x: &Var<T>, mode: UpsampleMode) -> Var<T> {
        match mode {
            UpsampleMode::Nearest => {
                let (shape, map) = nearest_map(x.shape());
                self.gather("upsample_nearest", x, shape, map)
            }
            UpsampleMode::Bilinear => {
                let (shape, src, wt) = bilinear_taps(x.shape());
                self.sparse_linear("upsample_bilinear", x, shape, 4, src, wt)
            }
        }
    }

    pub fn pixel_shuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>, ShapeError> {
        let (shape, map) = pixel_shuffle_map(x.shape(), r)?;
        Ok(self.gather("pixel_shuffle", x, shape, map))
    }

    pub fn pixel_unshuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>, ShapeError> {
        let (shape, map) = pixel_unshuffle_map(x.shape(), r)?;
        Ok(self.gather("pixel_unshuffle", x, shape, map))
    }

    pub fn pad_to_grid(
        &mut self,
        x: &Var<T>,
        window: usize,
        levels: usize,
    ) -> Result<(Var<T>, WindowGrid), ShapeError> {
        let grid = grid_for(x.shape(), window, levels)?;
        if grid.pad_h == 0 && grid.pad_w == 0 {
            return Ok((x.clone(), grid));
        }
        let (shape, map) = pad_map(x.shape(), grid.pad_h, grid.pad_w);
        Ok((self.gather("pad_reflect", x, shape, map), grid))
    }

    pub fn crop(&mut self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>, ShapeError> {
        let s = x.shape();
        if h > s.h || w > s.w {
            return Err(ShapeError::invalid("crop", format!("{h}x{w} exceeds {}x{}", s.h, s.w)));
        }
        if (h, w) == (s.h, s.w) {
            return Ok(x.clone());
        }
        let (shape, map) = crop_map(s, h, w);
        Ok(self.gather("crop", x, shape, map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_gradcheck;
    use crate::rng::Rng;
    use crate::tensor::FillSpec;
    use proptest::prelude::*;

    fn rand(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::new(shape, FillSpec::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn pool_examples() {
        let x = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_half(&x, PoolMode::Avg).unwrap().data(), &[2.5]);
        assert_eq!(pool_half(&x, PoolMode::Max).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full([1, 2, 8, 8], 0.37);
        let twice = pool_half(&pool_half(&c, PoolMode::Avg).unwrap(), PoolMode::Avg).unwrap();
        assert_eq!(twice, Tensor::full([1, 2, 2, 2], 0.37));
        assert!(pool_half(&rand([1, 1, 3, 4], 1), PoolMode::Avg).is_err());
    }

    #[test]
    fn upsample_examples() {
        let a = Tensor::<f64>::scalar(0.7);
        assert_eq!(upsample2x(&a, UpsampleMode::Nearest).data(), &[0.7; 4]);
        let row = Tensor::<f64>::from_f64_slice([1, 1, 1, 2], &[0.0, 2.0]).unwrap();
        let up = upsample2x(&row, UpsampleMode::Bilinear);
        assert_eq!(up.shape(), Shape::new(1, 1, 2, 4));
        for (v, w) in up.data()[..4].iter().zip([0.0, 0.5, 1.5, 2.0]) {
            assert!((v - w).abs() < 1e-15);
        }
        let c = Tensor::<f64>::full([1, 3, 6, 4], -1.25);
        let back = upsample2x(&pool_half(&c, PoolMode::Avg).unwrap(), UpsampleMode::Nearest);
        assert_eq!(back, c);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = Tensor::<f64>::from_f64_slice([1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&rand([1, 6, 2, 2], 0), 2).is_err());
    }

    proptest! {
        #[test]
        fn pixel_shuffle_is_a_bijection(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, r in 1usize..4, seed in any::<u64>()) {
            let x = rand([n, c * r * r, h, w], seed);
            let y = pixel_shuffle(&x, r).unwrap();
            prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x.clone());
            let mut a = x.to_f64_vec();
            let mut b = y.to_f64_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn grid_padding_examples() {
        let x = rand([1, 1, 64, 64], 1);
        let (p, g) = pad_to_grid(&x, 8, 4).unwrap();
        assert_eq!((g.pad_h, g.pad_w), (0, 0));
        assert_eq!(p, x);
        let x = rand([1, 2, 60, 60], 2);
        let (p, g) = pad_to_grid(&x, 8, 4).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 2, 64, 64));
        assert_eq!((g.rows, g.cols), (8, 8));
        assert_eq!(crop(&p, 60, 60).unwrap(), x);
        assert!(pad_to_grid(&Tensor::<f64>::zeros([1, 1, 0, 4]), 8, 1).is_err());
    }

    #[test]
    fn pad_then_crop_is_identity_for_all_sizes() {
        for size in 1..=129 {
            let x = rand([1, 1, size, (size * 7) % 129 + 1], size as u64);
            let (p, g) = pad_to_grid(&x, 8, 3).unwrap();
            assert_eq!(p.shape().h % 32, 0);
            assert_eq!(p.shape().w % 32, 0);
            assert_eq!(g.rows * g.window, p.shape().h);
            assert_eq!(crop(&p, size, x.shape().w).unwrap(), x, "size {size}");
        }
    }

    #[test]
    fn gradients() {
        let x = rand([1, 2, 4, 6], 5);
        let wgt = Var::constant(rand([1, 2, 8, 12], 6));
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let wgt = wgt.clone();
            let r = fd_gradcheck(
                move |t, x| {
                    let p = t.pool_half(x, PoolMode::Avg)?;
                    let u = t.upsample2x(&p, mode);
                    let u = t.upsample2x(&u, mode);
                    let y = t.mul(&u, &wgt)?;
                    Ok(t.sum(&y))
                },
                &x,
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(r.pass, "{mode:?} {r:?}");
        }
        let r = fd_gradcheck(
            |t, x| {
                let (p, _) = t.pad_to_grid(x, 4, 2)?;
                let s = t.pixel_unshuffle(&p, 2)?;
                let s = t.mul(&s, &s)?;
                Ok(t.sum(&s))
            },
            &rand([1, 1, 5, 7], 9),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }
}
