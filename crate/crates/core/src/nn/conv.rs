//! Stride-1, same-size 2-D cross-correlation with reflect padding.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::ShapeError;
use crate::tensor::{Scalar, Shape, Tensor};

use super::reflect_index;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// 1 for a dense convolution, `in_ch` for depthwise.
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn dense(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch: ch,
            out_ch: ch,
            kernel,
            groups: ch,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.kernel % 2 == 0 {
            return Err(ShapeError::invalid("conv2d", "kernel size must be odd"));
        }
        match self.groups {
            1 => Ok(()),
            g if g == self.in_ch && g == self.out_ch => Ok(()),
            g => Err(ShapeError::invalid(
                "conv2d",
                format!(
                    "groups={g} requires groups = in_ch = out_ch (got {}, {})",
                    self.in_ch, self.out_ch
                ),
            )),
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_ch, self.in_ch / self.groups, self.kernel, self.kernel)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_ch, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_ch } else { 0 }
    }

    /// Multiply-accumulates for one output pixel.
    pub fn macs_per_pixel(&self) -> usize {
        self.kernel * self.kernel * (self.in_ch / self.groups) * self.out_ch
    }

    fn check(&self, x: Shape, w: Shape, b: Option<Shape>) -> Result<(), ShapeError> {
        self.validate()?;
        if x.c != self.in_ch {
            return Err(ShapeError::Mismatch {
                op: "conv2d input",
                lhs: x.dims(),
                rhs: self.weight_shape().dims(),
            });
        }
        if w != self.weight_shape() {
            return Err(ShapeError::Mismatch {
                op: "conv2d weight",
                lhs: w.dims(),
                rhs: self.weight_shape().dims(),
            });
        }
        match (b, self.bias) {
            (Some(b), true) if b == self.bias_shape() => Ok(()),
            (None, false) => Ok(()),
            (b, _) => Err(ShapeError::invalid(
                "conv2d bias",
                format!("got {:?}, spec bias={}", b.map(|s| s.dims()), self.bias),
            )),
        }
    }
}

/// Reflect-pad every plane of `x` by `p` on all sides.
fn pad_planes<T: Scalar>(x: &Tensor<T>, p: usize) -> Vec<T> {
    let s = x.shape();
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let cols: Vec<usize> = (0..wp)
        .map(|j| reflect_index(j as isize - p as isize, s.w))
        .collect();
    let mut out = Vec::with_capacity(s.n * s.c * hp * wp);
    for plane in x.data().chunks(s.plane().max(1)).take(s.n * s.c) {
        for i in 0..hp {
            let r = reflect_index(i as isize - p as isize, s.h);
            let row = &plane[r * s.w..(r + 1) * s.w];
            out.extend(cols.iter().map(|&c| row[c]));
        }
    }
    out
}

/// Adjoint of [`pad_planes`]: fold a padded-plane gradient onto the source.
fn fold_planes<T: Scalar>(gp: &[T], s: Shape, p: usize) -> Tensor<T> {
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let cols: Vec<usize> = (0..wp)
        .map(|j| reflect_index(j as isize - p as isize, s.w))
        .collect();
    let mut gx = Tensor::zeros(s);
    let plane = s.plane();
    for (pi, out) in gx.data_mut().chunks_mut(plane.max(1)).take(s.n * s.c).enumerate() {
        let src = &gp[pi * hp * wp..(pi + 1) * hp * wp];
        for i in 0..hp {
            let r = reflect_index(i as isize - p as isize, s.h);
            let row = &mut out[r * s.w..(r + 1) * s.w];
            for (j, &c) in cols.iter().enumerate() {
                row[c] += src[i * wp + j];
            }
        }
    }
    gx
}

fn conv_forward<T: Scalar>(
    xp: &[T],
    s: Shape,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Tensor<T> {
    let k = spec.kernel;
    let p = k / 2;
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let out_shape = Shape::new(s.n, spec.out_ch, s.h, s.w);
    let mut out = vec![T::zero(); out_shape.numel()];
    let wd = w.data();
    let plane = s.plane();
    for n in 0..s.n {
        for oc in 0..spec.out_ch {
            let g = oc / cout_g;
            let o = &mut out[(n * spec.out_ch + oc) * plane..(n * spec.out_ch + oc + 1) * plane];
            if let Some(b) = b {
                o.iter_mut().for_each(|v| *v = b.data()[oc]);
            }
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let src = &xp[(n * s.c + ic) * hp * wp..(n * s.c + ic + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((oc * cin_g + icg) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for y in 0..s.h {
                            let srow = &src[(y + ky) * wp + kx..(y + ky) * wp + kx + s.w];
                            for (ov, &sv) in o[y * s.w..(y + 1) * s.w].iter_mut().zip(srow) {
                                *ov += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("conv output")
}

/// Same-size convolution of `x` by `w` (shape `(out, in/groups, k, k)`).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, ShapeError> {
    spec.check(x.shape(), w.shape(), b.map(|b| b.shape()))?;
    let xp = pad_planes(x, spec.kernel / 2);
    Ok(conv_forward(&xp, x.shape(), w, b, spec))
}

/// Straight nested-loop reference, used to cross-check [`conv2d`].
#[cfg(test)]
pub(crate) fn conv2d_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let k = spec.kernel as isize;
    let p = k / 2;
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let mut out = Tensor::zeros(Shape::new(s.n, spec.out_ch, s.h, s.w));
    for n in 0..s.n {
        for oc in 0..spec.out_ch {
            for y in 0..s.h {
                for x0 in 0..s.w {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for icg in 0..cin_g {
                        let ic = (oc / cout_g) * cin_g + icg;
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = reflect_index(y as isize + ky - p, s.h);
                                let sx = reflect_index(x0 as isize + kx - p, s.w);
                                acc += w.at(oc, icg, ky as usize, kx as usize) * x.at(n, ic, sy, sx);
                            }
                        }
                    }
                    let i = out.shape().index(n, oc, y, x0);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        spec: ConvSpec,
    ) -> Result<Var<T>, ShapeError> {
        let s = x.shape();
        spec.check(s, w.shape(), b.map(|b| b.shape()))?;
        let p = spec.kernel / 2;
        let xp = Rc::new(pad_planes(x.value(), p));
        let out = conv_forward(&xp, s, w.value(), b.map(|b| b.value()), &spec);
        self.count(
            (spec.macs_per_pixel() * s.n * s.plane()) as u64,
            out.len() as u64,
        );
        let wv = w.rc();
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        Ok(self.record("conv2d", &inputs, out, move |g, needs| {
            let k = spec.kernel;
            let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
            let cin_g = spec.in_ch / spec.groups;
            let cout_g = spec.out_ch / spec.groups;
            let plane = s.plane();
            let gd = g.data();
            let wd = wv.data();
            let mut gxp = needs[0].then(|| vec![T::zero(); xp.len()]);
            let mut gw = needs[1].then(|| vec![0.0f64; wd.len()]);
            for n in 0..s.n {
                for oc in 0..spec.out_ch {
                    let grp = oc / cout_g;
                    let go = &gd[(n * spec.out_ch + oc) * plane..(n * spec.out_ch + oc + 1) * plane];
                    for icg in 0..cin_g {
                        let ic = grp * cin_g + icg;
                        let base = (n * s.c + ic) * hp * wp;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wi = ((oc * cin_g + icg) * k + ky) * k + kx;
                                if let Some(gw) = gw.as_mut() {
                                    let mut acc = 0.0f64;
                                    for y in 0..s.h {
                                        let off = base + (y + ky) * wp + kx;
                                        let srow = &xp[off..off + s.w];
                                        let grow = &go[y * s.w..(y + 1) * s.w];
                                        let mut row_acc = T::zero();
                                        for (&a, &b) in srow.iter().zip(grow) {
                                            row_acc += a * b;
                                        }
                                        acc += row_acc.as_f64();
                                    }
                                    gw[wi] += acc;
                                }
                                if let Some(gxp) = gxp.as_mut() {
                                    let wv = wd[wi];
                                    if wv == T::zero() {
                                        continue;
                                    }
                                    for y in 0..s.h {
                                        let off = base + (y + ky) * wp + kx;
                                        let dst = &mut gxp[off..off + s.w];
                                        for (d, &gv) in dst.iter_mut().zip(&go[y * s.w..(y + 1) * s.w]) {
                                            *d += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                gxp.map(|gp| fold_planes(&gp, s, p)),
                gw.map(|gw| {
                    Tensor::from_vec(spec.weight_shape(), gw.into_iter().map(T::from_f64).collect())
                        .expect("conv gw")
                }),
            ];
            if spec.bias {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0f64; spec.out_ch];
                    for (i, chunk) in gd.chunks(plane.max(1)).enumerate() {
                        gb[i % spec.out_ch] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    Tensor::from_vec(spec.bias_shape(), gb.into_iter().map(T::from_f64).collect())
                        .expect("conv gb")
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::rng::Rng;
    use crate::tensor::FillSpec;
    use proptest::prelude::*;

    fn rand(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::new(shape, FillSpec::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn identity_1x1() {
        let x = rand([2, 3, 4, 5], 1);
        let mut w = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let spec = ConvSpec { bias: false, ..ConvSpec::dense(3, 3, 1) };
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn averaging_kernel_preserves_constants() {
        let x = Tensor::<f64>::full([1, 1, 6, 7], 0.37);
        let w = Tensor::full([1, 1, 3, 3], 1.0 / 9.0);
        let spec = ConvSpec { bias: false, ..ConvSpec::dense(1, 1, 3) };
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn matches_naive_oracle() {
        let x = rand([1, 3, 5, 5], 2);
        let w = rand([4, 3, 3, 3], 3);
        let b = rand([1, 4, 1, 1], 4);
        let spec = ConvSpec::dense(3, 4, 3);
        let fast = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let slow = conv2d_naive(&x, &w, Some(&b), &spec);
        assert!(fast.max_abs_diff(&slow) <= 1e-10);
    }

    #[test]
    fn channel_mismatch_and_bad_groups() {
        let x = rand([1, 2, 4, 4], 1);
        let w = rand([4, 3, 3, 3], 3);
        assert!(conv2d(&x, &w, None, &ConvSpec { bias: false, ..ConvSpec::dense(3, 4, 3) }).is_err());
        let bad = ConvSpec { groups: 3, ..ConvSpec::dense(3, 4, 3) };
        assert!(bad.validate().is_err());
        let even = ConvSpec::dense(3, 4, 2);
        assert!(even.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn dense_and_depthwise_match_oracle(
            n in 1usize..3, cin in 1usize..5, cout in 1usize..5, h in 1usize..9, w in 1usize..9,
            k in prop::sample::select(vec![1usize, 3, 5]), depthwise in any::<bool>(), seed in any::<u64>()
        ) {
            let spec = if depthwise { ConvSpec::depthwise(cin, k) } else { ConvSpec::dense(cin, cout, k) };
            let x = rand([n, cin, h, w], seed);
            let wt = rand(spec.weight_shape().dims(), seed ^ 1);
            let b = rand(spec.bias_shape().dims(), seed ^ 2);
            let fast = conv2d(&x, &wt, Some(&b), &spec).unwrap();
            let slow = conv2d_naive(&x, &wt, Some(&b), &spec);
            let scale = slow.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
            prop_assert!(fast.max_abs_diff(&slow) <= 1e-10 * scale);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for spec in [ConvSpec::dense(2, 3, 3), ConvSpec::depthwise(3, 3), ConvSpec::dense(3, 2, 1)] {
            let x = rand([2, spec.in_ch, 4, 3], 7);
            let w = rand(spec.weight_shape().dims(), 8);
            let b = rand(spec.bias_shape().dims(), 9);
            let r = rand([2, spec.out_ch, 4, 3], 10);
            let r = Var::constant(r);
            let rep = check_gradients(
                |t, xs| {
                    let y = t.conv2d(&xs[0], &xs[1], Some(&xs[2]), spec)?;
                    let y = t.mul(&y, &r)?;
                    Ok(t.sum(&y))
                },
                &[x, w, b],
                1e-4,
                1e-6,
                |_, _| {},
            )
            .unwrap();
            assert!(rep.pass, "{spec:?}: {rep:?}");
        }
    }
}
