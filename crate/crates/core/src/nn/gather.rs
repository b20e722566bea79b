//! Index-map rearrangements. Padding, cropping, window partitioning, pixel
//! shuffling, nearest upsampling and channel slicing are all `out[i] =
//! x[map[i]]` for some map; the backward pass scatters with accumulation,
//! which handles maps that repeat source indices.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::ShapeError;
use crate::tensor::{Scalar, Shape, Tensor};

pub(crate) fn gather_kernel<T: Scalar>(x: &Tensor<T>, shape: Shape, map: &[usize]) -> Tensor<T> {
    debug_assert_eq!(shape.numel(), map.len());
    let src = x.data();
    Tensor::from_vec(shape, map.iter().map(|&i| src[i]).collect()).expect("gather shape")
}

/// `out[i] = Σ_t weight[i*arity+t] · x[src[i*arity+t]]`.
pub(crate) fn sparse_linear_kernel<T: Scalar>(
    x: &Tensor<T>,
    shape: Shape,
    arity: usize,
    src: &[usize],
    weight: &[f64],
) -> Tensor<T> {
    let d = x.data();
    let data = src
        .chunks(arity)
        .zip(weight.chunks(arity))
        .map(|(s, w)| {
            T::from_f64(s.iter().zip(w).map(|(&i, &w)| w * d[i].as_f64()).sum())
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sparse_linear shape")
}

impl<T: Scalar> Tape<T> {
    /// Fixed-arity weighted gather; see [`sparse_linear_kernel`].
    pub(crate) fn sparse_linear(
        &mut self,
        name: &'static str,
        x: &Var<T>,
        shape: Shape,
        arity: usize,
        src: Vec<usize>,
        weight: Vec<f64>,
    ) -> Var<T> {
        let out = sparse_linear_kernel(x.value(), shape, arity, &src, &weight);
        let in_shape = x.shape();
        self.record(name, &[x], out, move |g, _| {
            let mut gx = vec![0.0f64; in_shape.numel()];
            for ((s, w), &gv) in src.chunks(arity).zip(weight.chunks(arity)).zip(g.data()) {
                let gv = gv.as_f64();
                for (&i, &w) in s.iter().zip(w) {
                    gx[i] += w * gv;
                }
            }
            vec![Some(
                Tensor::from_vec(in_shape, gx.into_iter().map(T::from_f64).collect())
                    .expect("sparse_linear grad"),
            )]
        })
    }

    pub(crate) fn gather(
        &mut self,
        name: &'static str,
        x: &Var<T>,
        shape: Shape,
        map: Vec<usize>,
    ) -> Var<T> {
        let out = gather_kernel(x.value(), shape, &map);
        let map = Rc::new(map);
        let in_shape = x.shape();
        self.record(name, &[x], out, move |g, _| {
            let mut gx = Tensor::zeros(in_shape);
            let d = gx.data_mut();
            for (&src, &gv) in map.iter().zip(g.data()) {
                d[src] += gv;
            }
            vec![Some(gx)]
        })
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>, ShapeError> {
        let s = x.shape();
        if start + len > s.c {
            return Err(ShapeError::invalid(
                "slice_channels",
                format!("range {start}..{} exceeds {} channels", start + len, s.c),
            ));
        }
        let out = Shape::new(s.n, len, s.h, s.w);
        let plane = s.plane();
        let mut map = Vec::with_capacity(out.numel());
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            map.extend(base..base + len * plane);
        }
        Ok(self.gather("slice_channels", x, out, map))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var<T>]) -> Result<Var<T>, ShapeError> {
        let first = xs
            .first()
            .ok_or_else(|| ShapeError::invalid("concat_channels", "no inputs"))?
            .shape();
        for x in xs {
            let s = x.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(ShapeError::Mismatch {
                    op: "concat_channels",
                    lhs: first.dims(),
                    rhs: s.dims(),
                });
            }
        }
        let chans: Vec<usize> = xs.iter().map(|x| x.shape().c).collect();
        let total: usize = chans.iter().sum();
        let out_shape = Shape::new(first.n, total, first.h, first.w);
        let plane = first.plane();
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for x in xs {
                let c = x.shape().c;
                out.extend_from_slice(&x.value().data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        let inputs: Vec<&Var<T>> = xs.iter().collect();
        Ok(self.record("concat_channels", &inputs, out, move |g, needs| {
            let mut grads: Vec<Vec<T>> = chans
                .iter()
                .map(|c| Vec::with_capacity(first.n * c * plane))
                .collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..first.n {
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    gi.extend_from_slice(&gd[off..off + c * plane]);
                    off += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .zip(needs)
                .map(|((gi, &c), &need)| {
                    need.then(|| {
                        Tensor::from_vec(Shape::new(first.n, c, first.h, first.w), gi)
                            .expect("concat grad")
                    })
                })
                .collect()
        }))
    }
}
