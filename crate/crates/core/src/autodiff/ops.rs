//! Primitive differentiable operations: elementwise arithmetic, batched
//! matrix products, row softmax and reductions.

use crate::error::ShapeError;
use crate::tensor::{Scalar, Shape, Tensor};

use super::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// `b` may equal `a` in shape or be broadcast over the batch axis (`b.n == 1`).
fn broadcast_check(op: &'static str, a: Shape, b: Shape) -> Result<bool, ShapeError> {
    if a == b {
        Ok(false)
    } else if b.n == 1 && (a.c, a.h, a.w) == (b.c, b.h, b.w) {
        Ok(true)
    } else {
        Err(ShapeError::Mismatch {
            op,
            lhs: a.dims(),
            rhs: b.dims(),
        })
    }
}

pub fn elementwise<T: Scalar>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, ShapeError> {
    broadcast_check("elementwise", a.shape(), b.shape())?;
    let bd = b.data();
    let per = bd.len();
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let data = if per == 0 {
        Vec::new()
    } else {
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % per]))
            .collect()
    };
    Tensor::from_vec(a.shape(), data)
}

/// Sum a batch-expanded gradient back down to `target` (n == 1).
fn reduce_batch<T: Scalar>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    let mut out = Tensor::zeros(target);
    let per = target.numel();
    if per == 0 {
        return out;
    }
    for (i, &v) in g.data().iter().enumerate() {
        out.data_mut()[i % per] += v;
    }
    out
}

/// Number of independent matrices in the trailing two axes.
fn batches(s: Shape) -> usize {
    s.n * s.c
}

/// Batched `a · b` (or `a · bᵀ` when `trans_b`), viewing the last two axes as
/// the matrix. `b` either matches `a`'s batch layout or holds a single matrix
/// shared across all batches. Products accumulate in `f64`.
pub fn matmul_kernel<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>, ShapeError> {
    let (sa, sb) = (a.shape(), b.shape());
    let (rows, k) = (sa.h, sa.w);
    let (kb, cols) = if trans_b { (sb.w, sb.h) } else { (sb.h, sb.w) };
    let shared = batches(sb) == 1;
    if kb != k || !(shared || (sa.n, sa.c) == (sb.n, sb.c)) {
        return Err(ShapeError::Mismatch {
            op: "matmul",
            lhs: sa.dims(),
            rhs: sb.dims(),
        });
    }
    let out_shape = Shape::new(sa.n, sa.c, rows, cols);
    let mut out = vec![T::zero(); out_shape.numel()];
    let (ad, bd) = (a.data(), b.data());
    let mut acc = vec![0.0f64; cols];
    for bi in 0..batches(sa) {
        let am = &ad[bi * rows * k..(bi + 1) * rows * k];
        let bm = if shared {
            bd
        } else {
            &bd[bi * k * cols..(bi + 1) * k * cols]
        };
        let om = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let arow = &am[r * k..(r + 1) * k];
            if trans_b {
                for (c, slot) in acc.iter_mut().enumerate() {
                    let brow = &bm[c * k..(c + 1) * k];
                    *slot = arow
                        .iter()
                        .zip(brow)
                        .map(|(&x, &y)| x.as_f64() * y.as_f64())
                        .sum();
                }
            } else {
                for (kk, &av) in arow.iter().enumerate() {
                    let av = av.as_f64();
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bm[kk * cols..(kk + 1) * cols];
                    for (slot, &bv) in acc.iter_mut().zip(brow) {
                        *slot += av * bv.as_f64();
                    }
                }
            }
            for (o, &v) in om[r * cols..(r + 1) * cols].iter_mut().zip(&acc) {
                *o = T::from_f64(v);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Batched `aᵀ · b` over the last two axes, optionally summed over batches.
fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, sum_batches: bool) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let (k, rows, cols) = (sa.h, sa.w, sb.w);
    let nb = batches(sa);
    let out_batches = if sum_batches { 1 } else { nb };
    let shape = if sum_batches {
        Shape::matrix(rows, cols)
    } else {
        Shape::new(sa.n, sa.c, rows, cols)
    };
    let mut acc = vec![0.0f64; out_batches * rows * cols];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..nb {
        let ob = if sum_batches { 0 } else { bi };
        let om = &mut acc[ob * rows * cols..(ob + 1) * rows * cols];
        for kk in 0..k {
            let arow = &ad[(bi * k + kk) * rows..(bi * k + kk + 1) * rows];
            let brow = &bd[(bi * k + kk) * cols..(bi * k + kk + 1) * cols];
            for (r, &av) in arow.iter().enumerate() {
                let av = av.as_f64();
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in om[r * cols..(r + 1) * cols].iter_mut().zip(brow) {
                    *o += av * bv.as_f64();
                }
            }
        }
    }
    Tensor::from_vec(shape, acc.into_iter().map(T::from_f64).collect())
        .expect("matmul_tn shape")
}

/// Row softmax of `scale · a` over the last axis, with max subtraction.
pub fn softmax_kernel<T: Scalar>(a: &Tensor<T>, scale: f64) -> Result<Tensor<T>, ShapeError> {
    let cols = a.shape().w;
    if cols == 0 {
        return Err(ShapeError::invalid("softmax_rows", "zero columns"));
    }
    let mut out = Vec::with_capacity(a.len());
    let mut buf = vec![0.0f64; cols];
    for row in a.data().chunks(cols) {
        let max = row
            .iter()
            .map(|v| scale * v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (b, v) in buf.iter_mut().zip(row) {
            *b = (scale * v.as_f64() - max).exp();
            total += *b;
        }
        out.extend(buf.iter().map(|b| T::from_f64(b / total)));
    }
    Tensor::from_vec(a.shape(), out)
}

impl<T: Scalar> Tape<T> {
    pub fn elementwise(
        &mut self,
        op: BinaryOp,
        a: &Var<T>,
        b: &Var<T>,
    ) -> Result<Var<T>, ShapeError> {
        let broadcast = broadcast_check("elementwise", a.shape(), b.shape())?;
        let out = elementwise(op, a.value(), b.value())?;
        let (av, bv) = (a.rc(), b.rc());
        let b_shape = b.shape();
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        Ok(self.record(name, &[a, b], out, move |g, needs| {
            let ga = needs[0].then(|| match op {
                BinaryOp::Add | BinaryOp::Sub => g.clone(),
                BinaryOp::Mul => elementwise(BinaryOp::Mul, g, &bv).expect("mul grad"),
            });
            let gb = needs[1].then(|| {
                let full = match op {
                    BinaryOp::Add => g.clone(),
                    BinaryOp::Sub => g.map(|v| -v),
                    BinaryOp::Mul => elementwise(BinaryOp::Mul, g, &av).expect("mul grad"),
                };
                if broadcast {
                    reduce_batch(&full, b_shape)
                } else {
                    full
                }
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, ShapeError> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, ShapeError> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, ShapeError> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: &Var<T>, k: f64) -> Var<T> {
        let kt = T::from_f64(k);
        let out = a.value().map(|v| v * kt);
        self.record("scale", &[a], out, move |g, _| vec![Some(g.map(|v| v * kt))])
    }

    pub fn abs(&mut self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(|v| v.abs());
        let av = a.rc();
        self.record("abs", &[a], out, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(&g, &x)| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(Tensor::from_vec(av.shape(), data).expect("abs grad"))]
        })
    }

    /// Sum of all elements as a (1,1,1,1) tensor.
    pub fn sum(&mut self, a: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(T::from_f64(a.value().sum()));
        let shape = a.shape();
        self.record("sum", &[a], out, move |g, _| {
            vec![Some(Tensor::full(shape, g.data()[0]))]
        })
    }

    pub fn mean(&mut self, a: &Var<T>) -> Var<T> {
        let n = a.value().len().max(1) as f64;
        let out = Tensor::scalar(T::from_f64(a.value().sum() / n));
        let shape = a.shape();
        self.record("mean", &[a], out, move |g, _| {
            vec![Some(Tensor::full(shape, g.data()[0] / T::from_f64(n)))]
        })
    }

    /// Batched matrix product over the last two axes; see [`matmul_kernel`].
    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, ShapeError> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>, ShapeError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>, ShapeError> {
        let out = matmul_kernel(a.value(), b.value(), trans_b)?;
        let (sa, sb) = (a.shape(), b.shape());
        let cols = out.shape().w;
        self.count((sa.n * sa.c * sa.h * sa.w * cols) as u64, out.len() as u64);
        let (av, bv) = (a.rc(), b.rc());
        let shared = batches(sb) == 1 && batches(sa) != 1;
        Ok(self.record("matmul", &[a, b], out, move |g, needs| {
            // y = a·b  => ga = g·bᵀ,  gb = aᵀ·g
            // y = a·bᵀ => ga = g·b,   gb = gᵀ·a
            let ga = needs[0].then(|| matmul_kernel(g, &bv, !trans_b).expect("matmul ga"));
            let gb = needs[1].then(|| {
                let gb = if trans_b {
                    matmul_tn(g, &av, shared)
                } else {
                    matmul_tn(&av, g, shared)
                };
                gb.reshape(sb).expect("matmul gb")
            });
            vec![ga, gb]
        }))
    }

    /// `x · w + b` with `w` of shape (1,1,in,out) shared by every row of `x`
    /// and an optional bias of shape (1,1,1,out).
    pub fn linear(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
    ) -> Result<Var<T>, ShapeError> {
        let (sx, sw) = (x.shape(), w.shape());
        if batches(sw) != 1 || sw.h != sx.w {
            return Err(ShapeError::Mismatch {
                op: "linear",
                lhs: sx.dims(),
                rhs: sw.dims(),
            });
        }
        let mut out = matmul_kernel(x.value(), w.value(), false)?;
        if let Some(b) = b {
            if b.shape() != Shape::matrix(1, sw.w) {
                return Err(ShapeError::Mismatch {
                    op: "linear bias",
                    lhs: sw.dims(),
                    rhs: b.shape().dims(),
                });
            }
            let bd = b.value().data();
            for row in out.data_mut().chunks_mut(sw.w) {
                row.iter_mut().zip(bd).for_each(|(o, &v)| *o += v);
            }
        }
        self.count((sx.numel() * sw.w) as u64, out.len() as u64);
        let (xv, wv) = (x.rc(), w.rc());
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.record("linear", &inputs, out, move |g, needs| {
            let gx = needs[0].then(|| matmul_kernel(g, &wv, true).expect("linear gx"));
            let gw = needs[1].then(|| {
                let rows = xv.len() / sw.h.max(1);
                let x2 = (*xv).clone().reshape(Shape::matrix(rows, sw.h)).expect("x2");
                let g2 = g.clone().reshape(Shape::matrix(rows, sw.w)).expect("g2");
                matmul_tn(&x2, &g2, true).reshape(sw).expect("gw")
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut acc = vec![0.0f64; sw.w];
                    for row in g.data().chunks(sw.w) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                    }
                    Tensor::from_vec(
                        Shape::matrix(1, sw.w),
                        acc.into_iter().map(T::from_f64).collect(),
                    )
                    .expect("gb")
                }));
            }
            grads
        }))
    }

    /// Row softmax over the last axis of `scale · a`.
    pub fn softmax_rows(&mut self, a: &Var<T>, scale: f64) -> Result<Var<T>, ShapeError> {
        let out = softmax_kernel(a.value(), scale)?;
        let y = std::rc::Rc::new(out.clone());
        let cols = a.shape().w;
        Ok(self.record("softmax", &[a], out, move |g, _| {
            let mut gi = Vec::with_capacity(g.len());
            for (grow, yrow) in g.data().chunks(cols).zip(y.data().chunks(cols)) {
                let dot: f64 = grow
                    .iter()
                    .zip(yrow)
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum();
                gi.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| {
                    T::from_f64(scale * yv.as_f64() * (gv.as_f64() - dot))
                }));
            }
            vec![Some(Tensor::from_vec(y.shape(), gi).expect("softmax grad"))]
        }))
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
        Tensor::new(
            shape,
            FillSpec::Uniform {
                rng: &mut rng,
                lo: -1.0,
                hi: 1.0,
            },
        )
        .unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::<f64>::from_f64_slice([1, 1, 1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64_slice([1, 1, 1, 2], &[3.0, 4.0]).unwrap();
        assert_eq!(elementwise(BinaryOp::Add, &a, &b).unwrap().data(), &[4.0, 6.0]);
        let x = rand([2, 3, 4, 5], 1);
        let ones = Tensor::full(x.shape(), 1.0);
        assert_eq!(elementwise(BinaryOp::Mul, &x, &ones).unwrap(), x);
        let z = elementwise(BinaryOp::Sub, &x, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_broadcast_and_mismatch() {
        let a = rand([3, 2, 2, 2], 2);
        let b = rand([1, 2, 2, 2], 3);
        let out = elementwise(BinaryOp::Add, &a, &b).unwrap();
        assert_eq!(out.at(2, 1, 1, 0), a.at(2, 1, 1, 0) + b.at(0, 1, 1, 0));
        let bad = rand([1, 2, 2, 3], 4);
        assert!(elementwise(BinaryOp::Add, &a, &bad).is_err());
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::<f64>::from_f64_slice(Shape::matrix(2, 2), &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul_kernel(&eye, &eye, false).unwrap(), eye);
        let a = Tensor::<f64>::from_f64_slice(Shape::matrix(2, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64_slice(Shape::matrix(2, 1), &[1.0, 1.0]).unwrap();
        assert_eq!(matmul_kernel(&a, &b, false).unwrap().data(), &[3.0, 7.0]);
        let a = rand([1, 1, 5, 4], 5);
        let b = rand([1, 1, 4, 3], 6);
        let got = matmul_kernel(&a, &b, false).unwrap();
        let want = naive_matmul(a.data(), b.data(), 5, 4, 3);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = rand([1, 1, 2, 3], 1);
        let b = rand([1, 1, 2, 3], 2);
        assert!(matmul_kernel(&a, &b, false).is_err());
        assert!(matmul_kernel(&a, &b, true).is_ok());
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop(n in 1usize..=16, k in 1usize..=16, m in 1usize..=16, seed in any::<u64>()) {
            let a = rand([1, 1, n, k], seed);
            let b = rand([1, 1, k, m], seed ^ 0xABCD);
            let got = matmul_kernel(&a, &b, false).unwrap();
            let want = naive_matmul(a.data(), b.data(), n, k, m);
            for (g, w) in got.data().iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0));
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), cols in 1usize..40) {
            let mut rng = Rng::new(seed);
            let a = Tensor::<f64>::new([1, 1, 7, cols], FillSpec::Uniform { rng: &mut rng, lo: -1e3, hi: 1e3 }).unwrap();
            let s = softmax_kernel(&a, 1.0).unwrap();
            prop_assert!(s.is_finite());
            for row in s.data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let a = Tensor::<f64>::from_f64_slice(Shape::matrix(1, 3), &[0.0, 0.0, 0.0]).unwrap();
        for v in softmax_kernel(&a, 1.0).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = Tensor::<f64>::from_f64_slice(Shape::matrix(1, 2), &[1000.0, 0.0]).unwrap();
        assert_eq!(softmax_kernel(&a, 1.0).unwrap().data(), &[1.0, 0.0]);
        // exp(k) / (e + e^2 + e^3), evaluated independently.
        let a = Tensor::<f64>::from_f64_slice(Shape::matrix(1, 3), &[1.0, 2.0, 3.0]).unwrap();
        let s = softmax_kernel(&a, 1.0).unwrap();
        for (v, w) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((v - w).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_matmul_chain_passes_gradcheck() {
        let x = rand([1, 1, 2, 2], 11);
        let w = Var::constant(rand([1, 1, 2, 2], 12));
        let report = fd_gradcheck(
            move |t, x| {
                let s = t.softmax_rows(x, 0.7)?;
                let m = t.matmul(&s, &w)?;
                let sq = t.mul(&m, &m)?;
                Ok(t.sum(&sq))
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let a = rand([2, 1, 3, 4], 21);
        let b = Var::constant(rand([1, 1, 4, 3], 22));
        let bias = Var::constant(rand([1, 1, 1, 3], 23));
        let other = Var::constant(rand([2, 1, 3, 4], 24));
        let r = fd_gradcheck(
            move |t, x| {
                let y = t.linear(x, &b, Some(&bias))?;
                let z = t.matmul_nt(&y, &y)?;
                let p = t.mul(x, &other)?;
                let q = t.sub(&p, x)?;
                let q = t.scale(&q, 0.3);
                let s1 = t.sum(&z);
                let s2 = t.mean(&q);
                t.add(&s1, &s2)
            },
            &a,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn weight_gradients_of_shared_matmul() {
        let x = Var::constant(rand([3, 1, 4, 2], 31));
        let w = rand([1, 1, 2, 5], 32);
        let r = fd_gradcheck(
            move |t, w| {
                let y = t.matmul(&x, w)?;
                let y2 = t.mul(&y, &y)?;
                Ok(t.sum(&y2))
            },
            &w,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }
}
