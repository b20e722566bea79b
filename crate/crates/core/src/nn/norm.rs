//! Channel layer normalization and the exact GELU.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::ShapeError;
use crate::tensor::{Scalar, Shape, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

struct NormStats {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn normalize<T: Scalar>(x: &Tensor<T>, eps: f64) -> NormStats {
    let s = x.shape();
    let plane = s.plane();
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; s.n * plane];
    let d = x.data();
    for n in 0..s.n {
        for p in 0..plane {
            let at = |c: usize| (n * s.c + c) * plane + p;
            let mean = (0..s.c).map(|c| d[at(c)].as_f64()).sum::<f64>() / s.c as f64;
            let var = (0..s.c)
                .map(|c| (d[at(c)].as_f64() - mean).powi(2))
                .sum::<f64>()
                / s.c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[n * plane + p] = inv;
            for c in 0..s.c {
                xhat[at(c)] = (d[at(c)].as_f64() - mean) * inv;
            }
        }
    }
    NormStats { xhat, inv_std }
}

fn check_affine(s: Shape, gamma: Shape, beta: Shape) -> Result<(), ShapeError> {
    let want = Shape::new(1, s.c, 1, 1);
    if gamma != want || beta != want {
        return Err(ShapeError::Mismatch {
            op: "layer_norm",
            lhs: gamma.dims(),
            rhs: want.dims(),
        });
    }
    Ok(())
}

fn affine<T: Scalar>(stats: &NormStats, s: Shape, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let plane = s.plane().max(1);
    let data = stats
        .xhat
        .iter()
        .enumerate()
        .map(|(i, &xh)| {
            let c = (i / plane) % s.c;
            T::from_f64(gamma.data()[c].as_f64() * xh + beta.data()[c].as_f64())
        })
        .collect();
    Tensor::from_vec(s, data).expect("layer_norm output")
}

/// Normalize across channels at every spatial position, then apply a
/// per-channel affine map. `gamma` and `beta` have shape `(1, C, 1, 1)`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, ShapeError> {
    let s = x.shape();
    check_affine(s, gamma.shape(), beta.shape())?;
    Ok(affine(&normalize(x, eps), s, gamma, beta))
}

impl<T: Scalar> Tape<T> {
    pub fn layer_norm(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>, ShapeError> {
        let s = x.shape();
        check_affine(s, gamma.shape(), beta.shape())?;
        let stats = normalize(x.value(), eps);
        let out = affine(&stats, s, gamma.value(), beta.value());
        let stats = Rc::new(stats);
        let gv = gamma.rc();
        Ok(self.record("layer_norm", &[x, gamma, beta], out, move |g, needs| {
            let plane = s.plane();
            let gd = g.data();
            let gam = gv.data();
            let mut gx = needs[0].then(|| vec![T::zero(); gd.len()]);
            let mut ggamma = vec![0.0f64; s.c];
            let mut gbeta = vec![0.0f64; s.c];
            for n in 0..s.n {
                for p in 0..plane {
                    let at = |c: usize| (n * s.c + c) * plane + p;
                    let mut mean_gh = 0.0;
                    let mut mean_gh_xh = 0.0;
                    for c in 0..s.c {
                        let go = gd[at(c)].as_f64();
                        let xh = stats.xhat[at(c)];
                        ggamma[c] += go * xh;
                        gbeta[c] += go;
                        let gh = go * gam[c].as_f64();
                        mean_gh += gh;
                        mean_gh_xh += gh * xh;
                    }
                    if let Some(gx) = gx.as_mut() {
                        mean_gh /= s.c as f64;
                        mean_gh_xh /= s.c as f64;
                        let inv = stats.inv_std[n * plane + p];
                        for c in 0..s.c {
                            let gh = gd[at(c)].as_f64() * gam[c].as_f64();
                            let xh = stats.xhat[at(c)];
                            gx[at(c)] = T::from_f64(inv * (gh - mean_gh - xh * mean_gh_xh));
                        }
                    }
                }
            }
            let affine_shape = Shape::new(1, s.c, 1, 1);
            let to_t = |v: Vec<f64>| {
                Tensor::from_vec(affine_shape, v.into_iter().map(T::from_f64).collect())
                    .expect("ln affine grad")
            };
            vec![
                gx.map(|gx| Tensor::from_vec(s, gx).expect("ln gx")),
                needs[1].then(|| to_t(ggamma)),
                needs[2].then(|| to_t(gbeta)),
            ]
        }))
    }

    pub fn gelu(&mut self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(|v| T::from_f64(gelu_scalar(v.as_f64())));
        let xv = x.rc();
        self.record("gelu", &[x], out, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gv, &xv)| T::from_f64(gv.as_f64() * gelu_grad_scalar(xv.as_f64())))
                .collect();
            vec![Some(Tensor::from_vec(xv.shape(), data).expect("gelu grad"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::rng::Rng;
    use crate::tensor::FillSpec;
    use proptest::prelude::*;

    fn unit_affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full([1, c, 1, 1], 1.0), Tensor::zeros([1, c, 1, 1]))
    }

    #[test]
    fn constant_channels_give_beta() {
        let x = Tensor::<f64>::full([1, 4, 3, 3], 2.5);
        let gamma = Tensor::full([1, 4, 1, 1], 3.0);
        let beta = Tensor::from_f64_slice([1, 4, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = layer_norm(&x, &gamma, &beta, LN_EPS).unwrap();
        for c in 0..4 {
            for p in 0..9 {
                assert_eq!(y.data()[c * 9 + p], beta.data()[c]);
            }
        }
    }

    #[test]
    fn two_channel_closed_form() {
        // mean 2, variance 1: (x - 2) / sqrt(1 + 1e-6).
        let x = Tensor::<f64>::from_f64_slice([1, 2, 1, 1], &[1.0, 3.0]).unwrap();
        let (g, b) = unit_affine(2);
        let y = layer_norm(&x, &g, &b, LN_EPS).unwrap();
        let k = 1.0 / (1.0 + 1e-6f64).sqrt();
        assert!((y.data()[0] + k).abs() < 1e-12);
        assert!((y.data()[1] - k).abs() < 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn unit_affine_output_is_standardized(seed in any::<u64>(), c in 2usize..12) {
            let mut rng = Rng::new(seed);
            let x = Tensor::<f64>::new([2, c, 3, 2], FillSpec::Uniform { rng: &mut rng, lo: -5.0, hi: 5.0 }).unwrap();
            let (g, b) = unit_affine(c);
            let y = layer_norm(&x, &g, &b, LN_EPS).unwrap();
            let s = x.shape();
            for n in 0..s.n { for p in 0..s.plane() {
                let xs: Vec<f64> = (0..c).map(|ch| x.data()[(n * c + ch) * s.plane() + p]).collect();
                let xm = xs.iter().sum::<f64>() / c as f64;
                let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / c as f64;
                prop_assume!(xv >= 1e-2);
                let ys: Vec<f64> = (0..c).map(|ch| y.data()[(n * c + ch) * s.plane() + p]).collect();
                let m = ys.iter().sum::<f64>() / c as f64;
                let v = ys.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64;
                prop_assert!(m.abs() < 1e-6);
                prop_assert!((v - 1.0).abs() < 1e-3);
            }}
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // 1 · Φ(1) with Φ(1) = 0.841344746...
        assert!((gelu_scalar(1.0) - 0.8413447).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = Rng::new(3);
        let mut r = |shape: [usize; 4]| Tensor::<f64>::new(shape, FillSpec::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 }).unwrap();
        let x = r([2, 3, 2, 2]);
        let gamma = r([1, 3, 1, 1]);
        let beta = r([1, 3, 1, 1]);
        let w = Var::constant(r([2, 3, 2, 2]));
        let rep = check_gradients(
            |t, xs| {
                let y = t.layer_norm(&xs[0], &xs[1], &xs[2], LN_EPS)?;
                let y = t.mul(&y, &w)?;
                Ok(t.sum(&y))
            },
            &[x, gamma, beta],
            1e-5,
            1e-5,
            |_, _| {},
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
