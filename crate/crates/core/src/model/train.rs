//! Toy-scale training: mean-L1 loss, Adam, cosine-annealed learning rate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{ForwardError, TrainError};
use crate::metrics::resize_tensor;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

use super::{init_weights, model_forward, ModelConfig, ParamVars, WeightStore};

/// Cosine annealing from `lr` at step 0 towards `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let lr_min = lr_min.min(lr);
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Bias-corrected Adam over a [`WeightStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.99, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, ws: &mut WeightStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, w) in ws.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *wi = (*wi as f64 - update) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 2000, lr: 5e-3, lr_min: 1e-5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub weights: WeightStore,
    /// Loss before each update.
    pub losses: Vec<f64>,
}

impl TrainResult {
    /// Mean of the last `window` losses.
    pub fn smoothed_final(&self, window: usize) -> f64 {
        let n = self.losses.len();
        let tail = &self.losses[n.saturating_sub(window.max(1))..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// The single-patch overfitting setup: D=16, two blocks, four heads on 4×4
/// windows, so a 32×32 patch needs no padding.
pub fn toy_config() -> ModelConfig {
    let mut c = ModelConfig::preset(super::Preset::Tiny, 2);
    c.channels = 16;
    c.blocks = 2;
    c.window = 4;
    c
}

/// Smooth deterministic RGB test image in [0, 1], (1, 3, h, w).
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| [rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6), rng.uniform(0.0, 2.0 * PI), rng.uniform(0.05, 0.2)])
        .collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.5 + 0.15 * (x as f64 / w as f64 - 0.5) * (c as f64 - 1.0);
                for [fx, fy, ph, amp] in &waves[3 * c..3 * c + 3] {
                    v += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("synthetic shape")
}

/// An (LR, HR) pair: a synthetic HR image and its bicubic downscale.
pub fn toy_pair(lr_size: usize, scale: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let hr = synthetic_image(lr_size * scale, lr_size * scale, seed);
    let lr = resize_tensor(&hr, lr_size, lr_size);
    (lr, hr)
}

fn shape_err(e: ForwardError) -> TrainError {
    match e {
        ForwardError::Shape(s) => TrainError::Shape(s),
        ForwardError::Config(c) => TrainError::Config(c),
    }
}

/// Fit `cfg` to `data` from `init_weights(cfg, opts.seed)`.
pub fn train_toy(
    cfg: &ModelConfig,
    data: &[(Tensor<f32>, Tensor<f32>)],
    opts: &TrainOptions,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    let mut weights = init_weights(cfg, opts.seed);
    weights.meta.insert("seed".into(), opts.seed.to_string());
    let lr_batch: Vec<_> = data.iter().map(|(l, _)| l.clone()).collect();
    let hr_batch: Vec<_> = data.iter().map(|(_, h)| h.clone()).collect();
    let lr_img = Var::constant(Tensor::concat_batch(&lr_batch)?);
    let hr_img = Var::constant(Tensor::concat_batch(&hr_batch)?);
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut tape = Tape::<f32>::new();
        let params = ParamVars::leaves(&weights, &mut tape);
        let out = model_forward(&mut tape, &lr_img, &params, cfg).map_err(shape_err)?;
        let diff = tape.sub(&out, &hr_img)?;
        let abs = tape.abs(&diff);
        let loss = tape.mean(&abs);
        let l = loss.value().data()[0] as f64;
        if !l.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        losses.push(l);
        tape.backward(&loss)?;
        let grads: BTreeMap<String, Tensor<f32>> =
            params.iter().map(|(k, v)| (k.clone(), tape.grad_or_zeros(v))).collect();
        adam.step(&mut weights, &grads, cosine_lr(step, opts.steps, opts.lr, opts.lr_min));
    }
    Ok(TrainResult { weights, losses })
}
