//! Fast invariant suite behind `lmlt selftest`.
//!
//! Every check takes a `fault` switch that perturbs the quantity under test,
//! so the runner itself can be shown to catch a failure.

use crate::analysis::{param_count, verify_flops};
use crate::attention::{attention_weights, flops_lmlt_head, flops_wsa, AttnParams, PeParams};
use crate::autodiff::{check_gradients, Tape, Var};
use crate::metrics::{cubic_weights, psnr_planes, rgb_to_y_pixel, ssim_planes};
use crate::model::{
    init_weights, lhs_block_forward, upscale, upscale_parallel, weights_from_bytes, weights_to_bytes, ModelConfig,
    ParamVars, Preset,
};
use crate::nn::{window_partition, window_reverse, ConvSpec};
use crate::rng::Rng;
use crate::tensor::{FillSpec, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(bool) -> Result<String, String>;

/// Every invariant, by name.
pub const CHECKS: &[(&str, Check)] = &[
    ("tensor.gradcheck", gradcheck),
    ("nn.window_roundtrip", window_roundtrip),
    ("attention.row_stochastic", row_stochastic),
    ("attention.dominance", dominance),
    ("model.residual_identity", residual_identity),
    ("model.param_closure", param_closure),
    ("model.scale_contract", scale_contract),
    ("model.parallel_determinism", parallel_determinism),
    ("model.weights_roundtrip", weights_roundtrip),
    ("analysis.flops_verification", flops_verification),
    ("metrics.identity", metric_identity),
    ("metrics.bicubic_partition", bicubic_partition),
    ("metrics.luma_affine", luma_affine),
];

pub fn check_names() -> impl Iterator<Item = &'static str> {
    CHECKS.iter().map(|(n, _)| *n)
}

/// Run every check, injecting a fault into the one named `fault`.
pub fn run_selftest(fault: Option<&str>) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f(fault == Some(*name)) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

fn rand64(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::new(shape, FillSpec::Uniform { rng: &mut rng, lo, hi }).expect("small shape")
}

fn small_cfg() -> ModelConfig {
    let mut c = ModelConfig::preset(Preset::Tiny, 2);
    c.channels = 8;
    c.heads = 2;
    c.blocks = 1;
    c.window = 4;
    c
}

fn gradcheck(fault: bool) -> Result<String, String> {
    let x = rand64([1, 2, 5, 5], 1, -1.0, 1.0);
    let w = rand64([3, 2, 3, 3], 2, -0.5, 0.5);
    let mut spec = ConvSpec::dense(2, 3, 3);
    spec.bias = false;
    let r = check_gradients(
        |t, xs| {
            let y = t.conv2d(&xs[0], &xs[1], None, spec)?;
            let y = t.gelu(&y);
            Ok(t.sum(&y))
        },
        &[x, w],
        1e-5,
        1e-6,
        |i, g| {
            if fault && i == 1 {
                g.data_mut()[0] += 1e-2;
            }
        },
    )
    .map_err(|e| e.to_string())?;
    let msg = format!("max rel err {:.2e} over {} coordinates", r.max_rel_err, r.checked);
    if r.pass {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn window_roundtrip(fault: bool) -> Result<String, String> {
    let x = rand64([2, 3, 12, 8], 3, -1.0, 1.0);
    let mut t = window_partition(&x, 4).map_err(|e| e.to_string())?;
    if fault {
        t.data_mut()[0] += 1.0;
    }
    let back = window_reverse(&t, 2, 12, 8, 4).map_err(|e| e.to_string())?;
    if back == x {
        Ok("partition then reverse is the identity".into())
    } else {
        Err(format!("roundtrip differs by {}", back.max_abs_diff(&x)))
    }
}

fn attn_params(d: usize, seed: u64) -> AttnParams<f64> {
    let w = |s| Var::constant(rand64([1, 1, d, d], s, -0.8, 0.8));
    let b = |s| Some(Var::constant(rand64([1, 1, 1, d], s, -0.2, 0.2)));
    AttnParams {
        wq: w(seed),
        wk: w(seed + 1),
        wv: w(seed + 2),
        wo: w(seed + 3),
        bq: b(seed + 4),
        bk: b(seed + 5),
        bv: b(seed + 6),
        bo: b(seed + 7),
        pe: PeParams::None,
    }
}

fn row_stochastic(fault: bool) -> Result<String, String> {
    let x = Var::constant(rand64([1, 4, 8, 8], 4, -2.0, 2.0));
    let a = attention_weights(&x, &attn_params(4, 10), 4, true).map_err(|e| e.to_string())?;
    let mut v = a.value().clone();
    if fault {
        v.data_mut()[0] += 1e-3;
    }
    let row = v.shape().w;
    let worst = v
        .data()
        .chunks(row)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let nonneg = v.data().iter().all(|&p| p >= 0.0);
    if worst < 1e-12 && nonneg {
        Ok(format!("rows sum to 1 within {worst:.1e}"))
    } else {
        Err(format!("row sum off by {worst:.1e}"))
    }
}

fn dominance(fault: bool) -> Result<String, String> {
    let mut points = 0;
    for &(h, w) in &[(64u64, 64u64), (128, 96), (360, 640)] {
        for &dim in &[36u64, 60, 84] {
            for &m in &[4u64, 8, 16] {
                for heads in [1u64, 2, 3, 4, 6] {
                    if dim % heads != 0 {
                        continue;
                    }
                    let lmlt: u64 = (0..heads as u32).map(|i| flops_lmlt_head(h, w, dim, heads, m, i)).sum();
                    let flat: u64 = (0..heads).map(|_| flops_lmlt_head(h, w, dim, heads, m, 0)).sum();
                    let wsa = flops_wsa(h, w, dim, m) + u64::from(fault);
                    let ok = if heads == 1 { lmlt == wsa } else { lmlt < wsa && flat < wsa };
                    if !ok {
                        return Err(format!("H={heads} D={dim} M={m} at {h}x{w}: {lmlt} vs {wsa}"));
                    }
                    points += 1;
                }
            }
        }
    }
    Ok(format!("{points} grid points"))
}

fn residual_identity(fault: bool) -> Result<String, String> {
    let mut cfg = small_cfg();
    cfg.flags.modulate = false;
    let mut ws = init_weights(&cfg, 5);
    for (name, t) in ws.iter_mut() {
        if name.contains(".lmlt.") || name.contains(".ccm.") {
            t.data_mut().fill(0.0);
        }
    }
    if fault {
        ws.get_mut("block0.ccm.conv2.bias").expect("bias").data_mut()[0] = 1e-3;
    }
    let p = ParamVars::<f64>::constants(&ws);
    let x = Var::constant(rand64([1, 8, 16, 16], 6, -1.0, 1.0));
    let mut tape = Tape::new();
    let y = lhs_block_forward(&mut tape, &x, &p, &cfg, 0).map_err(|e| e.to_string())?;
    if y.value() == x.value() {
        Ok("zeroed block returns its input exactly".into())
    } else {
        Err(format!("block moved input by {}", y.value().max_abs_diff(x.value())))
    }
}

fn param_closure(fault: bool) -> Result<String, String> {
    for p in Preset::ALL {
        for s in 2..=4 {
            let cfg = ModelConfig::preset(p, s);
            let analytic = param_count(&cfg).map_err(|e| e.to_string())? + u64::from(fault);
            let real = init_weights(&cfg, 0).numel() as u64;
            if analytic != real {
                return Err(format!("{} x{s}: analytic {analytic} vs materialized {real}", p.name()));
            }
        }
    }
    Ok("analytic count equals materialized count for every preset".into())
}

fn scale_contract(fault: bool) -> Result<String, String> {
    for s in 2..=4 {
        let mut cfg = small_cfg();
        cfg.scale = s;
        let ws = init_weights(&cfg, 7);
        for (h, w) in [(8, 8), (9, 13), (17, 10)] {
            let x = synthetic(h, w);
            let y = upscale(&x, &ws, &cfg).map_err(|e| e.to_string())?;
            let want = (s * h + usize::from(fault), s * w);
            if (y.shape().h, y.shape().w) != want {
                return Err(format!("x{s} on {h}x{w} gave {}x{}", y.shape().h, y.shape().w));
            }
        }
    }
    Ok("outputs are exactly s× the input".into())
}

fn synthetic(h: usize, w: usize) -> Tensor<f32> {
    crate::model::synthetic_image(h, w, (h * 31 + w) as u64)
}

fn parallel_determinism(fault: bool) -> Result<String, String> {
    let cfg = small_cfg();
    let ws = init_weights(&cfg, 8);
    let x = Tensor::concat_batch(&[synthetic(12, 9), synthetic(12, 9)]).map_err(|e| e.to_string())?;
    let a = upscale(&x, &ws, &cfg).map_err(|e| e.to_string())?;
    let mut b = upscale_parallel(&x, &ws, &cfg).map_err(|e| e.to_string())?;
    if fault {
        b.data_mut()[0] = f32::from_bits(b.data()[0].to_bits() ^ 1);
    }
    let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    if same {
        Ok("serial and parallel forwards are bit-identical".into())
    } else {
        Err("serial and parallel forwards differ".into())
    }
}

fn weights_roundtrip(fault: bool) -> Result<String, String> {
    let ws = init_weights(&small_cfg(), 9);
    let bytes = weights_to_bytes(&ws);
    let mut back = weights_from_bytes(&bytes).map_err(|e| e.to_string())?;
    if fault {
        back.get_mut("tail_conv.bias").expect("bias").data_mut()[0] += 1.0;
    }
    if back == ws && weights_to_bytes(&back) == bytes && bytes == weights_to_bytes(&init_weights(&small_cfg(), 9)) {
        Ok(format!("{} bytes, byte-identical", bytes.len()))
    } else {
        Err("weights changed across save/load".into())
    }
}

fn flops_verification(fault: bool) -> Result<String, String> {
    let v = verify_flops(&small_cfg(), 16, 16).map_err(|e| e.to_string())?;
    let counted = v.counted + if fault { v.counted / 10 } else { 0 };
    let rel = v.analytic.abs_diff(counted) as f64 / v.analytic as f64;
    if rel <= 0.01 {
        Ok(format!("{} MACs analytic, {} counted", v.analytic, counted))
    } else {
        Err(format!("analytic {} vs counted {counted}", v.analytic))
    }
}

fn metric_identity(fault: bool) -> Result<String, String> {
    let (w, h) = (24, 20);
    let a: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 251) as f64).collect();
    let mut b = a.clone();
    if fault {
        b[w * 10 + 10] += 1.0;
    }
    let p = psnr_planes(&a, &b, w, h, 2).map_err(|e| e.to_string())?;
    let s = ssim_planes(&a, &b, w, h, 2).map_err(|e| e.to_string())?;
    if p.is_infinite() && s == 1.0 {
        Ok("PSNR inf and SSIM 1 on identical images".into())
    } else {
        Err(format!("PSNR {p}, SSIM {s}"))
    }
}

fn bicubic_partition(fault: bool) -> Result<String, String> {
    let worst = (0..=1000)
        .map(|i| {
            let w = cubic_weights(i as f64 / 1000.0);
            (w.iter().sum::<f64>() - 1.0).abs()
        })
        .fold(0.0, f64::max)
        + if fault { 1e-6 } else { 0.0 };
    if worst < 1e-9 {
        Ok(format!("weights sum to 1 within {worst:.1e}"))
    } else {
        Err(format!("weights sum off by {worst:.1e}"))
    }
}

fn luma_affine(fault: bool) -> Result<String, String> {
    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.0, 1.0));
        let q: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.0, 1.0));
        let a = rng.uniform(0.0, 1.0);
        let mix: Vec<f64> = (0..3).map(|i| a * p[i] + (1.0 - a) * q[i]).collect();
        let lhs = rgb_to_y_pixel(mix[0], mix[1], mix[2]);
        let rhs = a * rgb_to_y_pixel(p[0], p[1], p[2]) + (1.0 - a) * rgb_to_y_pixel(q[0], q[1], q[2]);
        worst = worst.max((lhs - rhs).abs());
    }
    if fault {
        worst += 1e-3;
    }
    if worst < 1e-6 {
        Ok(format!("affine within {worst:.1e}"))
    } else {
        Err(format!("affine error {worst:.1e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        for o in run_selftest(None) {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn every_fault_is_caught_by_its_own_check() {
        for name in check_names() {
            let out = run_selftest(Some(name));
            let failed: Vec<_> = out.iter().filter(|o| !o.passed).map(|o| o.name).collect();
            assert_eq!(failed, vec![name]);
        }
    }
}
