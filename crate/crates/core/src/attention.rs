//! Windowed self-attention and the multi-level head cascade.
//!
//! The cascade splits channels into `H` heads. Head `i` sees its slice
//! pooled `i` times; heads run from the most pooled upward, and each head's
//! output is upsampled and added to the input of the head above it before
//! that head attends. Outputs are restored to full size, concatenated,
//! merged by a 1×1 convolution, passed through GELU and used to modulate the
//! module input.

use crate::autodiff::{Tape, Var};
use crate::error::{ConfigError, ShapeError};
use crate::nn::{ConvSpec, PoolMode, UpsampleMode};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeMode {
    #[default]
    Lepe,
    Rpe,
    None,
}

impl PeMode {
    pub fn name(self) -> &'static str {
        match self {
            PeMode::Lepe => "lepe",
            PeMode::Rpe => "rpe",
            PeMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lepe" => Some(PeMode::Lepe),
            "rpe" => Some(PeMode::Rpe),
            "none" => Some(PeMode::None),
            _ => None,
        }
    }
}

/// Switches for every architectural ablation of the cascade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationFlags {
    pub low_to_high: bool,
    pub pooling: bool,
    pub pool_mode: PoolMode,
    pub upsample_mode: UpsampleMode,
    /// 1×1 merge convolution after concatenation.
    pub aggregation: bool,
    pub gelu: bool,
    pub modulate: bool,
    pub pe_mode: PeMode,
    /// Biases on the q/k/v and output projections.
    pub attn_bias: bool,
    /// Scale logits by `1/√d`.
    pub scale_logits: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            low_to_high: true,
            pooling: true,
            pool_mode: PoolMode::Avg,
            upsample_mode: UpsampleMode::Nearest,
            aggregation: true,
            gelu: true,
            modulate: true,
            pe_mode: PeMode::Lepe,
            attn_bias: true,
            scale_logits: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadPlan {
    pub heads: usize,
    pub per_head: usize,
    pub depth: usize,
    pub window: usize,
}

impl HeadPlan {
    pub fn new(channels: usize, heads: usize, depth: usize, window: usize) -> Result<Self, ConfigError> {
        if heads == 0 || channels % heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        if !(1..=3).contains(&depth) {
            return Err(ConfigError::Invalid(format!("depth {depth} outside 1..=3")));
        }
        if window == 0 {
            return Err(ConfigError::Invalid("window must be >= 1".into()));
        }
        Ok(HeadPlan {
            heads,
            per_head: channels / heads,
            depth,
            window,
        })
    }

    /// Number of 2× poolings applied to head `i`.
    pub fn pool_level(&self, i: usize, pooling: bool) -> usize {
        if pooling {
            i
        } else {
            0
        }
    }

    /// Halvings the input must survive while staying window-aligned.
    pub fn levels(&self, pooling: bool) -> usize {
        if pooling {
            self.heads
        } else {
            1
        }
    }
}

/// Positional-encoding parameters of one attention layer.
#[derive(Debug, Clone)]
pub enum PeParams<T> {
    /// Depthwise 3×3 kernel (d,1,3,3) and bias (1,d,1,1) applied to V.
    Lepe { weight: Var<T>, bias: Var<T> },
    /// (1,1,1,(2M−1)²) logit bias table.
    Rpe { table: Var<T> },
    None,
}

/// Projection weights are (1,1,d,d) and biases (1,1,1,d).
#[derive(Debug, Clone)]
pub struct AttnParams<T> {
    pub wq: Var<T>,
    pub wk: Var<T>,
    pub wv: Var<T>,
    pub wo: Var<T>,
    pub bq: Option<Var<T>>,
    pub bk: Option<Var<T>>,
    pub bv: Option<Var<T>>,
    pub bo: Option<Var<T>>,
    pub pe: PeParams<T>,
}

impl<T: Scalar> AttnParams<T> {
    pub fn pe_mode(&self) -> PeMode {
        match self.pe {
            PeParams::Lepe { .. } => PeMode::Lepe,
            PeParams::Rpe { .. } => PeMode::Rpe,
            PeParams::None => PeMode::None,
        }
    }
}

/// All parameters of one cascade: `layers[head][depth]` plus the merge conv.
#[derive(Debug, Clone)]
pub struct LmltParams<T> {
    pub layers: Vec<Vec<AttnParams<T>>>,
    pub merge: Option<(Var<T>, Var<T>)>,
}

fn logit_scale(d: usize, scale_logits: bool) -> f64 {
    if scale_logits {
        1.0 / (d as f64).sqrt()
    } else {
        1.0
    }
}

/// Self-attention inside non-overlapping `m × m` windows of `x` (n, d, h, w).
///
/// MACs of the projections and attention products are counted under
/// `{scope}.attn`, the positional-encoding conv under `{scope}.lepe`.
pub fn window_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    p: &AttnParams<T>,
    m: usize,
    scale_logits: bool,
    scope: &str,
) -> Result<Var<T>, ShapeError> {
    window_attention_parts(tape, x, p, m, scale_logits, scope).map(|(out, _)| out)
}

/// Row-stochastic attention matrices, (n·N, 1, M², M²), for inspection.
pub fn attention_weights<T: Scalar>(
    x: &Var<T>,
    p: &AttnParams<T>,
    m: usize,
    scale_logits: bool,
) -> Result<Var<T>, ShapeError> {
    let mut tape = Tape::new();
    window_attention_parts(&mut tape, x, p, m, scale_logits, "attn").map(|(_, a)| a)
}

fn window_attention_parts<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    p: &AttnParams<T>,
    m: usize,
    scale_logits: bool,
    scope: &str,
) -> Result<(Var<T>, Var<T>), ShapeError> {
    let s = x.shape();
    let d = s.c;
    tape.set_scope(format!("{scope}.attn"));
    let tok = tape.window_partition(x, m)?;
    let q = tape.linear(&tok, &p.wq, p.bq.as_ref())?;
    let k = tape.linear(&tok, &p.wk, p.bk.as_ref())?;
    let v = tape.linear(&tok, &p.wv, p.bv.as_ref())?;
    let logits = tape.matmul_nt(&q, &k)?;
    let scale = logit_scale(d, scale_logits);
    let attn = match &p.pe {
        PeParams::Rpe { table } => {
            let scaled = tape.scale(&logits, scale);
            let bias = tape.relative_bias(table, m)?;
            let biased = tape.add(&scaled, &bias)?;
            tape.softmax_rows(&biased, 1.0)?
        }
        _ => tape.softmax_rows(&logits, scale)?,
    };
    let mut o = tape.matmul(&attn, &v)?;
    if let PeParams::Lepe { weight, bias } = &p.pe {
        tape.set_scope(format!("{scope}.lepe"));
        let img = tape.tokens_to_image(&v, m)?;
        let conv = tape.conv2d(&img, weight, Some(bias), ConvSpec::depthwise(d, 3))?;
        let back = tape.image_to_tokens(&conv);
        o = tape.add(&o, &back)?;
        tape.set_scope(format!("{scope}.attn"));
    }
    let out = tape.linear(&o, &p.wo, p.bo.as_ref())?;
    let out = tape.window_reverse(&out, s.n, s.h, s.w, m)?;
    Ok((out, attn))
}

/// The multi-level cascade on a grid-aligned `x` (n, D, h, w).
pub fn lmlt_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    plan: &HeadPlan,
    params: &LmltParams<T>,
    flags: &AblationFlags,
    scope: &str,
) -> Result<Var<T>, ShapeError> {
    let s = x.shape();
    if s.c != plan.heads * plan.per_head {
        return Err(ShapeError::invalid(
            "lmlt_forward",
            format!("{} channels, plan expects {}", s.c, plan.heads * plan.per_head),
        ));
    }
    let align = plan.window << (plan.levels(flags.pooling) - 1);
    if s.h % align != 0 || s.w % align != 0 {
        return Err(ShapeError::invalid(
            "lmlt_forward",
            format!("{}x{} is not aligned to {align}", s.h, s.w),
        ));
    }
    if params.layers.len() != plan.heads || params.layers.iter().any(|l| l.len() != plan.depth) {
        return Err(ShapeError::invalid("lmlt_forward", "parameter layout does not match the head plan"));
    }

    let mut inputs = Vec::with_capacity(plan.heads);
    for i in 0..plan.heads {
        let mut f = tape.slice_channels(x, i * plan.per_head, plan.per_head)?;
        for _ in 0..plan.pool_level(i, flags.pooling) {
            f = tape.pool_half(&f, flags.pool_mode)?;
        }
        inputs.push(f);
    }

    let mut outputs: Vec<Option<Var<T>>> = vec![None; plan.heads];
    let mut below: Option<Var<T>> = None;
    for i in (0..plan.heads).rev() {
        let mut f = inputs[i].clone();
        if let (true, Some(low)) = (flags.low_to_high, below.as_ref()) {
            let up = if flags.pooling {
                tape.upsample2x(low, flags.upsample_mode)
            } else {
                low.clone()
            };
            f = tape.add(&f, &up)?;
        }
        for (l, layer) in params.layers[i].iter().enumerate() {
            f = window_self_attention(
                tape,
                &f,
                layer,
                plan.window,
                flags.scale_logits,
                &format!("{scope}.head{i}.layer{l}"),
            )?;
        }
        below = Some(f.clone());
        outputs[i] = Some(f);
    }

    let mut restored = Vec::with_capacity(plan.heads);
    for (i, out) in outputs.into_iter().enumerate() {
        let mut f = out.expect("every head ran");
        for _ in 0..plan.pool_level(i, flags.pooling) {
            f = tape.upsample2x(&f, flags.upsample_mode);
        }
        restored.push(f);
    }
    let mut y = if restored.len() == 1 {
        restored.pop().expect("one head")
    } else {
        tape.concat_channels(&restored)?
    };
    if flags.aggregation {
        let (w, b) = params
            .merge
            .as_ref()
            .ok_or_else(|| ShapeError::invalid("lmlt_forward", "aggregation enabled without merge weights"))?;
        tape.set_scope(format!("{scope}.merge"));
        y = tape.conv2d(&y, w, Some(b), ConvSpec::dense(s.c, s.c, 1))?;
    }
    if flags.gelu {
        y = tape.gelu(&y);
    }
    if flags.modulate {
        y = tape.mul(&y, x)?;
    }
    Ok(y)
}

/// Pooled grid size `⌈h/2^i⌉·⌈w/2^i⌉`, i.e. `h·w/4^i` on an aligned grid.
fn pooled_pixels(h: u64, w: u64, i: u32) -> u64 {
    let f = 1u64 << i;
    h.div_ceil(f) * w.div_ceil(f)
}

/// MACs of one head at pooling level `i`: `4·P·d² + 2·M²·P·d` with
/// `P = h·w/4^i` and `d = D/head`. Non-divisible sizes are rounded up to the
/// padded grid.
pub fn flops_lmlt_head(h: u64, w: u64, dim: u64, head: u64, m: u64, i: u32) -> u64 {
    assert!(head >= 1 && dim % head == 0, "D must divide into heads");
    let d = dim / head;
    let p = pooled_pixels(h, w, i);
    4 * p * d * d + 2 * m * m * p * d
}

/// MACs of plain window self-attention over all `D` channels.
pub fn flops_wsa(h: u64, w: u64, dim: u64, m: u64) -> u64 {
    4 * h * w * dim * dim + 2 * m * m * h * w * dim
}
