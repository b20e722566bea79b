//! Network assembly: shallow conv, LHS blocks, reconstruction.

use std::collections::BTreeMap;

use crate::attention::{lmlt_forward, AttnParams, LmltParams, PeMode, PeParams};
use crate::autodiff::{Tape, Var};
use crate::error::{ConfigError, ForwardError, ShapeError};
use crate::nn::{ConvSpec, LN_EPS};
use crate::tensor::{Scalar, Tensor};

use super::{ModelConfig, WeightStore};

/// Parameters lifted onto a tape, by name.
#[derive(Debug, Clone, Default)]
pub struct ParamVars<T> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> ParamVars<T> {
    /// Untracked copies of every weight, for inference.
    pub fn constants(ws: &WeightStore) -> Self {
        ParamVars {
            vars: ws.iter().map(|(k, t)| (k.clone(), Var::constant(t.cast()))).collect(),
        }
    }

    /// Tracked leaves for every weight, for training and gradient checks.
    pub fn leaves(ws: &WeightStore, tape: &mut Tape<T>) -> Self {
        ParamVars {
            vars: ws.iter().map(|(k, t)| (k.clone(), tape.leaf(t.cast()))).collect(),
        }
    }

    pub fn from_map(vars: BTreeMap<String, Var<T>>) -> Self {
        ParamVars { vars }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<T>)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>, ConfigError> {
        self.vars
            .get(name)
            .ok_or_else(|| ConfigError::WeightMismatch(format!("missing parameter {name}")))
    }

    fn opt(&self, name: &str, present: bool) -> Result<Option<Var<T>>, ConfigError> {
        present.then(|| self.get(name).cloned()).transpose()
    }

    /// The cascade parameters of block `b`.
    pub fn lmlt_params(&self, cfg: &ModelConfig, b: usize) -> Result<LmltParams<T>, ConfigError> {
        let bias = cfg.flags.attn_bias;
        let mut layers = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let mut per_head = Vec::with_capacity(cfg.depth);
            for l in 0..cfg.depth {
                let p = format!("block{b}.lmlt.head{i}.layer{l}");
                let pe = match cfg.flags.pe_mode {
                    PeMode::Lepe => PeParams::Lepe {
                        weight: self.get(&format!("{p}.lepe.weight"))?.clone(),
                        bias: self.get(&format!("{p}.lepe.bias"))?.clone(),
                    },
                    PeMode::Rpe => PeParams::Rpe { table: self.get(&format!("{p}.rpe_table"))?.clone() },
                    PeMode::None => PeParams::None,
                };
                per_head.push(AttnParams {
                    wq: self.get(&format!("{p}.wq"))?.clone(),
                    wk: self.get(&format!("{p}.wk"))?.clone(),
                    wv: self.get(&format!("{p}.wv"))?.clone(),
                    wo: self.get(&format!("{p}.wo"))?.clone(),
                    bq: self.opt(&format!("{p}.bq"), bias)?,
                    bk: self.opt(&format!("{p}.bk"), bias)?,
                    bv: self.opt(&format!("{p}.bv"), bias)?,
                    bo: self.opt(&format!("{p}.bo"), bias)?,
                    pe,
                });
            }
            layers.push(per_head);
        }
        let merge = if cfg.flags.aggregation {
            Some((
                self.get(&format!("block{b}.lmlt.merge.weight"))?.clone(),
                self.get(&format!("block{b}.lmlt.merge.bias"))?.clone(),
            ))
        } else {
            None
        };
        Ok(LmltParams { layers, merge })
    }
}

/// Convolutional channel mixer: 3×3 expand, GELU, 1×1 restore.
pub fn ccm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    w1: &Var<T>,
    b1: Option<&Var<T>>,
    w2: &Var<T>,
    b2: Option<&Var<T>>,
    scope: &str,
) -> Result<Var<T>, ShapeError> {
    let c = x.shape().c;
    let hidden = w1.shape().n;
    let mut s1 = ConvSpec::dense(c, hidden, 3);
    s1.bias = b1.is_some();
    let mut s2 = ConvSpec::dense(hidden, c, 1);
    s2.bias = b2.is_some();
    tape.set_scope(format!("{scope}.conv1"));
    let h = tape.conv2d(x, w1, b1, s1)?;
    let h = tape.gelu(&h);
    tape.set_scope(format!("{scope}.conv2"));
    tape.conv2d(&h, w2, b2, s2)
}

/// `y = x + LMLT(LN(x)); z = y + CCM(LN(y))` for block `b`.
pub fn lhs_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    p: &ParamVars<T>,
    cfg: &ModelConfig,
    b: usize,
) -> Result<Var<T>, ForwardError> {
    let plan = cfg.plan()?;
    let lmlt = p.lmlt_params(cfg, b)?;
    let pre = format!("block{b}");
    tape.set_scope(format!("{pre}.ln1"));
    let n1 = tape.layer_norm(x, p.get(&format!("{pre}.ln1.weight"))?, p.get(&format!("{pre}.ln1.bias"))?, LN_EPS)?;
    let a = lmlt_forward(tape, &n1, &plan, &lmlt, &cfg.flags, &format!("{pre}.lmlt"))?;
    let y = tape.add(x, &a)?;
    tape.set_scope(format!("{pre}.ln2"));
    let n2 = tape.layer_norm(&y, p.get(&format!("{pre}.ln2.weight"))?, p.get(&format!("{pre}.ln2.bias"))?, LN_EPS)?;
    let c = ccm_forward(
        tape,
        &n2,
        p.get(&format!("{pre}.ccm.conv1.weight"))?,
        Some(p.get(&format!("{pre}.ccm.conv1.bias"))?),
        p.get(&format!("{pre}.ccm.conv2.weight"))?,
        Some(p.get(&format!("{pre}.ccm.conv2.bias"))?),
        &format!("{pre}.ccm"),
    )?;
    Ok(tape.add(&y, &c)?)
}

/// Full network on `img` (n, 3, h, w) with values in [0, 1]. The input is
/// reflect-padded to the grid multiple, and the output cropped back to
/// (n, 3, s·h, s·w). No clamping is applied.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    img: &Var<T>,
    p: &ParamVars<T>,
    cfg: &ModelConfig,
) -> Result<Var<T>, ForwardError> {
    cfg.validate()?;
    let s = img.shape();
    if s.c != 3 {
        return Err(ShapeError::invalid("model_forward", format!("expected 3 channels, got {}", s.c)).into());
    }
    let (padded, _) = tape.pad_to_grid(img, cfg.window, cfg.heads)?;
    tape.set_scope("head_conv");
    let shallow = tape.conv2d(&padded, p.get("head_conv.weight")?, Some(p.get("head_conv.bias")?), ConvSpec::dense(3, cfg.channels, 3))?;
    let mut f = shallow.clone();
    for b in 0..cfg.blocks {
        f = lhs_block_forward(tape, &f, p, cfg, b)?;
    }
    if cfg.long_skip {
        f = tape.add(&f, &shallow)?;
    }
    tape.set_scope("tail_conv");
    let out_ch = 3 * cfg.scale * cfg.scale;
    let t = tape.conv2d(&f, p.get("tail_conv.weight")?, Some(p.get("tail_conv.bias")?), ConvSpec::dense(cfg.channels, out_ch, 3))?;
    let up = tape.pixel_shuffle(&t, cfg.scale)?;
    Ok(tape.crop(&up, cfg.scale * s.h, cfg.scale * s.w)?)
}

/// Inference without a tape, after checking `ws` against `cfg`.
pub fn upscale<T: Scalar>(img: &Tensor<T>, ws: &WeightStore, cfg: &ModelConfig) -> Result<Tensor<T>, ForwardError> {
    ws.check_against(cfg)?;
    let mut tape = Tape::new();
    let p = ParamVars::constants(ws);
    Ok(model_forward(&mut tape, &Var::constant(img.clone()), &p, cfg)?.into_tensor())
}

/// [`upscale`] with one thread per batch item. Items never interact, so the
/// result is bit-identical to the serial call.
pub fn upscale_parallel(img: &Tensor<f32>, ws: &WeightStore, cfg: &ModelConfig) -> Result<Tensor<f32>, ForwardError> {
    ws.check_against(cfg)?;
    let n = img.shape().n;
    let results: Vec<Result<Tensor<f32>, ForwardError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let item = img.batch_item(i);
                scope.spawn(move || upscale(&item, ws, cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("forward thread panicked"))
            .collect()
    });
    let items = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::concat_batch(&items)?)
}
