//! Closed-form parameter, MAC and activation accounting, plus a cross-check
//! against counts taken while the network actually runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attention::{flops_lmlt_head, flops_wsa, PeMode};
use crate::autodiff::{Tape, Var};
use crate::error::{AnalysisError, ForwardError};
use crate::model::{init_weights, model_forward, ModelConfig, ParamVars};
use crate::tensor::{Shape, Tensor};

/// Output resolution the reported MACs and acts are normalised to.
pub const REFERENCE_OUTPUT: (usize, usize) = (720, 1280);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub acts: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// LR input resolution (h, w) before padding.
    pub input: (usize, usize),
    /// Resolution the body actually runs at.
    pub padded: (usize, usize),
    pub config: ModelConfig,
}

impl CostReport {
    pub fn total(&self) -> CostRow {
        let mut t = CostRow { name: "total".into(), params: 0, macs: 0, acts: 0 };
        for r in &self.rows {
            t.params += r.params;
            t.macs += r.macs;
            t.acts += r.acts;
        }
        t
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Sum of the `.attn` rows: the attention-only MACs of every block.
    pub fn attention_macs(&self) -> u64 {
        self.rows.iter().filter(|r| r.name.ends_with(".attn")).map(|r| r.macs).sum()
    }

    /// `layer,params,macs,acts` with the totals row last.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs,acts\n");
        for r in self.rows.iter().chain(std::iter::once(&self.total())) {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.params, r.macs, r.acts);
        }
        s
    }
}

/// LR input size whose s× upscale covers 1280×720.
pub fn reference_input(scale: usize) -> (usize, usize) {
    (REFERENCE_OUTPUT.0.div_ceil(scale), REFERENCE_OUTPUT.1.div_ceil(scale))
}

fn padded_size(cfg: &ModelConfig, h: usize, w: usize) -> (usize, usize) {
    let g = cfg.grid_multiple();
    (h.div_ceil(g) * g, w.div_ceil(g) * g)
}

fn row(name: String, params: usize, macs: usize, acts: usize) -> CostRow {
    CostRow { name, params: params as u64, macs: macs as u64, acts: acts as u64 }
}

/// Per-layer analytic costs for an `h`×`w` LR input. A zero-block config is
/// accepted here and leaves only the head and tail convolutions.
pub fn cost_report(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport, AnalysisError> {
    ModelConfig { blocks: cfg.blocks.max(1), ..*cfg }.validate()?;
    let plan = cfg.plan()?;
    let (ph, pw) = padded_size(cfg, h, w);
    let px = ph * pw;
    let dim = cfg.channels;
    let d = plan.per_head;
    let m = cfg.window;
    let hidden = cfg.ccm_growth * dim;
    let out_ch = 3 * cfg.scale * cfg.scale;
    let f = &cfg.flags;

    let mut rows = vec![row("head_conv".into(), 27 * dim + dim, 27 * dim * px, dim * px)];
    for b in 0..cfg.blocks {
        rows.push(row(format!("block{b}.ln1"), 2 * dim, 0, 0));
        for i in 0..plan.heads {
            let lvl = plan.pool_level(i, f.pooling);
            let p = (ph >> lvl) * (pw >> lvl);
            for l in 0..plan.depth {
                let scope = format!("block{b}.lmlt.head{i}.layer{l}");
                let mut params = 4 * d * d;
                if f.attn_bias {
                    params += 4 * d;
                }
                if f.pe_mode == PeMode::Rpe {
                    params += (2 * m - 1).pow(2);
                }
                let macs = flops_lmlt_head(ph as u64, pw as u64, dim as u64, plan.heads as u64, m as u64, lvl as u32);
                rows.push(CostRow {
                    name: format!("{scope}.attn"),
                    params: params as u64,
                    macs,
                    acts: (p * (5 * d + m * m)) as u64,
                });
                if f.pe_mode == PeMode::Lepe {
                    rows.push(row(format!("{scope}.lepe"), 10 * d, 9 * p * d, p * d));
                }
            }
        }
        if f.aggregation {
            rows.push(row(format!("block{b}.lmlt.merge"), dim * dim + dim, dim * dim * px, dim * px));
        }
        rows.push(row(format!("block{b}.ln2"), 2 * dim, 0, 0));
        rows.push(row(format!("block{b}.ccm.conv1"), 9 * dim * hidden + hidden, 9 * dim * hidden * px, hidden * px));
        rows.push(row(format!("block{b}.ccm.conv2"), hidden * dim + dim, hidden * dim * px, dim * px));
    }
    rows.push(row("tail_conv".into(), 9 * dim * out_ch + out_ch, 9 * dim * out_ch * px, out_ch * px));
    Ok(CostReport { rows, input: (h, w), padded: (ph, pw), config: *cfg })
}

/// Cost report at the 1280×720-output reference resolution.
pub fn reference_report(cfg: &ModelConfig) -> Result<CostReport, AnalysisError> {
    let (h, w) = reference_input(cfg.scale);
    cost_report(cfg, h, w)
}

/// Learnable scalars implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<u64, AnalysisError> {
    Ok(cost_report(cfg, 1, 1)?.total().params)
}

/// MACs to produce a 1280×720 output.
pub fn flops_model(cfg: &ModelConfig) -> Result<u64, AnalysisError> {
    Ok(reference_report(cfg)?.total().macs)
}

/// Output elements of every conv, linear and matmul for a 1280×720 output.
pub fn acts_count(cfg: &ModelConfig) -> Result<u64, AnalysisError> {
    Ok(reference_report(cfg)?.total().acts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDelta {
    pub name: String,
    pub analytic: u64,
    pub counted: u64,
}

impl LayerDelta {
    pub fn relative(&self) -> f64 {
        let denom = self.analytic.max(self.counted).max(1) as f64;
        self.analytic.abs_diff(self.counted) as f64 / denom
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsVerification {
    pub layers: Vec<LayerDelta>,
    pub analytic: u64,
    pub counted: u64,
}

impl FlopsVerification {
    pub fn relative(&self) -> f64 {
        self.analytic.abs_diff(self.counted) as f64 / self.analytic.max(1) as f64
    }
}

/// Run the network on an `h`×`w` zero image with a MAC-counting tape and
/// compare every layer with [`cost_report`]. Fails on the first layer off
/// by more than 1%.
pub fn verify_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopsVerification, AnalysisError> {
    if h > 64 || w > 64 {
        return Err(AnalysisError::TooLarge { h, w });
    }
    let report = cost_report(cfg, h, w)?;
    let ws = init_weights(cfg, 0);
    let params = ParamVars::<f32>::constants(&ws);
    let mut tape = Tape::<f32>::instrumented();
    let img = Var::constant(Tensor::zeros(Shape::new(1, 3, h, w)));
    model_forward(&mut tape, &img, &params, cfg)?;
    let counter = tape.take_counter().expect("instrumented tape");
    let mut counted: BTreeMap<String, u64> = counter.rows().iter().map(|(k, v)| (k.clone(), v.macs)).collect();

    let mut layers = Vec::with_capacity(report.rows.len());
    for r in &report.rows {
        let c = counted.remove(&r.name).unwrap_or(0);
        layers.push(LayerDelta { name: r.name.clone(), analytic: r.macs, counted: c });
    }
    for (name, c) in counted {
        layers.push(LayerDelta { name, analytic: 0, counted: c });
    }
    if let Some(bad) = layers.iter().find(|l| l.relative() > 0.01) {
        return Err(AnalysisError::Mismatch {
            layer: bad.name.clone(),
            analytic: bad.analytic,
            counted: bad.counted,
        });
    }
    let analytic = layers.iter().map(|l| l.analytic).sum();
    let counted = layers.iter().map(|l| l.counted).sum();
    Ok(FlopsVerification { layers, analytic, counted })
}

impl From<crate::error::ShapeError> for AnalysisError {
    fn from(e: crate::error::ShapeError) -> Self {
        AnalysisError::Forward(ForwardError::Shape(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WsaComparison {
    pub heads: usize,
    pub lmlt: u64,
    pub wsa: u64,
}

impl WsaComparison {
    pub fn ratio(&self) -> f64 {
        self.lmlt as f64 / self.wsa as f64
    }
}

/// Attention MACs of the cascade (one head per pooling level when `pooling`)
/// against plain window attention, for each head count that divides `dim`.
pub fn compare_wsa_lmlt(h: u64, w: u64, dim: u64, m: u64, heads: &[u64], pooling: bool) -> Vec<WsaComparison> {
    heads
        .iter()
        .filter(|&&n| n >= 1 && dim % n == 0)
        .map(|&n| {
            let lmlt = (0..n as u32)
                .map(|i| flops_lmlt_head(h, w, dim, n, m, if pooling { i } else { 0 }))
                .sum();
            WsaComparison { heads: n as usize, lmlt, wsa: flops_wsa(h, w, dim, m) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{param_layout, Preset};
    use proptest::prelude::*;

    fn preset(p: Preset, s: usize) -> ModelConfig {
        ModelConfig::preset(p, s)
    }

    fn within(got: u64, want: f64, tol: f64) -> bool {
        ((got as f64 - want) / want).abs() <= tol
    }

    #[test]
    fn parameter_counts_match_published_sizes() {
        let cases = [
            (Preset::Tiny, 2, 239_340),
            (Preset::Small, 2, 356_556),
            (Preset::Base, 2, 652_332),
            (Preset::Base, 3, 660_447),
            (Preset::Base, 4, 671_808),
            (Preset::Large, 2, 1_268_076),
            (Preset::Large, 4, 1_295_328),
        ];
        for (p, s, n) in cases {
            assert_eq!(param_count(&preset(p, s)).unwrap(), n, "{p:?} x{s}");
        }
    }

    #[test]
    fn macs_at_reference_resolution() {
        let g = 1e9;
        assert!(within(flops_model(&preset(Preset::Tiny, 2)).unwrap(), 59.0 * g, 0.10));
        assert!(within(flops_model(&preset(Preset::Base, 2)).unwrap(), 158.0 * g, 0.10));
        assert!(within(flops_model(&preset(Preset::Large, 2)).unwrap(), 306.0 * g, 0.10));
        assert!(within(flops_model(&preset(Preset::Base, 4)).unwrap(), 41.0 * g, 0.10));
        assert!(within(acts_count(&preset(Preset::Tiny, 2)).unwrap(), 603e6, 0.15));
    }

    #[test]
    fn reference_resolution_pads_to_the_grid() {
        let r = reference_report(&preset(Preset::Tiny, 3)).unwrap();
        assert_eq!(r.input, (240, 427));
        assert_eq!(r.padded, (256, 448));
    }

    #[test]
    fn zero_block_config_counts_only_the_convs() {
        let mut cfg = preset(Preset::Tiny, 2);
        cfg.blocks = 0;
        let r = cost_report(&cfg, 64, 64).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.total().acts, (36 + 12) * 64 * 64);
    }

    #[test]
    fn acts_and_macs_scale_with_area() {
        let cfg = preset(Preset::Tiny, 2);
        let a = cost_report(&cfg, 64, 64).unwrap().total();
        let b = cost_report(&cfg, 128, 64).unwrap().total();
        assert_eq!(b.acts, 2 * a.acts);
        assert_eq!(b.macs, 2 * a.macs);
        assert_eq!(b.params, a.params);
    }

    #[test]
    fn csv_has_header_and_totals_last() {
        let mut cfg = preset(Preset::Tiny, 2);
        cfg.blocks = 1;
        let r = cost_report(&cfg, 64, 64).unwrap();
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "layer,params,macs,acts");
        let t = r.total();
        assert_eq!(*lines.last().unwrap(), format!("total,{},{},{}", t.params, t.macs, t.acts));
        assert_eq!(lines.len(), r.rows.len() + 2);
    }

    fn small() -> ModelConfig {
        let mut c = preset(Preset::Tiny, 2);
        c.channels = 8;
        c.blocks = 1;
        c.heads = 2;
        c.window = 4;
        c
    }

    #[test]
    fn instrumented_macs_agree() {
        let v = verify_flops(&small(), 16, 16).unwrap();
        assert_eq!(v.analytic, v.counted);
        assert!(v.layers.iter().all(|l| l.analytic == l.counted), "{:?}", v.layers);
        let v = verify_flops(&small(), 13, 7).unwrap();
        assert_eq!(v.analytic, v.counted);
        assert!(matches!(verify_flops(&small(), 65, 8), Err(AnalysisError::TooLarge { .. })));
    }

    #[test]
    fn conv_rows_match_exactly_without_attention() {
        let v = verify_flops(&small(), 16, 16).unwrap();
        for l in v.layers.iter().filter(|l| !l.name.ends_with(".attn")) {
            assert_eq!(l.analytic, l.counted, "{}", l.name);
        }
    }

    #[test]
    fn doubling_height_doubles_counted_macs() {
        let a = verify_flops(&small(), 16, 16).unwrap().counted;
        let b = verify_flops(&small(), 32, 16).unwrap().counted;
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn cascade_attention_sums_head_rows() {
        let cfg = preset(Preset::Tiny, 2);
        let r = cost_report(&cfg, 64, 64).unwrap();
        let per_block: u64 = (0..4).map(|i| flops_lmlt_head(64, 64, 36, 4, 8, i)).sum();
        assert_eq!(r.attention_macs(), 8 * per_block);
    }

    #[test]
    fn comparison_table() {
        let rows = compare_wsa_lmlt(64, 64, 36, 8, &[1, 2, 3, 4, 6], true);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].ratio(), 1.0);
        for pair in rows.windows(2) {
            assert!(pair[1].ratio() < pair[0].ratio());
        }
        let four = rows[3];
        let want: u64 = (0..4).map(|i| flops_lmlt_head(64, 64, 36, 4, 8, i)).sum();
        assert_eq!((four.lmlt, four.wsa), (want, flops_wsa(64, 64, 36, 8)));
        assert!(compare_wsa_lmlt(64, 64, 36, 8, &[5], true).is_empty());
    }

    fn flagged(bits: u16, heads: usize, depth: usize, pe: usize) -> ModelConfig {
        let mut c = preset(Preset::Tiny, 2 + (bits as usize >> 9) % 3);
        c.blocks = 2;
        c.heads = heads;
        c.depth = depth;
        let f = &mut c.flags;
        f.low_to_high = bits & 1 != 0;
        f.pooling = bits & 2 != 0;
        f.aggregation = bits & 4 != 0;
        f.gelu = bits & 8 != 0;
        f.modulate = bits & 16 != 0;
        f.attn_bias = bits & 32 != 0;
        f.scale_logits = bits & 64 != 0;
        c.long_skip = bits & 128 != 0;
        f.pe_mode = [PeMode::Lepe, PeMode::Rpe, PeMode::None][pe];
        c
    }

    proptest! {
        #[test]
        fn analytic_params_equal_materialized(bits in any::<u16>(), heads in prop::sample::select(vec![1usize, 2, 3, 4]), depth in 1usize..4, pe in 0usize..3) {
            let cfg = flagged(bits, heads, depth, pe);
            let layout: usize = param_layout(&cfg).iter().map(|p| p.shape.numel()).sum();
            prop_assert_eq!(param_count(&cfg).unwrap(), layout as u64);
            prop_assert_eq!(init_weights(&cfg, 1).numel() as u64, layout as u64);
        }
    }
}
