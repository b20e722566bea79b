//! Named parameters, deterministic initialization and the binary weight file.
//!
//! File layout: the 8 magic bytes `LMLTW001`, a little-endian `u32` manifest
//! length, the UTF-8 manifest, then one little-endian `f32` blob per
//! parameter, each starting on a 64-byte boundary. Manifest lines are either
//! `meta key=value` or
//! `param name=<n> dtype=f32 shape=AxBxCxD offset=<abs> length=<bytes>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ConfigError, WeightIoError};
use crate::nn::ConvSpec;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

use super::ModelConfig;

const MAGIC_PREFIX: &[u8; 5] = b"LMLTW";
const VERSION: &[u8; 3] = b"001";
const ALIGN: usize = 64;

/// How a parameter is drawn by [`init_weights`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `√(2 / fan_in)`.
    HeNormal { fan_in: usize },
    /// Normal(0, 0.02).
    Small,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

fn conv_params(out: &mut Vec<ParamSpec>, prefix: &str, spec: ConvSpec, init: Init) {
    out.push(ParamSpec { name: format!("{prefix}.weight"), shape: spec.weight_shape(), init });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: spec.bias_shape(), init: Init::Zeros });
}

fn he(spec: ConvSpec) -> Init {
    Init::HeNormal { fan_in: spec.in_ch / spec.groups * spec.kernel * spec.kernel }
}

/// Every parameter implied by `cfg`, sorted by name.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let dim = cfg.channels;
    let d = cfg.per_head();
    let f = &cfg.flags;
    let mut out = Vec::new();
    let head = ConvSpec::dense(3, dim, 3);
    conv_params(&mut out, "head_conv", head, he(head));
    let tail = ConvSpec::dense(dim, 3 * cfg.scale * cfg.scale, 3);
    conv_params(&mut out, "tail_conv", tail, he(tail));
    for b in 0..cfg.blocks {
        for ln in ["ln1", "ln2"] {
            let shape = Shape::new(1, dim, 1, 1);
            out.push(ParamSpec { name: format!("block{b}.{ln}.weight"), shape, init: Init::Ones });
            out.push(ParamSpec { name: format!("block{b}.{ln}.bias"), shape, init: Init::Zeros });
        }
        for i in 0..cfg.heads {
            for l in 0..cfg.depth {
                let p = format!("block{b}.lmlt.head{i}.layer{l}");
                for proj in ["q", "k", "v", "o"] {
                    out.push(ParamSpec { name: format!("{p}.w{proj}"), shape: Shape::matrix(d, d), init: Init::Small });
                    if f.attn_bias {
                        out.push(ParamSpec { name: format!("{p}.b{proj}"), shape: Shape::matrix(1, d), init: Init::Zeros });
                    }
                }
                match f.pe_mode {
                    crate::attention::PeMode::Lepe => {
                        conv_params(&mut out, &format!("{p}.lepe"), ConvSpec::depthwise(d, 3), Init::Small)
                    }
                    crate::attention::PeMode::Rpe => out.push(ParamSpec {
                        name: format!("{p}.rpe_table"),
                        shape: Shape::matrix(1, (2 * cfg.window - 1).pow(2)),
                        init: Init::Small,
                    }),
                    crate::attention::PeMode::None => {}
                }
            }
        }
        if f.aggregation {
            let merge = ConvSpec::dense(dim, dim, 1);
            conv_params(&mut out, &format!("block{b}.lmlt.merge"), merge, he(merge));
        }
        let c1 = ConvSpec::dense(dim, cfg.ccm_growth * dim, 3);
        let c2 = ConvSpec::dense(cfg.ccm_growth * dim, dim, 1);
        conv_params(&mut out, &format!("block{b}.ccm.conv1"), c1, he(c1));
        conv_params(&mut out, &format!("block{b}.ccm.conv2"), c2, he(c2));
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// Named `f32` parameters in lexicographic order, plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    pub meta: BTreeMap<String, String>,
    params: BTreeMap<String, Tensor<f32>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Set every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Model config recorded in the metadata, if any.
    pub fn config(&self) -> Result<Option<ModelConfig>, ConfigError> {
        if self.meta.is_empty() {
            return Ok(None);
        }
        let mut cfg = ModelConfig::default();
        for (k, v) in &self.meta {
            if k != "seed" {
                cfg.set(k, v)?;
            }
        }
        Ok(Some(cfg))
    }

    /// Names and shapes must match [`param_layout`] exactly.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), ConfigError> {
        let layout = param_layout(cfg);
        if layout.len() != self.params.len() {
            return Err(ConfigError::WeightMismatch(format!(
                "config expects {} tensors, store has {}",
                layout.len(),
                self.params.len()
            )));
        }
        for spec in &layout {
            match self.params.get(&spec.name) {
                None => return Err(ConfigError::WeightMismatch(format!("missing {}", spec.name))),
                Some(t) if t.shape() != spec.shape => {
                    return Err(ConfigError::WeightMismatch(format!(
                        "{}: shape {:?}, expected {:?}",
                        spec.name,
                        t.shape().dims(),
                        spec.shape.dims()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Draw every parameter of `cfg` from one stream seeded with `seed`, walking
/// parameters in name order. Ones/zeros consume no draws.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> WeightStore {
    let mut rng = Rng::new(seed);
    let mut store = WeightStore::new();
    for (k, v) in cfg.to_pairs() {
        store.meta.insert(k.to_string(), v);
    }
    for spec in param_layout(cfg) {
        let n = spec.shape.numel();
        let data: Vec<f32> = match spec.init {
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.normal(0.0, std) as f32).collect()
            }
            Init::Small => (0..n).map(|_| rng.normal(0.0, 0.02) as f32).collect(),
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
        };
        store.insert(spec.name, Tensor::from_vec(spec.shape, data).expect("layout shape"));
    }
    store
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn shape_text(s: Shape) -> String {
    let [a, b, c, d] = s.dims();
    format!("{a}x{b}x{c}x{d}")
}

/// Serialize to the weight file format.
pub fn weights_to_bytes(ws: &WeightStore) -> Vec<u8> {
    // Offsets depend on the manifest length, which depends on the offsets'
    // digit counts; iterate until the layout is stable.
    let mut base = 0usize;
    loop {
        let mut manifest = String::new();
        for (k, v) in &ws.meta {
            let _ = writeln!(manifest, "meta {k}={v}");
        }
        let mut offset = base;
        let mut offsets = Vec::with_capacity(ws.len());
        for (name, t) in ws.iter() {
            offset = align_up(offset);
            let len = t.len() * 4;
            let _ = writeln!(
                manifest,
                "param name={name} dtype=f32 shape={} offset={offset} length={len}",
                shape_text(t.shape())
            );
            offsets.push(offset);
            offset += len;
        }
        let header = align_up(8 + 4 + manifest.len());
        if header != base {
            base = header;
            continue;
        }
        let mut out = Vec::with_capacity(offset.max(header));
        out.extend_from_slice(MAGIC_PREFIX);
        out.extend_from_slice(VERSION);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for ((_, t), off) in ws.iter().zip(offsets) {
            out.resize(off, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if out.len() < header {
            out.resize(header, 0);
        }
        return out;
    }
}

fn parse_shape(name: &str, s: &str) -> Result<Shape, WeightIoError> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| WeightIoError::Manifest(format!("{name}: bad shape {s:?}")))?;
    match dims.as_slice() {
        &[a, b, c, d] => Ok(Shape::new(a, b, c, d)),
        _ => Err(WeightIoError::Manifest(format!("{name}: shape must have 4 dims"))),
    }
}

/// Parse the weight file format.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<WeightStore, WeightIoError> {
    if bytes.len() < 8 || &bytes[..5] != MAGIC_PREFIX {
        return Err(WeightIoError::BadMagic);
    }
    if &bytes[5..8] != VERSION {
        return Err(WeightIoError::Version(String::from_utf8_lossy(&bytes[5..8]).into_owned()));
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| WeightIoError::Truncated("missing manifest length".into()))?;
    let mlen = u32::from_le_bytes(len_bytes) as usize;
    let manifest = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| WeightIoError::Truncated("manifest extends past end of file".into()))?;
    let manifest = std::str::from_utf8(manifest)
        .map_err(|_| WeightIoError::Manifest("manifest is not UTF-8".into()))?;

    let mut store = WeightStore::new();
    for line in manifest.lines() {
        if let Some(kv) = line.strip_prefix("meta ") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| WeightIoError::Manifest(format!("bad meta line {line:?}")))?;
            store.meta.insert(k.to_string(), v.to_string());
            continue;
        }
        let Some(rest) = line.strip_prefix("param ") else {
            return Err(WeightIoError::Manifest(format!("unrecognized line {line:?}")));
        };
        let mut fields = BTreeMap::new();
        for tok in rest.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| WeightIoError::Manifest(format!("bad field {tok:?}")))?;
            fields.insert(k, v);
        }
        let field = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| WeightIoError::Manifest(format!("missing {k} in {line:?}")))
        };
        let name = field("name")?.to_string();
        if field("dtype")? != "f32" {
            return Err(WeightIoError::Manifest(format!("{name}: only f32 is supported")));
        }
        let shape = parse_shape(&name, field("shape")?)?;
        let num = |k: &str| -> Result<usize, WeightIoError> {
            field(k)?
                .parse()
                .map_err(|_| WeightIoError::Manifest(format!("{name}: bad {k}")))
        };
        let (offset, length) = (num("offset")?, num("length")?);
        let numel = shape
            .checked_numel()
            .ok_or_else(|| WeightIoError::ShapeDisagreement { name: name.clone(), msg: "shape overflows".into() })?;
        if numel.checked_mul(4) != Some(length) {
            return Err(WeightIoError::ShapeDisagreement {
                name,
                msg: format!("shape {} needs {} bytes, blob has {length}", shape_text(shape), numel * 4),
            });
        }
        let blob = offset
            .checked_add(length)
            .and_then(|end| bytes.get(offset..end))
            .ok_or_else(|| WeightIoError::Truncated(format!("{name}: blob at {offset}+{length} past end")))?;
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name, Tensor::from_vec(shape, data).expect("checked length"));
    }
    Ok(store)
}

pub fn save_weights(ws: &WeightStore, path: &Path) -> Result<(), WeightIoError> {
    std::fs::write(path, weights_to_bytes(ws)).map_err(|source| WeightIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(path: &Path) -> Result<WeightStore, WeightIoError> {
    let bytes = std::fs::read(path).map_err(|source| WeightIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    weights_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn small_cfg() -> ModelConfig {
        let mut c = ModelConfig::preset(Preset::Tiny, 2);
        c.channels = 8;
        c.blocks = 2;
        c.heads = 2;
        c.window = 4;
        c
    }

    #[test]
    fn layout_is_sorted_and_complete() {
        let cfg = small_cfg();
        let layout = param_layout(&cfg);
        assert!(layout.windows(2).all(|w| w[0].name < w[1].name));
        assert_eq!(layout[0].name, "block0.ccm.conv1.bias");
        assert!(layout.iter().any(|p| p.name == "block1.lmlt.head1.layer0.lepe.weight"));
        assert!(layout.iter().any(|p| p.name == "tail_conv.weight" && p.shape == Shape::new(12, 8, 3, 3)));
    }

    #[test]
    fn init_is_deterministic_and_follows_the_rules() {
        let cfg = small_cfg();
        let a = init_weights(&cfg, 5);
        assert_eq!(a, init_weights(&cfg, 5));
        assert_ne!(a, init_weights(&cfg, 6));
        for (name, t) in a.iter() {
            if name.contains(".ln") && name.ends_with(".weight") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with("bias") || name.ends_with(".bq") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        a.check_against(&cfg).unwrap();
        assert_eq!(a.config().unwrap(), Some(cfg));
    }

    #[test]
    fn first_he_draw_matches_the_reference_stream() {
        // splitmix64(seed 42) -> two uniforms -> Box–Muller cosine branch,
        // scaled by sqrt(2 / (9 * 8)) for block0.ccm.conv1.weight.
        let w = init_weights(&small_cfg(), 42);
        let first = w.get("block0.ccm.conv1.weight").unwrap().data()[0];
        assert_eq!(first, REFERENCE_FIRST_DRAW);
    }

    const REFERENCE_FIRST_DRAW: f32 = 0.14704148;

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let w = init_weights(&small_cfg(), 1);
        let bytes = weights_to_bytes(&w);
        assert_eq!(&bytes[..8], b"LMLTW001");
        let back = weights_from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(weights_to_bytes(&back), bytes);
    }

    #[test]
    fn blobs_are_aligned() {
        let w = init_weights(&small_cfg(), 1);
        let bytes = weights_to_bytes(&w);
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[12..12 + mlen]).unwrap();
        let mut n = 0;
        for line in manifest.lines().filter(|l| l.starts_with("param ")) {
            let off: usize = line.split("offset=").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
            assert_eq!(off % 64, 0);
            assert!(off >= 12 + mlen);
            n += 1;
        }
        assert_eq!(n, w.len());
    }

    #[test]
    fn empty_store_roundtrips() {
        let bytes = weights_to_bytes(&WeightStore::new());
        let back = weights_from_bytes(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn distinct_load_errors() {
        let w = init_weights(&small_cfg(), 1);
        let bytes = weights_to_bytes(&w);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(weights_from_bytes(&bad), Err(WeightIoError::BadMagic)));

        let mut ver = bytes.clone();
        ver[7] = b'9';
        assert!(matches!(weights_from_bytes(&ver), Err(WeightIoError::Version(_))));

        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(weights_from_bytes(short), Err(WeightIoError::Truncated(_))));

        let text = String::from_utf8_lossy(&bytes[12..]).into_owned();
        let at = text.find("shape=1x16x1x1").unwrap() + 12 + "shape=1x".len();
        let mut shaped = bytes.clone();
        shaped[at..at + 2].copy_from_slice(b"17");
        assert!(matches!(
            weights_from_bytes(&shaped),
            Err(WeightIoError::ShapeDisagreement { .. })
        ));
    }

    #[test]
    fn store_checks_reject_other_configs() {
        let w = init_weights(&small_cfg(), 1);
        let mut other = small_cfg();
        other.flags.pe_mode = crate::attention::PeMode::Rpe;
        assert!(w.check_against(&other).is_err());
        let mut scaled = small_cfg();
        scaled.scale = 3;
        assert!(w.check_against(&scaled).is_err());
    }
}
