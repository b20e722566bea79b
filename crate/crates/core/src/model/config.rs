use std::fmt::Write as _;

use crate::attention::{AblationFlags, HeadPlan, PeMode};
use crate::error::ConfigError;
use crate::nn::{PoolMode, UpsampleMode};

/// Every architecture hyperparameter plus the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub window: usize,
    pub ccm_growth: usize,
    pub scale: usize,
    /// Serial attention layers per head.
    pub depth: usize,
    pub flags: AblationFlags,
    pub long_skip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Small,
    Base,
    Large,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Tiny, Preset::Small, Preset::Base, Preset::Large];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Some(Preset::Tiny),
            "small" => Some(Preset::Small),
            "base" => Some(Preset::Base),
            "large" => Some(Preset::Large),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Base => "base",
            Preset::Large => "large",
        }
    }

    fn dims(self) -> (usize, usize) {
        match self {
            Preset::Tiny => (36, 8),
            Preset::Small => (36, 12),
            Preset::Base => (60, 8),
            Preset::Large => (84, 8),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::preset(Preset::Tiny, 2)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(ConfigError::Invalid(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse()
        .map_err(|_| ConfigError::Invalid(format!("{key}: expected an integer, got {v:?}")))
}

impl ModelConfig {
    pub fn preset(p: Preset, scale: usize) -> Self {
        let (channels, blocks) = p.dims();
        ModelConfig {
            channels,
            blocks,
            heads: 4,
            window: 8,
            ccm_growth: 2,
            scale,
            depth: 1,
            flags: AblationFlags::default(),
            long_skip: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.blocks == 0 {
            return Err(ConfigError::Invalid("blocks must be >= 1".into()));
        }
        if self.ccm_growth == 0 {
            return Err(ConfigError::Invalid("ccm_growth must be >= 1".into()));
        }
        if !(2..=4).contains(&self.scale) {
            return Err(ConfigError::Invalid(format!("scale {} not in 2..=4", self.scale)));
        }
        self.plan().map(|_| ())
    }

    pub fn plan(&self) -> Result<HeadPlan, ConfigError> {
        HeadPlan::new(self.channels, self.heads, self.depth, self.window)
    }

    pub fn per_head(&self) -> usize {
        self.channels / self.heads.max(1)
    }

    /// Inputs are padded to a multiple of this before the network runs.
    pub fn grid_multiple(&self) -> usize {
        crate::nn::grid_multiple(self.window, self.heads)
    }

    /// Apply one `key=value` setting. `merge` is an alias of `aggregation`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let f = &mut self.flags;
        match key.trim() {
            "channels" => self.channels = parse_usize(key, v)?,
            "blocks" => self.blocks = parse_usize(key, v)?,
            "heads" => self.heads = parse_usize(key, v)?,
            "window" => self.window = parse_usize(key, v)?,
            "ccm_growth" => self.ccm_growth = parse_usize(key, v)?,
            "scale" => self.scale = parse_usize(key, v)?,
            "depth" => self.depth = parse_usize(key, v)?,
            "long_skip" => self.long_skip = parse_bool(key, v)?,
            "low_to_high" => f.low_to_high = parse_bool(key, v)?,
            "pooling" => f.pooling = parse_bool(key, v)?,
            "aggregation" | "merge" => f.aggregation = parse_bool(key, v)?,
            "gelu" => f.gelu = parse_bool(key, v)?,
            "modulate" => f.modulate = parse_bool(key, v)?,
            "attn_bias" => f.attn_bias = parse_bool(key, v)?,
            "scale_logits" => f.scale_logits = parse_bool(key, v)?,
            "pe_mode" => {
                f.pe_mode = PeMode::parse(v)
                    .ok_or_else(|| ConfigError::Invalid(format!("pe_mode: unknown {v:?}")))?
            }
            "pool_mode" => {
                f.pool_mode = match v {
                    "avg" => PoolMode::Avg,
                    "max" => PoolMode::Max,
                    _ => return Err(ConfigError::Invalid(format!("pool_mode: unknown {v:?}"))),
                }
            }
            "upsample_mode" => {
                f.upsample_mode = match v {
                    "nearest" => UpsampleMode::Nearest,
                    "bilinear" => UpsampleMode::Bilinear,
                    _ => return Err(ConfigError::Invalid(format!("upsample_mode: unknown {v:?}"))),
                }
            }
            other => return Err(ConfigError::Invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let f = &self.flags;
        vec![
            ("channels", self.channels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("window", self.window.to_string()),
            ("ccm_growth", self.ccm_growth.to_string()),
            ("scale", self.scale.to_string()),
            ("depth", self.depth.to_string()),
            ("long_skip", self.long_skip.to_string()),
            ("low_to_high", f.low_to_high.to_string()),
            ("pooling", f.pooling.to_string()),
            (
                "pool_mode",
                match f.pool_mode {
                    PoolMode::Avg => "avg",
                    PoolMode::Max => "max",
                }
                .to_string(),
            ),
            (
                "upsample_mode",
                match f.upsample_mode {
                    UpsampleMode::Nearest => "nearest",
                    UpsampleMode::Bilinear => "bilinear",
                }
                .to_string(),
            ),
            ("aggregation", f.aggregation.to_string()),
            ("gelu", f.gelu.to_string()),
            ("modulate", f.modulate.to_string()),
            ("pe_mode", f.pe_mode.name().to_string()),
            ("attn_bias", f.attn_bias.to_string()),
            ("scale_logits", f.scale_logits.to_string()),
        ]
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parse flat `key=value` lines on top of `base`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_kv_text(text: &str, base: ModelConfig) -> Result<Self, ConfigError> {
        let mut cfg = base;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let t = ModelConfig::preset(Preset::Tiny, 2);
        assert_eq!((t.channels, t.blocks, t.heads, t.window, t.ccm_growth), (36, 8, 4, 8, 2));
        assert_eq!(ModelConfig::preset(Preset::Small, 2).blocks, 12);
        assert_eq!(ModelConfig::preset(Preset::Base, 3).channels, 60);
        assert_eq!(ModelConfig::preset(Preset::Large, 4).channels, 84);
        for p in Preset::ALL {
            ModelConfig::preset(p, 4).validate().unwrap();
            assert_eq!(Preset::parse(p.name()), Some(p));
        }
        assert_eq!(t.grid_multiple(), 64);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.scale = 5;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().set("bogus", "1").is_err());
        assert!(ModelConfig::default().set("gelu", "maybe").is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = ModelConfig::preset(Preset::Base, 3);
        c.set("merge", "false").unwrap();
        c.set("pe_mode", "rpe").unwrap();
        c.set("pool_mode", "max").unwrap();
        assert!(!c.flags.aggregation);
        let text = c.to_kv_text();
        let back = ModelConfig::from_kv_text(&text, ModelConfig::default()).unwrap();
        assert_eq!(back, c);
        assert!(ModelConfig::from_kv_text("channels", c).is_err());
        let skipped = ModelConfig::from_kv_text("# comment\n\nblocks = 3\n", c).unwrap();
        assert_eq!(skipped.blocks, 3);
    }
}
