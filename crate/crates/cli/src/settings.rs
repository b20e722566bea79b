//! Effective run configuration: preset, then config file, then flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use lmlt::model::{ModelConfig, Preset};

use crate::CliError;

/// Model selection and ablation switches shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// tiny, small, base or large
    #[arg(long)]
    pub preset: Option<String>,
    /// Upscaling factor (2, 3 or 4)
    #[arg(long)]
    pub scale: Option<usize>,
    /// Flat key=value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Serial attention layers per head
    #[arg(long)]
    pub depth: Option<usize>,
    /// Run every head at full resolution
    #[arg(long)]
    pub no_pool: bool,
    /// Drop the low-to-high feature sum
    #[arg(long)]
    pub no_sum: bool,
    /// Drop the 1×1 merge conv after the heads
    #[arg(long, visible_alias = "no-aggregation")]
    pub no_merge: bool,
    #[arg(long)]
    pub no_gelu: bool,
    #[arg(long)]
    pub no_modulate: bool,
    /// Relative position bias instead of LePE
    #[arg(long)]
    pub rpe: bool,
}

impl ModelArgs {
    fn flag_pairs(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        let mut num = |k: &str, v: Option<usize>| {
            if let Some(v) = v {
                out.push((k.to_string(), v.to_string()));
            }
        };
        num("channels", self.channels);
        num("blocks", self.blocks);
        num("heads", self.heads);
        num("window", self.window);
        num("depth", self.depth);
        for (on, k, v) in [
            (self.no_pool, "pooling", "false"),
            (self.no_sum, "low_to_high", "false"),
            (self.no_merge, "aggregation", "false"),
            (self.no_gelu, "gelu", "false"),
            (self.no_modulate, "modulate", "false"),
            (self.rpe, "pe_mode", "rpe"),
        ] {
            if on {
                out.push((k.into(), v.into()));
            }
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            out.push((k.trim().into(), v.trim().into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    extra: BTreeMap<String, String>,
    echo: BTreeMap<String, String>,
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_preset(s: &str) -> Result<Preset, CliError> {
    Preset::parse(s).ok_or_else(|| CliError::usage(format!("unknown preset {s:?} (expected tiny, small, base or large)")))
}

impl Settings {
    /// Resolve `args` over `default`. Config-file keys that are not model
    /// keys must appear in `extras`.
    pub fn resolve(args: &ModelArgs, default: ModelConfig, extras: &[&str]) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => read_pairs(p)?,
            None => Vec::new(),
        };
        let file_get = |k: &str| file.iter().rev().find(|(fk, _)| fk == k).map(|(_, v)| v.clone());
        let scale = match (args.scale, file_get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => v.parse().map_err(|_| CliError::usage(format!("scale: bad value {v:?}")))?,
            (None, None) => default.scale,
        };
        let mut model = match args.preset.clone().or_else(|| file_get("preset")) {
            Some(p) => ModelConfig::preset(parse_preset(&p)?, scale),
            None => default,
        };
        let mut extra = BTreeMap::new();
        for (k, v) in &file {
            if k == "preset" {
                continue;
            }
            if extras.contains(&k.as_str()) {
                extra.insert(k.clone(), v.clone());
            } else {
                model.set(k, v).map_err(|e| CliError::usage(e.to_string()))?;
            }
        }
        model.scale = scale;
        for (k, v) in args.flag_pairs()? {
            model.set(&k, &v).map_err(|e| CliError::usage(e.to_string()))?;
        }
        model.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(Settings { model, extra, echo: BTreeMap::new() })
    }

    /// A command setting: the flag if given, else the file value, else `default`.
    pub fn pick<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: Option<T>) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.extra.get(key) {
                Some(s) => Some(s.parse().map_err(|_| CliError::usage(format!("{key}: bad value {s:?}")))?),
                None => default,
            },
        };
        if let Some(v) = &v {
            self.echo.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    pub fn require<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        self.pick(key, flag, None)?
            .ok_or_else(|| CliError::usage(format!("missing required --{}", key.replace('_', "-"))))
    }

    /// The effective configuration as a re-loadable config file, ending in a
/// blank line.
    pub fn echo(&self) -> String {
        let mut s = String::from("# effective config\n");
        s.push_str(&self.model.to_kv_text());
        for (k, v) in &self.echo {
            let _ = writeln!(s, "{k}={v}");
        }
        s.push('\n');
        s
    }
}
