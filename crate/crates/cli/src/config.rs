//! Model configuration files.
//!
//! Two syntaxes are accepted. JSON (a `.json` file, or any file whose first
//! non-blank character is `{`):
//!
//! ```json
//! { "preset": "conformer-m", "num_layers": 8, "reuse": "4x2" }
//! ```
//!
//! or `key = value` lines, with `#` comments:
//!
//! ```text
//! layer_kind = all_attention
//! num_layers = 4
//! dim = 64
//! heads = 4
//! persistent_slots = 8
//! reuse_groups = 0,1,2 | 3
//! ```
//!
//! Keys: `preset`, every model field (`layer_kind`, `num_layers`, `dim`,
//! `heads`, `ff_mult`, `conv_kernel`, `persistent_slots`, `activation`,
//! `value_mult`, `seed`), `reuse` (`AxB`), `reuse_groups` (explicit consecutive
//! groups) and `gate_seed`. Without a preset, `layer_kind`, `num_layers`, `dim`
//! and `heads` are required; the rest default to ff_mult 4, conv_kernel 31,
//! persistent_slots 0, activation relu (transformer, all_attention) or swish
//! (conformer), value_mult 1, seed 0. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use attnbench::layers::{LayerKind, ModelConfig};
use attnbench::reuse::{parse_reuse_config, ReuseSchedule};
use attnbench::tensor::Activation;
use serde::Deserialize;
use serde_json::{Map, Value};

/// Problems with the user's configuration; these exit with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(ConfigError(msg.into()).into())
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    layer_kind: Option<LayerKind>,
    num_layers: Option<usize>,
    dim: Option<usize>,
    heads: Option<usize>,
    ff_mult: Option<usize>,
    conv_kernel: Option<usize>,
    persistent_slots: Option<usize>,
    activation: Option<Activation>,
    value_mult: Option<usize>,
    seed: Option<u64>,
    reuse: Option<String>,
    reuse_groups: Option<Vec<Vec<usize>>>,
    gate_seed: Option<u64>,
}

macro_rules! merge_fields {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

/// Reuse request carried by a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReuseSpec {
    Uniform(String),
    Groups(Vec<Vec<usize>>),
}

impl ReuseSpec {
    pub fn schedule(&self, num_layers: usize) -> anyhow::Result<ReuseSchedule> {
        let s = match self {
            ReuseSpec::Uniform(text) => parse_reuse_config(text, num_layers),
            ReuseSpec::Groups(groups) => ReuseSchedule::from_groups(groups, num_layers),
        };
        s.map_err(|e| ConfigError(e.to_string()).into())
    }
}

/// A resolved configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub model: ModelConfig,
    pub reuse: Option<ReuseSpec>,
    pub gate_seed: Option<u64>,
}

pub fn load_config(path: &Path) -> anyhow::Result<LoadedConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let is_json =
        path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    let file = if is_json {
        serde_json::from_str::<FileConfig>(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
    } else {
        parse_key_values(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
    };
    resolve(file)
}

const NUMERIC_KEYS: [&str; 9] = [
    "num_layers",
    "dim",
    "heads",
    "ff_mult",
    "conv_kernel",
    "persistent_slots",
    "value_mult",
    "seed",
    "gate_seed",
];

fn parse_groups(v: &str) -> Result<Vec<Vec<usize>>, String> {
    v.split('|')
        .map(|g| {
            g.split(',')
                .map(|i| {
                    i.trim()
                        .parse::<usize>()
                        .map_err(|_| format!("bad layer index {:?}", i.trim()))
                })
                .collect()
        })
        .collect()
}

fn parse_key_values(text: &str) -> Result<FileConfig, String> {
    let mut out = FileConfig::default();
    let mut seen = Map::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "line {line_no}: expected `key = value`, got {line:?}"
            ));
        };
        let (key, value) = (key.trim(), value.trim());
        if seen.insert(key.to_string(), Value::Null).is_some() {
            return Err(format!("line {line_no}: duplicate key `{key}`"));
        }
        let json = if NUMERIC_KEYS.contains(&key) {
            let v: u64 = value.parse().map_err(|_| {
                format!("line {line_no}: `{key}` needs a non-negative integer, got {value:?}")
            })?;
            Value::from(v)
        } else if key == "reuse_groups" {
            serde_json::to_value(parse_groups(value).map_err(|e| format!("line {line_no}: {e}"))?)
                .expect("groups serialize")
        } else {
            Value::String(value.to_string())
        };
        let mut single = Map::new();
        single.insert(key.to_string(), json);
        let one: FileConfig = serde_json::from_value(Value::Object(single))
            .map_err(|e| format!("line {line_no}: {e}"))?;
        merge_fields!(
            out,
            one,
            preset,
            layer_kind,
            num_layers,
            dim,
            heads,
            ff_mult,
            conv_kernel,
            persistent_slots,
            activation,
            value_mult,
            seed,
            reuse,
            reuse_groups,
            gate_seed
        );
    }
    Ok(out)
}

fn resolve(f: FileConfig) -> anyhow::Result<LoadedConfig> {
    let mut cfg = match &f.preset {
        Some(p) => ModelConfig::preset(p).map_err(|e| ConfigError(e.to_string()))?,
        None => {
            let (Some(kind), Some(l), Some(d), Some(h)) =
                (f.layer_kind, f.num_layers, f.dim, f.heads)
            else {
                return config_err(
                    "without a preset, layer_kind, num_layers, dim and heads are required",
                );
            };
            match kind {
                LayerKind::Transformer => ModelConfig::transformer(l, d, h),
                LayerKind::Conformer => ModelConfig::conformer(l, d, h),
                LayerKind::AllAttention => ModelConfig::all_attention(l, d, h, 0),
            }
        }
    };
    if let Some(kind) = f.layer_kind.filter(|&k| k != cfg.layer_kind) {
        // a preset with a different layer kind keeps its dimensions
        let base = match kind {
            LayerKind::Transformer => ModelConfig::transformer(cfg.num_layers, cfg.dim, cfg.heads),
            LayerKind::Conformer => ModelConfig::conformer(cfg.num_layers, cfg.dim, cfg.heads),
            LayerKind::AllAttention => {
                ModelConfig::all_attention(cfg.num_layers, cfg.dim, cfg.heads, 0)
            }
        };
        cfg = base.with_seed(cfg.seed);
    }
    cfg.num_layers = f.num_layers.unwrap_or(cfg.num_layers);
    cfg.dim = f.dim.unwrap_or(cfg.dim);
    cfg.heads = f.heads.unwrap_or(cfg.heads);
    cfg.ff_mult = f.ff_mult.unwrap_or(cfg.ff_mult);
    cfg.conv_kernel = f.conv_kernel.unwrap_or(cfg.conv_kernel);
    cfg.persistent_slots = f.persistent_slots.unwrap_or(cfg.persistent_slots);
    cfg.activation = f.activation.unwrap_or(cfg.activation);
    cfg.value_mult = f.value_mult.unwrap_or(cfg.value_mult);
    cfg.seed = f.seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;

    let reuse = match (f.reuse, f.reuse_groups) {
        (Some(_), Some(_)) => return config_err("give either reuse or reuse_groups, not both"),
        (Some(text), None) => Some(ReuseSpec::Uniform(text)),
        (None, Some(groups)) => Some(ReuseSpec::Groups(groups)),
        (None, None) => None,
    };
    if let Some(r) = &reuse {
        r.schedule(cfg.num_layers)?;
    }
    if cfg.value_mult == 2 && reuse.is_none() {
        return config_err("value_mult = 2 requires a reuse schedule");
    }
    Ok(LoadedConfig {
        model: cfg,
        reuse,
        gate_seed: f.gate_seed,
    })
}

/// `key = value` text that [`load_config`] reads back to the same config.
pub fn dump_config(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "layer_kind = {}", cfg.layer_kind.name());
    for (k, v) in [
        ("num_layers", cfg.num_layers),
        ("dim", cfg.dim),
        ("heads", cfg.heads),
        ("ff_mult", cfg.ff_mult),
        ("conv_kernel", cfg.conv_kernel),
        ("persistent_slots", cfg.persistent_slots),
    ] {
        let _ = writeln!(s, "{k} = {v}");
    }
    let _ = writeln!(s, "activation = {}", cfg.activation.name());
    let _ = writeln!(s, "value_mult = {}", cfg.value_mult);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    s
}

/// `a,b,c` or `a..b`, the latter meaning `a, 2a, 3a, ..., b`.
pub fn parse_lengths(text: &str) -> anyhow::Result<Vec<usize>> {
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| ConfigError(format!("bad length {:?} in {text:?}", s.trim())))
    };
    if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if b < a || b % a != 0 {
            return config_err(format!(
                "length range {a}..{b} needs an end that is a multiple of the start"
            ));
        }
        return Ok((1..=b / a).map(|i| i * a).collect());
    }
    text.split(',').map(|s| Ok(num(s)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths() {
        assert_eq!(
            parse_lengths("128..1024").unwrap(),
            vec![128, 256, 384, 512, 640, 768, 896, 1024]
        );
        assert_eq!(parse_lengths("16, 32,64").unwrap(), vec![16, 32, 64]);
        assert!(parse_lengths("100..250").is_err());
        assert!(parse_lengths("0,4").is_err());
    }

    #[test]
    fn key_values_with_line_context() {
        let f = parse_key_values("# toy\nlayer_kind = conformer\nnum_layers=2\n").unwrap();
        assert_eq!(f.layer_kind, Some(LayerKind::Conformer));
        assert_eq!(f.num_layers, Some(2));
        let err = parse_key_values("dim = 4\nwidth = 3\n").unwrap_err();
        assert!(err.starts_with("line 2:") && err.contains("width"), "{err}");
        let err = parse_key_values("dim = four\n").unwrap_err();
        assert!(err.starts_with("line 1:"), "{err}");
        let err = parse_key_values("layer_kind = lstm\n").unwrap_err();
        assert!(err.starts_with("line 1:"), "{err}");
        let f = parse_key_values("reuse_groups = 0,1,2 | 3").unwrap();
        assert_eq!(f.reuse_groups, Some(vec![vec![0, 1, 2], vec![3]]));
    }
}
