use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Post-LN MHSA + FF.
    Transformer,
    /// FF, MHSA, Conv, FF with a closing LayerNorm.
    Conformer,
    /// Causal MHSA with persistent memory slots and no FF.
    AllAttention,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Transformer => "transformer",
            LayerKind::Conformer => "conformer",
            LayerKind::AllAttention => "all_attention",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            LayerKind::Transformer => 0,
            LayerKind::Conformer => 1,
            LayerKind::AllAttention => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LayerKind::Transformer),
            1 => Some(LayerKind::Conformer),
            2 => Some(LayerKind::AllAttention),
            _ => None,
        }
    }
}

fn default_ff_mult() -> usize {
    4
}

fn default_conv_kernel() -> usize {
    31
}

fn default_activation() -> Activation {
    Activation::Swish
}

fn default_value_mult() -> usize {
    1
}

/// Architecture hyperparameters of a layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_kind: LayerKind,
    pub num_layers: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    /// Persistent memory slots per head (all-attention only).
    #[serde(default)]
    pub persistent_slots: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// 2 widens values and the output projection; only valid with a reuse schedule.
    #[serde(default = "default_value_mult")]
    pub value_mult: usize,
    #[serde(default)]
    pub seed: u64,
}

pub const PRESET_NAMES: [&str; 2] = ["conformer-m", "allattention-lm"];

impl ModelConfig {
    pub fn transformer(num_layers: usize, dim: usize, heads: usize) -> Self {
        Self {
            layer_kind: LayerKind::Transformer,
            num_layers,
            dim,
            heads,
            ff_mult: default_ff_mult(),
            conv_kernel: default_conv_kernel(),
            persistent_slots: 0,
            activation: Activation::Relu,
            value_mult: 1,
            seed: 0,
        }
    }

    pub fn conformer(num_layers: usize, dim: usize, heads: usize) -> Self {
        Self {
            layer_kind: LayerKind::Conformer,
            activation: Activation::Swish,
            ..Self::transformer(num_layers, dim, heads)
        }
    }

    pub fn all_attention(
        num_layers: usize,
        dim: usize,
        heads: usize,
        persistent_slots: usize,
    ) -> Self {
        Self {
            layer_kind: LayerKind::AllAttention,
            persistent_slots,
            ..Self::transformer(num_layers, dim, heads)
        }
    }

    /// `conformer-m` (L=16, d=256, H=4) or `allattention-lm` (L=16, d=512, H=8, N=64).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "conformer-m" => Ok(Self::conformer(16, 256, 4)),
            "allattention-lm" => Ok(Self::all_attention(16, 512, 8, 64)),
            other => config(format!(
                "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
            )),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn value_head_dim(&self) -> usize {
        self.value_mult * self.head_dim()
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_mult * self.dim
    }

    /// Autoregressive masking is on for all-attention stacks only.
    pub fn causal(&self) -> bool {
        self.layer_kind == LayerKind::AllAttention
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.dim == 0 || self.heads == 0 {
            return config("num_layers, dim and heads must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.ff_mult == 0 {
            return config("ff_mult must be positive");
        }
        if self.layer_kind == LayerKind::Conformer && self.conv_kernel.is_multiple_of(2) {
            return config(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.persistent_slots > 0 && self.layer_kind != LayerKind::AllAttention {
            return config("persistent_slots is only valid for all_attention layers");
        }
        if !matches!(self.value_mult, 1 | 2) {
            return config(format!(
                "value_mult must be 1 or 2, got {}",
                self.value_mult
            ));
        }
        if self.activation == Activation::Glu {
            return config("glu changes the feature width and cannot be the FF activation");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_exactly() {
        let c = ModelConfig::preset("conformer-m").unwrap();
        assert_eq!(
            (
                c.layer_kind,
                c.num_layers,
                c.dim,
                c.heads,
                c.ff_mult,
                c.conv_kernel
            ),
            (LayerKind::Conformer, 16, 256, 4, 4, 31)
        );
        let a = ModelConfig::preset("allattention-lm").unwrap();
        assert_eq!(
            (
                a.layer_kind,
                a.num_layers,
                a.dim,
                a.heads,
                a.persistent_slots
            ),
            (LayerKind::AllAttention, 16, 512, 8, 64)
        );
        assert_eq!(a.num_layers * a.heads, 128);
        assert!(ModelConfig::preset("nope").is_err());
    }

    #[test]
    fn validation_rules() {
        assert!(ModelConfig::conformer(2, 255, 4).validate().is_err());
        let mut c = ModelConfig::conformer(2, 16, 4);
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
        let mut t = ModelConfig::transformer(2, 16, 4);
        t.persistent_slots = 2;
        assert!(t.validate().is_err());
        t.persistent_slots = 0;
        t.value_mult = 3;
        assert!(t.validate().is_err());
    }
}
