use serde::Serialize;

use crate::error::{config, Result};
use crate::layers::{LayerKind, ModelConfig};
use crate::pruning::GateSet;
use crate::reuse::ReuseSchedule;

/// Multiply-add counts of one forward pass, summed over layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopEstimate {
    /// `x W_Q`, `x W_K` in layers that compute maps.
    pub qk_projection: u64,
    pub value_projection: u64,
    pub output_projection: u64,
    /// Relative positional logits: table projection and `Q R^T`.
    pub position: u64,
    /// `Q K^T` (sequence and persistent keys).
    pub map: u64,
    /// `A V`.
    pub weighted_sum: u64,
    pub ff: u64,
    pub conv: u64,
}

impl FlopEstimate {
    /// Attention terms; each scales with the number of surviving heads.
    pub fn sa(&self) -> u64 {
        self.qk_projection
            + self.value_projection
            + self.output_projection
            + self.position
            + self.map
            + self.weighted_sum
    }

    pub fn total(&self) -> u64 {
        self.sa() + self.ff + self.conv
    }
}

/// Multiply-add estimate at sequence length `len`. Softmax, LayerNorm and
/// elementwise work are not counted.
pub fn flops_estimate(
    cfg: &ModelConfig,
    len: usize,
    schedule: Option<&ReuseSchedule>,
    gates: Option<&GateSet>,
) -> Result<FlopEstimate> {
    cfg.validate()?;
    if len == 0 {
        return config("sequence length must be at least 1");
    }
    let l = cfg.num_layers;
    if let Some(s) = schedule.filter(|s| s.num_layers() != l) {
        return config(format!(
            "schedule covers {} layers, config has L = {l}",
            s.num_layers()
        ));
    }
    let kept = match gates {
        Some(g) if g.num_layers() != l => {
            return config("gate set shape does not match the config")
        }
        Some(g) => g.open_per_layer(),
        None => vec![cfg.heads; l],
    };
    let t = len as u64;
    let (d, dh) = (cfg.dim as u64, cfg.head_dim() as u64);
    let vd = if schedule.is_some() {
        2 * dh
    } else {
        cfg.value_head_dim() as u64
    };
    let keys = t + cfg.persistent_slots as u64;
    let f = cfg.ff_dim() as u64;
    let ffs = match cfg.layer_kind {
        LayerKind::Transformer => 1,
        LayerKind::Conformer => 2,
        LayerKind::AllAttention => 0,
    };

    let mut e = FlopEstimate::default();
    for (layer, &heads) in kept.iter().enumerate() {
        let h = heads as u64;
        if schedule.is_none_or(|s| s.is_leader(layer)) {
            e.qk_projection += h * 2 * t * d * dh;
            e.map += h * t * keys * dh;
            if cfg.layer_kind == LayerKind::Conformer {
                let offsets = 2 * t - 1;
                e.position += h * (offsets * d * dh + t * offsets * dh);
            }
        }
        e.value_projection += h * t * d * vd;
        e.weighted_sum += h * t * keys * vd;
        e.output_projection += h * t * vd * d;
        e.ff += ffs * 2 * t * d * f;
        if cfg.layer_kind == LayerKind::Conformer {
            e.conv += t * d * 2 * d + t * cfg.conv_kernel as u64 * d + t * d * d;
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reuse::parse_reuse_config;

    #[test]
    fn reuse_cuts_map_term() {
        let cfg = ModelConfig::preset("conformer-m").unwrap();
        let base = flops_estimate(&cfg, 512, None, None).unwrap();
        let s = parse_reuse_config("4x4", 16).unwrap();
        let reuse = flops_estimate(&cfg, 512, Some(&s), None).unwrap();
        assert_eq!(reuse.map * 4, base.map);
        // plain transformer terms: 4 T d^2 projections, 2 T^2 d map + weighted sum
        let tr = flops_estimate(&ModelConfig::transformer(1, 64, 4), 32, None, None).unwrap();
        assert_eq!(
            tr.qk_projection + tr.value_projection + tr.output_projection,
            4 * 32 * 64 * 64
        );
        assert_eq!(tr.map + tr.weighted_sum, 2 * 32 * 32 * 64);
    }
}
