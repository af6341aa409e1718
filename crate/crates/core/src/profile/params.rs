use serde::Serialize;

use super::ParamKind;
use crate::error::{config, Result};
use crate::layers::{LayerKind, ModelConfig, ModelWeights};
use crate::pruning::GateSet;
use crate::reuse::ReuseSchedule;

/// Scalars of one submodule kind: matrix entries and vector entries
/// (biases, LayerNorm gains and shifts).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub weights: usize,
    pub vectors: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.vectors
    }
}

/// Parameter counts per submodule kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    counts: [ParamCount; 5],
}

impl ParamBreakdown {
    /// Totals per kind taken from live weights.
    pub fn from_weights(w: &ModelWeights) -> Self {
        let mut out = Self::default();
        for p in w.params() {
            out.counts[p.kind.index()].weights += p.values.len();
        }
        out
    }

    pub fn get(&self, kind: ParamKind) -> ParamCount {
        self.counts[kind.index()]
    }

    pub fn count(&self, kind: ParamKind) -> usize {
        self.get(kind).total()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(ParamCount::total).sum()
    }

    pub fn fraction(&self, kind: ParamKind) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.count(kind) as f64 / t as f64,
        }
    }

    /// `(kind, count, fraction)` for every kind.
    pub fn rows(&self) -> Vec<(ParamKind, usize, f64)> {
        ParamKind::ALL
            .iter()
            .map(|&k| (k, self.count(k), self.fraction(k)))
            .collect()
    }

    fn add(&mut self, kind: ParamKind, weights: usize, vectors: usize) {
        let c = &mut self.counts[kind.index()];
        c.weights += weights;
        c.vectors += vectors;
    }
}

/// Exact parameter counts from the architecture shapes. A schedule doubles
/// the value width everywhere and drops follower query/key/positional/
/// persistent-key parameters; gates drop every head whose inference gate is 0.
pub fn count_params(
    cfg: &ModelConfig,
    schedule: Option<&ReuseSchedule>,
    gates: Option<&GateSet>,
) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let l = cfg.num_layers;
    if let Some(s) = schedule.filter(|s| s.num_layers() != l) {
        return config(format!(
            "schedule covers {} layers, config has L = {l}",
            s.num_layers()
        ));
    }
    let kept = match gates {
        Some(g) if g.num_layers() != l || g.log_alpha.iter().any(|r| r.len() != cfg.heads) => {
            return config("gate set shape does not match the config");
        }
        Some(g) => g.open_per_layer(),
        None => vec![cfg.heads; l],
    };
    let (d, dh, n) = (cfg.dim, cfg.head_dim(), cfg.persistent_slots);
    let vd = if schedule.is_some() {
        2 * dh
    } else {
        cfg.value_head_dim()
    };
    let f = cfg.ff_dim();
    let (ffs, norms) = match cfg.layer_kind {
        LayerKind::Transformer => (1, 2),
        LayerKind::Conformer => (2, 5),
        LayerKind::AllAttention => (0, 1),
    };

    let mut b = ParamBreakdown::default();
    for (layer, &heads) in kept.iter().enumerate() {
        let computes_map = schedule.is_none_or(|s| s.is_leader(layer));
        let mut head_w = d * vd;
        let mut head_v = vd;
        if computes_map {
            head_w += 2 * d * dh;
            head_v += 2 * dh;
            if cfg.layer_kind == LayerKind::Conformer {
                head_w += d * dh;
            }
        }
        b.add(ParamKind::Sa, heads * (head_w + vd * d), heads * head_v + d);
        let memory = n * vd + if computes_map { n * dh } else { 0 };
        b.add(ParamKind::PersistentMemory, heads * memory, 0);
        b.add(ParamKind::Ff, ffs * 2 * d * f, ffs * (f + d));
        b.add(ParamKind::Ln, 0, norms * 2 * d);
        if cfg.layer_kind == LayerKind::Conformer {
            b.add(
                ParamKind::Conv,
                d * 2 * d + cfg.conv_kernel * d + d * d,
                2 * d + d + d,
            );
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conformer_m_shares() {
        let b = count_params(&ModelConfig::preset("conformer-m").unwrap(), None, None).unwrap();
        let ff = b.fraction(ParamKind::Ff);
        let sa = b.fraction(ParamKind::Sa);
        assert!((ff - 0.66).abs() <= 0.02, "{ff}");
        assert!((sa - 0.21).abs() <= 0.02, "{sa}");
        let sum: f64 = b.rows().iter().map(|r| r.2).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // 8 d^2 matrix weights per feed-forward block, two blocks per layer
        assert_eq!(b.get(ParamKind::Ff).weights, 16 * 2 * 8 * 256 * 256);
    }
}
