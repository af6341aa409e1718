use std::cell::RefCell;

use super::attention::{
    attend, position_table_for, relative_position_table, spec_for, AttnSpec, MapSource,
};
use super::config::{LayerKind, ModelConfig};
use super::weights::{
    AllAttentionLayer, ConformerLayer, ConvWeights, FeedForwardWeights, LayerNormParams,
    LayerWeights, ModelWeights, TransformerLayer,
};
use crate::error::{Error, Result};
use crate::profile::{AttentionCounter, NoProbe, Probe, Submodule};
use crate::reuse::{ReuseSchedule, Role};
use crate::tensor::{
    depthwise_conv1d, layer_norm, pointwise_nonlinear, Activation, Matrix, LAYER_NORM_EPS,
};

// Submodule bodies stay out of line so instrumented and plain passes run the
// same machine code.
#[inline(never)]
fn norm(x: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    layer_norm(x, &p.gain, &p.bias, LAYER_NORM_EPS)
}

/// `phi(x W_1 + b_1) W_2 + b_2`.
pub fn feed_forward(x: &Matrix, w: &FeedForwardWeights, activation: Activation) -> Result<Matrix> {
    feed_forward_threads(x, w, activation, 1)
}

#[inline(never)]
fn feed_forward_threads(
    x: &Matrix,
    w: &FeedForwardWeights,
    activation: Activation,
    threads: usize,
) -> Result<Matrix> {
    let hidden = pointwise_nonlinear(&w.up.forward_threads(x, threads)?, activation)?;
    w.down.forward_threads(&hidden, threads)
}

/// Conformer convolution block without its LayerNorm and residual.
pub fn conv_module(x: &Matrix, w: &ConvWeights) -> Result<Matrix> {
    conv_module_threads(x, w, 1)
}

#[inline(never)]
fn conv_module_threads(x: &Matrix, w: &ConvWeights, threads: usize) -> Result<Matrix> {
    let gated = pointwise_nonlinear(
        &w.pointwise_in.forward_threads(x, threads)?,
        Activation::Glu,
    )?;
    let mut mixed = depthwise_conv1d(&gated, &w.depthwise)?;
    mixed.add_row_bias(&w.depthwise_bias)?;
    w.pointwise_out.forward_threads(&mixed, threads)
}

/// Everything a single layer needs besides its weights and input.
pub(crate) struct LayerRun<'a, P> {
    pub cfg: &'a ModelConfig,
    pub attn: AttnSpec<'a>,
    pub source: MapSource<'a>,
    pub probe: &'a mut P,
}

type LayerOut = (Matrix, Option<Vec<Matrix>>);

fn sa_part(source: MapSource<'_>) -> Submodule {
    match source {
        MapSource::Compute { .. } => Submodule::Sa,
        MapSource::Reuse(_) => Submodule::ReuseSa,
    }
}

fn run_transformer<P: Probe>(
    x: &Matrix,
    l: &TransformerLayer,
    run: LayerRun<'_, P>,
) -> Result<LayerOut> {
    let LayerRun {
        cfg,
        attn,
        source,
        probe,
    } = run;
    let (z, maps) = probe.span(sa_part(source), || -> Result<LayerOut> {
        let (a, maps) = attend(x, &l.attention, &attn, source)?;
        Ok((norm(&a.add(x)?, &l.attention_norm)?, maps))
    })?;
    let out = probe.span(Submodule::Ff, || {
        let f = feed_forward_threads(&z, &l.ff, cfg.activation, attn.threads)?;
        norm(&f.add(&z)?, &l.ff_norm)
    })?;
    Ok((out, maps))
}

fn run_conformer<P: Probe>(
    x: &Matrix,
    l: &ConformerLayer,
    run: LayerRun<'_, P>,
) -> Result<LayerOut> {
    let LayerRun {
        cfg,
        attn,
        source,
        probe,
    } = run;
    let threads = attn.threads;
    let half_ff = |x: &Matrix, n: &LayerNormParams, w: &FeedForwardWeights| -> Result<Matrix> {
        x.add_scaled(
            &feed_forward_threads(&norm(x, n)?, w, cfg.activation, threads)?,
            0.5,
        )
    };
    let x1 = probe.span(Submodule::Ff, || half_ff(x, &l.ff1_norm, &l.ff1))?;
    let (x2, maps) = probe.span(sa_part(source), || -> Result<LayerOut> {
        let (a, maps) = attend(&norm(&x1, &l.attention_norm)?, &l.attention, &attn, source)?;
        Ok((x1.add(&a)?, maps))
    })?;
    let x3 = probe.span(Submodule::Conv, || {
        x2.add(&conv_module_threads(
            &norm(&x2, &l.conv_norm)?,
            &l.conv,
            threads,
        )?)
    })?;
    let x4 = probe.span(Submodule::Ff, || half_ff(&x3, &l.ff2_norm, &l.ff2))?;
    let out = probe.span(Submodule::Norm, || norm(&x4, &l.final_norm))?;
    Ok((out, maps))
}

fn run_all_attention<P: Probe>(
    x: &Matrix,
    l: &AllAttentionLayer,
    run: LayerRun<'_, P>,
) -> Result<LayerOut> {
    let LayerRun {
        attn,
        source,
        probe,
        ..
    } = run;
    probe.span(sa_part(source), || {
        let (a, maps) = attend(x, &l.attention, &attn, source)?;
        Ok((norm(&a.add(x)?, &l.attention_norm)?, maps))
    })
}

pub(crate) fn run_layer<P: Probe>(
    x: &Matrix,
    layer: &LayerWeights,
    run: LayerRun<'_, P>,
) -> Result<LayerOut> {
    match layer {
        LayerWeights::Transformer(l) => run_transformer(x, l, run),
        LayerWeights::Conformer(l) => run_conformer(x, l, run),
        LayerWeights::AllAttention(l) => run_all_attention(x, l, run),
    }
}

fn standalone<'a, P: Probe>(
    cfg: &'a ModelConfig,
    table: Option<&'a Matrix>,
    probe: &'a mut P,
) -> LayerRun<'a, P> {
    LayerRun {
        cfg,
        attn: spec_for(cfg, table),
        source: MapSource::Compute { keep: false },
        probe,
    }
}

fn check_input(x: &Matrix, cfg: &ModelConfig) -> Result<()> {
    if x.cols() != cfg.dim {
        return Err(Error::Shape {
            op: "layer input",
            left: x.shape(),
            right: (x.rows(), cfg.dim),
        });
    }
    Ok(())
}

/// `Z = LN(MHSA(x) + x)`, `out = LN(FF(Z) + Z)`.
pub fn transformer_layer(x: &Matrix, w: &TransformerLayer, cfg: &ModelConfig) -> Result<Matrix> {
    check_input(x, cfg)?;
    Ok(run_transformer(x, w, standalone(cfg, None, &mut NoProbe))?.0)
}

/// Half-step FF, MHSA with relative positions, Conv, half-step FF, then LN.
pub fn conformer_layer(x: &Matrix, w: &ConformerLayer, cfg: &ModelConfig) -> Result<Matrix> {
    check_input(x, cfg)?;
    if cfg.layer_kind != LayerKind::Conformer {
        return Err(Error::Config(
            "conformer_layer needs layer_kind = conformer".into(),
        ));
    }
    let table = position_table_for(cfg, &w.attention, x.rows());
    Ok(run_conformer(x, w, standalone(cfg, table.as_ref(), &mut NoProbe))?.0)
}

/// Causal MHSA over the sequence plus persistent slots, then residual and LN.
pub fn all_attention_layer(x: &Matrix, w: &AllAttentionLayer, cfg: &ModelConfig) -> Result<Matrix> {
    check_input(x, cfg)?;
    if cfg.layer_kind != LayerKind::AllAttention {
        return Err(Error::Config(
            "all_attention_layer needs layer_kind = all_attention".into(),
        ));
    }
    Ok(run_all_attention(x, w, standalone(cfg, None, &mut NoProbe))?.0)
}

/// Options for a full-stack forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions<'a> {
    /// Reuse schedule; `None` means every layer computes its own maps.
    pub schedule: Option<&'a ReuseSchedule>,
    /// Per-layer head gates for the rescaled gated MHSA.
    pub gates: Option<&'a [Vec<f32>]>,
    /// Worker count for the matrix products.
    pub threads: usize,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            schedule: None,
            gates: None,
            threads: 1,
        }
    }
}

impl ModelWeights {
    /// Plain stacked forward pass.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.run(
            x,
            &RunOptions::default(),
            &mut AttentionCounter::default(),
            &mut NoProbe,
        )
    }

    /// Forward pass with optional reuse schedule, gates, worker count, map
    /// counting and submodule timing.
    pub fn run<P: Probe>(
        &self,
        x: &Matrix,
        opts: &RunOptions<'_>,
        counter: &mut AttentionCounter,
        probe: &mut P,
    ) -> Result<Matrix> {
        let cfg = &self.config;
        check_input(x, cfg)?;
        let n_layers = self.layers.len();
        if let Some(s) = opts.schedule {
            if s.num_layers() != n_layers {
                return Err(Error::Config(format!(
                    "schedule covers {} layers, model has {n_layers}",
                    s.num_layers()
                )));
            }
        }
        if let Some(g) = opts.gates {
            if g.len() != n_layers {
                return Err(Error::Config(format!(
                    "gates given for {} layers, model has {n_layers}",
                    g.len()
                )));
            }
        }
        let table = probe.span(Submodule::Sa, || self.position_table(x.rows()));

        let mut h = x.clone();
        // Maps of the current reuse group, recycled when the next leader runs.
        let mut stored: Option<(usize, Vec<Matrix>)> = None;
        let spare = RefCell::new(Vec::new());
        for (idx, layer) in self.layers.iter().enumerate() {
            let role = opts.schedule.map_or(
                Role::Leader {
                    group: idx,
                    followers: 0,
                },
                |s| s.role(idx),
            );
            let n_heads = layer.attention().num_heads();
            let source = match role {
                Role::Leader { followers, .. } => {
                    if n_heads > 0 && !layer.attention().computes_map() {
                        return Err(Error::Config(format!(
                            "layer {idx} leads a reuse group but has no query/key projections"
                        )));
                    }
                    // the previous group's maps become buffers for this one
                    if let Some((_, old)) = stored.take() {
                        spare.borrow_mut().extend(old);
                    }
                    MapSource::Compute {
                        keep: followers > 0,
                    }
                }
                Role::Follower { group } => match &stored {
                    Some((g, maps)) if *g == group => MapSource::Reuse(maps),
                    _ => {
                        return Err(Error::Invariant(format!(
                            "layer {idx} follows group {group} but no leader map is stored"
                        )))
                    }
                },
            };
            let attn = AttnSpec {
                position: table.as_ref(),
                causal: cfg.causal(),
                gates: opts.gates.map(|g| g[idx].as_slice()),
                threads: opts.threads.max(1),
                spare: Some(&spare),
            };
            let run = LayerRun {
                cfg,
                attn,
                source,
                probe: &mut *probe,
            };
            let (out, maps) = run_layer(&h, layer, run)?;
            match role {
                Role::Leader { group, .. } => {
                    if n_heads > 0 {
                        counter.maps_computed += 1;
                    }
                    if let Some(maps) = maps {
                        stored = Some((group, maps));
                    }
                }
                Role::Follower { .. } => counter.maps_reused += 1,
            }
            h = out;
        }
        Ok(h)
    }

    /// Sinusoidal relative-position table, when some layer needs one.
    pub(crate) fn position_table(&self, len: usize) -> Option<Matrix> {
        let needed = self.config.layer_kind == LayerKind::Conformer
            && self.layers.iter().any(|l| l.attention().computes_map());
        needed.then(|| relative_position_table(len, self.config.dim))
    }

    /// Gated pass over layers `start..` from the input of layer `start`,
    /// returning every layer output. No reuse.
    pub(crate) fn gated_states(
        &self,
        h: &Matrix,
        start: usize,
        gates: &[Vec<f32>],
        table: Option<&Matrix>,
    ) -> Result<Vec<Matrix>> {
        let cfg = &self.config;
        let mut out: Vec<Matrix> = Vec::with_capacity(self.layers.len().saturating_sub(start));
        for (idx, layer) in self.layers.iter().enumerate().skip(start) {
            let run = LayerRun {
                cfg,
                attn: AttnSpec {
                    position: table,
                    causal: cfg.causal(),
                    gates: Some(&gates[idx]),
                    threads: 1,
                    spare: None,
                },
                source: MapSource::Compute { keep: false },
                probe: &mut NoProbe,
            };
            let (o, _) = run_layer(out.last().unwrap_or(h), layer, run)?;
            out.push(o);
        }
        Ok(out)
    }
}
