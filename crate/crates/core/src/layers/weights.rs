use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LayerKind, ModelConfig};
use crate::error::{config, Result};
use crate::profile::ParamKind;
use crate::tensor::{matmul_threads, Matrix};

/// `x * weight + bias`, weight stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_threads(x, 1)
    }

    pub(crate) fn forward_threads(&self, x: &Matrix, threads: usize) -> Result<Matrix> {
        let mut y = matmul_threads(x, &self.weight, false, threads)?;
        y.add_row_bias(&self.bias)?;
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }
}

/// One attention head. Reuse followers carry no query/key (and no positional
/// or persistent-key) parameters; they consume their leader's map.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: Option<Linear>,
    pub key: Option<Linear>,
    pub value: Linear,
    /// This head's `d x d_h` column block of the positional projection (Conformer).
    pub position: Option<Matrix>,
    /// Persistent keys, `N x d_h` (all-attention).
    pub memory_key: Option<Matrix>,
    /// Persistent values, `N x value_mult*d_h` (all-attention).
    pub memory_value: Option<Matrix>,
}

impl HeadWeights {
    pub fn computes_map(&self) -> bool {
        self.query.is_some() && self.key.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: Vec<HeadWeights>,
    /// Stacked per-head output blocks, `(heads * value_head_dim) x d`. `None` once
    /// every head has been pruned away.
    pub output: Option<Matrix>,
    pub output_bias: Vec<f32>,
    pub head_dim: usize,
    pub value_head_dim: usize,
}

impl AttentionWeights {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn dim(&self) -> usize {
        self.output_bias.len()
    }

    pub fn computes_map(&self) -> bool {
        self.heads.first().is_some_and(HeadWeights::computes_map)
    }

    /// `W_O` rows belonging to `head`.
    pub fn output_block(&self, head: usize) -> Result<Matrix> {
        let output = self
            .output
            .as_ref()
            .ok_or_else(|| crate::Error::Config("layer has no heads".into()))?;
        output.slice_rows(head * self.value_head_dim, self.value_head_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForwardWeights {
    pub fn param_count(&self) -> usize {
        self.up.weight.len() + self.up.bias.len() + self.down.weight.len() + self.down.bias.len()
    }
}

/// Pointwise d->2d, GLU, depthwise k, pointwise d->d.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub pointwise_in: Linear,
    pub depthwise: Matrix,
    pub depthwise_bias: Vec<f32>,
    pub pointwise_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub attention: AttentionWeights,
    pub attention_norm: LayerNormParams,
    pub ff: FeedForwardWeights,
    pub ff_norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformerLayer {
    pub ff1_norm: LayerNormParams,
    pub ff1: FeedForwardWeights,
    pub attention_norm: LayerNormParams,
    pub attention: AttentionWeights,
    pub conv_norm: LayerNormParams,
    pub conv: ConvWeights,
    pub ff2_norm: LayerNormParams,
    pub ff2: FeedForwardWeights,
    pub final_norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllAttentionLayer {
    pub attention: AttentionWeights,
    pub attention_norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Transformer(TransformerLayer),
    Conformer(ConformerLayer),
    AllAttention(AllAttentionLayer),
}

impl LayerWeights {
    pub fn attention(&self) -> &AttentionWeights {
        match self {
            LayerWeights::Transformer(l) => &l.attention,
            LayerWeights::Conformer(l) => &l.attention,
            LayerWeights::AllAttention(l) => &l.attention,
        }
    }

    pub fn attention_mut(&mut self) -> &mut AttentionWeights {
        match self {
            LayerWeights::Transformer(l) => &mut l.attention,
            LayerWeights::Conformer(l) => &mut l.attention,
            LayerWeights::AllAttention(l) => &mut l.attention,
        }
    }
}

/// Full parameter set of an `L`-layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
}

/// Per-layer structure needed to rebuild a weight skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerShape {
    pub heads: usize,
    pub computes_map: bool,
}

/// Borrowed view of one parameter tensor, in traversal order.
pub struct ParamRef<'a> {
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub values: &'a [f32],
}

pub(crate) struct ParamMut<'a> {
    pub rows: usize,
    pub cols: usize,
    pub values: &'a mut [f32],
}

/// Deterministic initializer: uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// or all zeros for loading skeletons.
struct Init {
    rng: Option<ChaCha8Rng>,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let Some(rng) = self.rng.as_mut() else {
            return Matrix::zeros(rows, cols);
        };
        let bound = 1.0 / (fan_in as f32).sqrt();
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
    }

    fn linear(&mut self, in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            weight: self.matrix(in_dim, out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    fn ff(&mut self, cfg: &ModelConfig) -> FeedForwardWeights {
        FeedForwardWeights {
            up: self.linear(cfg.dim, cfg.ff_dim()),
            down: self.linear(cfg.ff_dim(), cfg.dim),
        }
    }

    fn attention(&mut self, cfg: &ModelConfig, shape: LayerShape) -> AttentionWeights {
        let (d, dh, vd) = (cfg.dim, cfg.head_dim(), cfg.value_head_dim());
        let n = cfg.persistent_slots;
        let heads = (0..shape.heads)
            .map(|_| {
                let qk = shape.computes_map;
                HeadWeights {
                    query: qk.then(|| self.linear(d, dh)),
                    key: qk.then(|| self.linear(d, dh)),
                    value: self.linear(d, vd),
                    position: (qk && cfg.layer_kind == LayerKind::Conformer)
                        .then(|| self.matrix(d, dh, d)),
                    memory_key: (qk && n > 0).then(|| self.matrix(n, dh, dh)),
                    memory_value: (n > 0).then(|| self.matrix(n, vd, dh)),
                }
            })
            .collect();
        let output = (shape.heads > 0).then(|| self.matrix(shape.heads * vd, d, cfg.heads * vd));
        AttentionWeights {
            heads,
            output,
            output_bias: vec![0.0; d],
            head_dim: dh,
            value_head_dim: vd,
        }
    }

    fn layer(&mut self, cfg: &ModelConfig, shape: LayerShape) -> LayerWeights {
        let d = cfg.dim;
        let ln = || LayerNormParams::identity(d);
        match cfg.layer_kind {
            LayerKind::Transformer => LayerWeights::Transformer(TransformerLayer {
                attention: self.attention(cfg, shape),
                attention_norm: ln(),
                ff: self.ff(cfg),
                ff_norm: ln(),
            }),
            LayerKind::Conformer => {
                let ff1 = self.ff(cfg);
                let attention = self.attention(cfg, shape);
                let conv = ConvWeights {
                    pointwise_in: self.linear(d, 2 * d),
                    depthwise: self.matrix(cfg.conv_kernel, d, cfg.conv_kernel),
                    depthwise_bias: vec![0.0; d],
                    pointwise_out: self.linear(d, d),
                };
                let ff2 = self.ff(cfg);
                LayerWeights::Conformer(ConformerLayer {
                    ff1_norm: ln(),
                    ff1,
                    attention_norm: ln(),
                    attention,
                    conv_norm: ln(),
                    conv,
                    ff2_norm: ln(),
                    ff2,
                    final_norm: ln(),
                })
            }
            LayerKind::AllAttention => LayerWeights::AllAttention(AllAttentionLayer {
                attention: self.attention(cfg, shape),
                attention_norm: ln(),
            }),
        }
    }
}

/// Seeded initialization of a plain (`value_mult = 1`) stack.
pub fn init_weights(cfg: &ModelConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    if cfg.value_mult != 1 {
        return config(
            "value_mult 2 requires a reuse schedule (build the model with build_reuse_model)",
        );
    }
    let shapes = vec![
        LayerShape {
            heads: cfg.heads,
            computes_map: true
        };
        cfg.num_layers
    ];
    Ok(build(cfg, &shapes, true))
}

pub(crate) fn build(cfg: &ModelConfig, shapes: &[LayerShape], random: bool) -> ModelWeights {
    let mut init = Init {
        rng: random.then(|| ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let layers = shapes.iter().map(|&s| init.layer(cfg, s)).collect();
    ModelWeights {
        config: cfg.clone(),
        layers,
    }
}

// Walks every parameter tensor in the fixed traversal order shared by the
// weight file, the initializer layout and the parameter counter. Expands to a
// shared walk (`as_slice`) or a mutable one (`as_mut_slice, mut`).
macro_rules! walk_params {
    ($layers:expr, $f:ident, $acc:ident $(, $m:tt)?) => {
        for layer in $layers {
            match layer {
                LayerWeights::Transformer(l) => {
                    walk_params!(@attn l.attention, $f, $acc $(, $m)?);
                    walk_params!(@ln l.attention_norm, $f $(, $m)?);
                    walk_params!(@ff l.ff, $f, $acc $(, $m)?);
                    walk_params!(@ln l.ff_norm, $f $(, $m)?);
                }
                LayerWeights::Conformer(l) => {
                    walk_params!(@ln l.ff1_norm, $f $(, $m)?);
                    walk_params!(@ff l.ff1, $f, $acc $(, $m)?);
                    walk_params!(@ln l.attention_norm, $f $(, $m)?);
                    walk_params!(@attn l.attention, $f, $acc $(, $m)?);
                    walk_params!(@ln l.conv_norm, $f $(, $m)?);
                    walk_params!(@mat ParamKind::Conv, l.conv.pointwise_in.weight, $f, $acc $(, $m)?);
                    walk_params!(@vec ParamKind::Conv, l.conv.pointwise_in.bias, $f $(, $m)?);
                    walk_params!(@mat ParamKind::Conv, l.conv.depthwise, $f, $acc $(, $m)?);
                    walk_params!(@vec ParamKind::Conv, l.conv.depthwise_bias, $f $(, $m)?);
                    walk_params!(@mat ParamKind::Conv, l.conv.pointwise_out.weight, $f, $acc $(, $m)?);
                    walk_params!(@vec ParamKind::Conv, l.conv.pointwise_out.bias, $f $(, $m)?);
                    walk_params!(@ln l.ff2_norm, $f $(, $m)?);
                    walk_params!(@ff l.ff2, $f, $acc $(, $m)?);
                    walk_params!(@ln l.final_norm, $f $(, $m)?);
                }
                LayerWeights::AllAttention(l) => {
                    walk_params!(@attn l.attention, $f, $acc $(, $m)?);
                    walk_params!(@ln l.attention_norm, $f $(, $m)?);
                }
            }
        }
    };
    (@mat $kind:expr, $e:expr, $f:ident, $acc:ident $(, $m:tt)?) => {{
        let x = & $($m)? $e;
        let (r, c) = x.shape();
        $f($kind, r, c, x.$acc());
    }};
    (@vec $kind:expr, $e:expr, $f:ident $(, $m:tt)?) => {{
        let x = & $($m)? $e[..];
        $f($kind, 1, x.len(), x);
    }};
    (@ln $n:expr, $f:ident $(, $m:tt)?) => {{
        walk_params!(@vec ParamKind::Ln, $n.gain, $f $(, $m)?);
        walk_params!(@vec ParamKind::Ln, $n.bias, $f $(, $m)?);
    }};
    (@ff $ff:expr, $f:ident, $acc:ident $(, $m:tt)?) => {{
        walk_params!(@mat ParamKind::Ff, $ff.up.weight, $f, $acc $(, $m)?);
        walk_params!(@vec ParamKind::Ff, $ff.up.bias, $f $(, $m)?);
        walk_params!(@mat ParamKind::Ff, $ff.down.weight, $f, $acc $(, $m)?);
        walk_params!(@vec ParamKind::Ff, $ff.down.bias, $f $(, $m)?);
    }};
    (@attn $a:expr, $f:ident, $acc:ident $(, $m:tt)?) => {{
        for h in & $($m)? $a.heads {
            if let Some(lin) = & $($m)? h.query {
                walk_params!(@mat ParamKind::Sa, lin.weight, $f, $acc $(, $m)?);
                walk_params!(@vec ParamKind::Sa, lin.bias, $f $(, $m)?);
            }
            if let Some(lin) = & $($m)? h.key {
                walk_params!(@mat ParamKind::Sa, lin.weight, $f, $acc $(, $m)?);
                walk_params!(@vec ParamKind::Sa, lin.bias, $f $(, $m)?);
            }
            walk_params!(@mat ParamKind::Sa, h.value.weight, $f, $acc $(, $m)?);
            walk_params!(@vec ParamKind::Sa, h.value.bias, $f $(, $m)?);
            if let Some(p) = & $($m)? h.position {
                walk_params!(@mat ParamKind::Sa, *p, $f, $acc $(, $m)?);
            }
            if let Some(p) = & $($m)? h.memory_key {
                walk_params!(@mat ParamKind::PersistentMemory, *p, $f, $acc $(, $m)?);
            }
            if let Some(p) = & $($m)? h.memory_value {
                walk_params!(@mat ParamKind::PersistentMemory, *p, $f, $acc $(, $m)?);
            }
        }
        if let Some(o) = & $($m)? $a.output {
            walk_params!(@mat ParamKind::Sa, *o, $f, $acc $(, $m)?);
        }
        walk_params!(@vec ParamKind::Sa, $a.output_bias, $f $(, $m)?);
    }};
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every parameter tensor in the fixed traversal order used by the weight file.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        let mut push = |kind, rows, cols, values| {
            out.push(ParamRef {
                kind,
                rows,
                cols,
                values,
            })
        };
        walk_params!(self.layers.iter(), push, as_slice);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        let mut push = |_: ParamKind, rows, cols, values| out.push(ParamMut { rows, cols, values });
        walk_params!(self.layers.iter_mut(), push, as_mut_slice, mut);
        out
    }

    /// Total number of scalar parameters held.
    pub fn scalar_count(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }

    pub(crate) fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape {
                heads: l.attention().num_heads(),
                computes_map: l.attention().computes_map(),
            })
            .collect()
    }
}
