//! Multi-head self-attention.
//!
//! One code path serves every variant: plain, Conformer (relative positional
//! logits), all-attention (causal mask and persistent key/value slots), reuse
//! followers (map supplied by the group leader) and gated heads.

use super::config::{LayerKind, ModelConfig};
use super::weights::{AttentionWeights, HeadWeights};
use crate::error::{Error, Result};
use std::cell::RefCell;

use crate::tensor::{matmul, matmul_into, matmul_threads, softmax_in_place, softmax_rows, Matrix};

/// Sinusoidal table for relative offsets `-(T-1)..=T-1`; row `r` encodes offset `r - (T-1)`.
pub fn relative_position_table(len: usize, dim: usize) -> Matrix {
    let offset = len as f32 - 1.0;
    Matrix::from_fn(2 * len - 1, dim, |r, c| {
        let rel = r as f32 - offset;
        let freq = (-((2 * (c / 2)) as f32) / dim as f32 * 10000f32.ln()).exp();
        if c % 2 == 0 {
            (rel * freq).sin()
        } else {
            (rel * freq).cos()
        }
    })
}

/// Per-call attention settings.
#[derive(Clone, Copy)]
pub(crate) struct AttnSpec<'a> {
    pub position: Option<&'a Matrix>,
    pub causal: bool,
    pub gates: Option<&'a [f32]>,
    pub threads: usize,
    /// Released maps whose allocations new maps may take over.
    pub spare: Option<&'a RefCell<Vec<Matrix>>>,
}

/// Where the attention maps of a layer come from.
#[derive(Clone, Copy)]
pub(crate) enum MapSource<'a> {
    /// Compute from this layer's Q/K; `keep` returns the maps for followers.
    Compute { keep: bool },
    /// Use maps stored by the group leader.
    Reuse(&'a [Matrix]),
}

fn missing_qk() -> Error {
    Error::Config("head has no query/key projection (reuse follower)".into())
}

/// Q, K and V of one head: each `x * W + b`.
pub fn project_qkv(
    x: &Matrix,
    w: &AttentionWeights,
    head: usize,
) -> Result<(Matrix, Matrix, Matrix)> {
    let h = w.heads.get(head).ok_or_else(|| {
        Error::Config(format!(
            "head {head} out of range ({} heads)",
            w.num_heads()
        ))
    })?;
    let q = h.query.as_ref().ok_or_else(missing_qk)?.forward(x)?;
    let k = h.key.as_ref().ok_or_else(missing_qk)?.forward(x)?;
    let v = h.value.forward(x)?;
    Ok((q, k, v))
}

/// `softmax(Q K^T / sqrt(d_h))`.
pub fn attention_map(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let logits = matmul(q, k, true)?;
    Ok(softmax_rows(&logits.scale(1.0 / (q.cols() as f32).sqrt())))
}

fn head_map(
    x: &Matrix,
    head: &HeadWeights,
    head_dim: usize,
    spec: &AttnSpec<'_>,
) -> Result<Matrix> {
    let t = x.rows();
    let q = head
        .query
        .as_ref()
        .ok_or_else(missing_qk)?
        .forward_threads(x, spec.threads)?;
    let mut keys = head
        .key
        .as_ref()
        .ok_or_else(missing_qk)?
        .forward_threads(x, spec.threads)?;
    if let Some(mem) = &head.memory_key {
        keys = keys.concat_rows(mem)?;
    }
    let buffer = spec
        .spare
        .and_then(|s| s.borrow_mut().pop())
        .map_or_else(Vec::new, Matrix::into_vec);
    let mut logits = matmul_into(&q, &keys, true, spec.threads, buffer)?;
    if let (Some(table), Some(proj)) = (spec.position, &head.position) {
        if table.rows() != 2 * t - 1 {
            return Err(Error::Shape {
                op: "relative position table",
                left: table.shape(),
                right: x.shape(),
            });
        }
        let rel = matmul_threads(table, proj, false, spec.threads)?;
        let by_offset = matmul_threads(&q, &rel, true, spec.threads)?;
        for i in 0..t {
            let src = by_offset.row(i);
            let dst = &mut logits.row_mut(i)[..t];
            for (j, v) in dst.iter_mut().enumerate() {
                *v += src[t - 1 + i - j];
            }
        }
    }
    logits.scale_in_place(1.0 / (head_dim as f32).sqrt());
    let width = logits.cols();
    for (i, row) in logits.as_mut_slice().chunks_exact_mut(width).enumerate() {
        if spec.causal {
            // future sequence positions only; persistent slots sit past `t`
            row[i + 1..t].fill(f32::NEG_INFINITY);
        }
        softmax_in_place(row);
    }
    Ok(logits)
}

/// Runs the attention submodule. Returns the output and, when asked to keep
/// them, the per-head maps.
#[inline(never)]
pub(crate) fn attend(
    x: &Matrix,
    w: &AttentionWeights,
    spec: &AttnSpec<'_>,
    source: MapSource<'_>,
) -> Result<(Matrix, Option<Vec<Matrix>>)> {
    let (t, d) = x.shape();
    if d != w.dim() {
        return Err(Error::Shape {
            op: "mhsa input",
            left: x.shape(),
            right: (w.dim(), w.dim()),
        });
    }
    let n_heads = w.num_heads();
    if let Some(g) = spec.gates {
        if g.len() != n_heads {
            return Err(Error::Shape {
                op: "gates",
                left: (1, g.len()),
                right: (1, n_heads),
            });
        }
    }
    if let MapSource::Reuse(maps) = source {
        if maps.len() != n_heads {
            return Err(Error::Invariant(format!(
                "leader stored {} maps, follower has {n_heads} heads",
                maps.len()
            )));
        }
    }
    // H / sum(g); zero when every gate is closed, which leaves only the bias.
    let gate_scale = match spec.gates {
        Some(g) => {
            let sum: f32 = g.iter().sum();
            if sum > 0.0 {
                n_heads as f32 / sum
            } else {
                0.0
            }
        }
        None => 1.0,
    };
    let bias_only = || -> Result<Matrix> {
        let mut out = Matrix::zeros(t, d);
        out.add_row_bias(&w.output_bias)?;
        Ok(out)
    };
    let Some(output) = w.output.as_ref().filter(|_| gate_scale > 0.0) else {
        return Ok((bias_only()?, None));
    };

    let vd = w.value_head_dim;
    let keep = matches!(source, MapSource::Compute { keep: true });
    let mut kept = keep.then(|| Vec::with_capacity(n_heads));
    let mut concat = Matrix::zeros(t, n_heads * vd);
    for (h, head) in w.heads.iter().enumerate() {
        let owned = match source {
            MapSource::Compute { .. } => Some(head_map(x, head, w.head_dim, spec)?),
            MapSource::Reuse(_) => None,
        };
        let map = match (&owned, source) {
            (Some(m), _) => m,
            (None, MapSource::Reuse(maps)) => &maps[h],
            (None, MapSource::Compute { .. }) => unreachable!(),
        };
        let mut values = head.value.forward_threads(x, spec.threads)?;
        if let Some(mem) = &head.memory_value {
            values = values.concat_rows(mem)?;
        }
        let mut sa = matmul_threads(map, &values, false, spec.threads)?;
        if let Some(g) = spec.gates {
            sa.scale_in_place(g[h] * gate_scale);
        }
        for i in 0..t {
            concat.row_mut(i)[h * vd..(h + 1) * vd].copy_from_slice(sa.row(i));
        }
        if let (Some(store), Some(m)) = (kept.as_mut(), owned) {
            store.push(m);
        }
    }
    let mut out = matmul_threads(&concat, output, false, spec.threads)?;
    out.add_row_bias(&w.output_bias)?;
    Ok((out, kept))
}

pub(crate) fn spec_for<'a>(cfg: &ModelConfig, position: Option<&'a Matrix>) -> AttnSpec<'a> {
    AttnSpec {
        position,
        causal: cfg.causal(),
        gates: None,
        threads: 1,
        spare: None,
    }
}

pub(crate) fn position_table_for(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    t: usize,
) -> Option<Matrix> {
    let needed =
        cfg.layer_kind == LayerKind::Conformer && w.heads.iter().any(|h| h.position.is_some());
    needed.then(|| relative_position_table(t, cfg.dim))
}

/// `Concat_h(A_h V_h) W_O + b_O` with the layer kind's positional term, causal
/// mask and persistent memory applied.
pub fn mhsa(x: &Matrix, w: &AttentionWeights, cfg: &ModelConfig) -> Result<Matrix> {
    let table = position_table_for(cfg, w, x.rows());
    let spec = spec_for(cfg, table.as_ref());
    Ok(attend(x, w, &spec, MapSource::Compute { keep: false })?.0)
}

/// The same submodule written as `sum_h SA_h W_{O_h} + b_O`.
pub fn mhsa_head_sum(x: &Matrix, w: &AttentionWeights, cfg: &ModelConfig) -> Result<Matrix> {
    let table = position_table_for(cfg, w, x.rows());
    let spec = spec_for(cfg, table.as_ref());
    let mut out = Matrix::zeros(x.rows(), w.dim());
    for (h, head) in w.heads.iter().enumerate() {
        let map = head_map(x, head, w.head_dim, &spec)?;
        let mut values = head.value.forward(x)?;
        if let Some(mem) = &head.memory_value {
            values = values.concat_rows(mem)?;
        }
        let sa = matmul(&map, &values, false)?;
        out = out.add(&matmul(&sa, &w.output_block(h)?, false)?)?;
    }
    out.add_row_bias(&w.output_bias)?;
    Ok(out)
}

/// Per-head attention maps of one layer, as the forward pass computes them.
pub fn head_maps(x: &Matrix, w: &AttentionWeights, cfg: &ModelConfig) -> Result<Vec<Matrix>> {
    let table = position_table_for(cfg, w, x.rows());
    let spec = spec_for(cfg, table.as_ref());
    w.heads
        .iter()
        .map(|h| head_map(x, h, w.head_dim, &spec))
        .collect()
}
