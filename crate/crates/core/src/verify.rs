//! Self-check suite: kernels and layers against naive loop oracles, reuse and
//! pruning identities, and the gate-gradient step-size check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    init_weights, relative_position_table, AttentionWeights, LayerKind, ModelConfig, RunOptions,
};
use crate::profile::{AttentionCounter, NoProbe};
use crate::pruning::{
    estimate_gradient, prune_heads, random_normal, sample_noise, GateSet, SyntheticTask,
};
use crate::reuse::{build_reuse_model, parse_reuse_config, reuse_forward, ReuseSchedule};
use crate::tensor::{layer_norm, matmul, softmax_rows, Matrix};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// `max |a - b| / max(1, max |b|)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f32 {
    if a.shape() != b.shape() {
        return f32::INFINITY;
    }
    a.max_abs_diff(b) / b.max_abs().max(1.0)
}

/// Triple-loop product in f64.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols())
            .map(|p| f64::from(a.get(i, p)) * f64::from(b.get(p, j)))
            .sum::<f64>() as f32
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &Matrix, t: usize, w: &Matrix, b: &[f32]) -> Vec<f64> {
    (0..w.cols())
        .map(|c| {
            f64::from(b[c])
                + (0..x.cols())
                    .map(|k| f64::from(x.get(t, k)) * f64::from(w.get(k, c)))
                    .sum::<f64>()
        })
        .collect()
}

fn rows_f64(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Element-by-element multi-head attention in f64, covering relative
/// positions, causal masking and persistent memory.
pub fn naive_mhsa(x: &Matrix, w: &AttentionWeights, cfg: &ModelConfig) -> Result<Matrix> {
    let (t, d) = x.shape();
    let vd = w.value_head_dim;
    let table = (cfg.layer_kind == LayerKind::Conformer).then(|| relative_position_table(t, d));
    let mut out = vec![vec![0.0f64; d]; t];
    for (h, head) in w.heads.iter().enumerate() {
        let (Some(wq), Some(wk)) = (&head.query, &head.key) else {
            return Err(Error::Config(
                "naive oracle needs query/key projections".into(),
            ));
        };
        let q: Vec<Vec<f64>> = (0..t)
            .map(|i| project(x, i, &wq.weight, &wq.bias))
            .collect();
        let mut k: Vec<Vec<f64>> = (0..t)
            .map(|i| project(x, i, &wk.weight, &wk.bias))
            .collect();
        let mut v: Vec<Vec<f64>> = (0..t)
            .map(|i| project(x, i, &head.value.weight, &head.value.bias))
            .collect();
        if let Some(m) = &head.memory_key {
            k.extend(rows_f64(m));
        }
        if let Some(m) = &head.memory_value {
            v.extend(rows_f64(m));
        }
        let rel: Option<Vec<Vec<f64>>> = match (&table, &head.position) {
            (Some(tab), Some(p)) => Some(
                (0..tab.rows())
                    .map(|r| project(tab, r, p, &vec![0.0; p.cols()]))
                    .collect(),
            ),
            _ => None,
        };
        let scale = 1.0 / (w.head_dim as f64).sqrt();
        let block = w.output_block(h)?;
        for i in 0..t {
            let mut logits: Vec<f64> = (0..k.len())
                .map(|j| {
                    let mut s = dot(&q[i], &k[j]);
                    if let (Some(rel), true) = (&rel, j < t) {
                        s += dot(&q[i], &rel[t - 1 + i - j]);
                    }
                    if cfg.causal() && j > i && j < t {
                        f64::NEG_INFINITY
                    } else {
                        s * scale
                    }
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits
                .iter_mut()
                .map(|l| {
                    *l = (*l - max).exp();
                    *l
                })
                .sum();
            let mut sa = vec![0.0f64; vd];
            for (j, p) in logits.iter().enumerate() {
                for c in 0..vd {
                    sa[c] += p / sum * v[j][c];
                }
            }
            for (c, o) in out[i].iter_mut().enumerate() {
                *o += (0..vd)
                    .map(|r| sa[r] * f64::from(block.get(r, c)))
                    .sum::<f64>();
            }
        }
    }
    Ok(Matrix::from_fn(t, d, |i, c| {
        (out[i][c] + f64::from(w.output_bias[c])) as f32
    }))
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check {
            name,
            passed,
            detail,
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Small model of the same layer kind for the oracle-heavy checks.
pub fn toy_config(cfg: &ModelConfig, num_layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers,
        dim: 16,
        heads: 4,
        conv_kernel: 5,
        persistent_slots: cfg.persistent_slots.min(4),
        value_mult: 1,
        seed,
        ..cfg.clone()
    }
}

fn tensor_kernels(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f32;
    let mut worst_sum = 0.0f32;
    for _ in 0..50 {
        let (m, k, n) = (
            rng.random_range(1..40),
            rng.random_range(1..300),
            rng.random_range(1..40),
        );
        let a = random_normal(m, k, rng);
        let b = random_normal(k, n, rng);
        worst = worst.max(relative_error(
            &matmul(&a, &b, false)?,
            &naive_matmul(&a, &b),
        ));
        let s = softmax_rows(&random_normal(m, n, rng).scale(5.0));
        for r in s.row_iter() {
            worst_sum = worst_sum.max((r.iter().sum::<f32>() - 1.0).abs());
        }
        let x = random_normal(m, n, rng);
        let ln = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], 1e-5)?;
        let oracle = Matrix::from_fn(m, n, |i, j| {
            let row: Vec<f64> = x.row(i).iter().map(|&v| f64::from(v)).collect();
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            ((row[j] - mean) / (var + 1e-5).sqrt()) as f32
        });
        worst = worst.max(relative_error(&ln, &oracle));
    }
    Ok((
        worst <= 1e-4 && worst_sum <= 1e-5,
        format!("max rel err {worst:.2e}, max |row sum - 1| {worst_sum:.2e}"),
    ))
}

fn mhsa_oracle(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f32;
    for i in 0..60 {
        let heads = [1, 2, 4][i % 3];
        let toy = ModelConfig {
            heads,
            ..toy_config(cfg, 1, rng.random())
        };
        let w = init_weights(&toy)?;
        let attn = w.layers[0].attention();
        let x = random_normal(rng.random_range(1..=8), toy.dim, rng);
        worst = worst.max(relative_error(
            &crate::layers::mhsa(&x, attn, &toy)?,
            &naive_mhsa(&x, attn, &toy)?,
        ));
    }
    Ok((worst <= 1e-5, format!("max rel err {worst:.2e}")))
}

fn reuse_identity(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let w = init_weights(cfg)?;
    let x = random_normal(16, cfg.dim, rng);
    let schedule = ReuseSchedule::baseline(cfg.num_layers);
    let base = w.forward(&x)?;
    let reused = reuse_forward(&w, &schedule, &x, &mut AttentionCounter::default())?;
    let same = base
        .as_slice()
        .iter()
        .zip(reused.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((
        same,
        format!("1x{} forward bitwise equal: {same}", cfg.num_layers),
    ))
}

fn attention_counts(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let l = cfg.num_layers;
    let x = random_normal(8, cfg.dim, rng);
    let mut ok = true;
    let mut seen = Vec::new();
    for m in (1..=l).filter(|m| l.is_multiple_of(*m)) {
        let s = parse_reuse_config(&format!("{m}x{}", l / m), l)?;
        let w = build_reuse_model(cfg, &s)?;
        let mut counter = AttentionCounter::default();
        reuse_forward(&w, &s, &x, &mut counter)?;
        ok &= counter.maps_computed == l / m && counter.total() == l;
        seen.push(format!("{s}:{}", counter.maps_computed));
    }
    Ok((ok, seen.join(" ")))
}

fn random_mask(layers: usize, heads: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    (0..layers)
        .map(|_| {
            let mut row: Vec<bool> = (0..heads).map(|_| rng.random_bool(0.5)).collect();
            let keep = rng.random_range(0..heads);
            row[keep] = true;
            row
        })
        .collect()
}

fn gated_pruned(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let toy = toy_config(cfg, 2, rng.random());
    let w = init_weights(&toy)?;
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let gates = GateSet::from_mask(&random_mask(toy.num_layers, toy.heads, rng));
        let pruned = prune_heads(&w, &gates)?;
        let x = random_normal(rng.random_range(1..=12), toy.dim, rng);
        let g = gates.deterministic();
        let opts = RunOptions {
            gates: Some(&g),
            ..RunOptions::default()
        };
        let gated = w.run(&x, &opts, &mut AttentionCounter::default(), &mut NoProbe)?;
        worst = worst.max(relative_error(&pruned.forward(&x)?, &gated));
    }
    Ok((worst <= 1e-4, format!("max rel err {worst:.2e}")))
}

/// Fraction of coordinates where gradients at step `h` and `h / 10` agree within 1e-2 relative.
pub fn gradient_agreement(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .flatten()
        .copied()
        .zip(b.iter().flatten().copied())
        .collect();
    let scale = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let agree = pairs
        .iter()
        .filter(|(x, y)| (x - y).abs() <= 1e-2 * x.abs().max(y.abs()).max(1e-3 * scale))
        .count();
    agree as f64 / pairs.len().max(1) as f64
}

fn gradient_check(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let toy = toy_config(cfg, 2, rng.random());
    let w = init_weights(&toy)?;
    let task = SyntheticTask::distillation(&w, 8, 2, rng.random())?;
    let gates = GateSet::for_config(&toy, 0.05);
    let u = sample_noise(&gates, rng);
    let coarse = estimate_gradient(&w, &gates, &task, &u, 1e-2)?;
    let fine = estimate_gradient(&w, &gates, &task, &u, 1e-3)?;
    let frac = gradient_agreement(&coarse, &fine);
    Ok((
        frac >= 0.95,
        format!("{:.1}% of coordinates agree", 100.0 * frac),
    ))
}

/// Runs every check for models shaped like `cfg`.
pub fn run_all(cfg: &ModelConfig, seed: u64) -> Result<Vec<Check>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        check("tensor_kernels", || tensor_kernels(&mut rng)),
        check("mhsa_oracle", || mhsa_oracle(cfg, &mut rng)),
        check("reuse_identity", || reuse_identity(cfg, &mut rng)),
        check("attention_counts", || attention_counts(cfg, &mut rng)),
        check("gated_pruned_equivalence", || gated_pruned(cfg, &mut rng)),
        check("gate_gradient_step_size", || gradient_check(cfg, &mut rng)),
    ])
}
