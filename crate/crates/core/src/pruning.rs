//! Gated attention-head pruning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::layers::{
    attend, position_table_for, spec_for, AttentionWeights, MapSource, ModelConfig, ModelWeights,
};
use crate::tensor::Matrix;

/// Default BinConcrete temperature.
pub const DEFAULT_TEMPERATURE: f64 = 2.0 / 3.0;
/// Gate logit every head starts from: open with probability about 0.88.
pub const DEFAULT_INIT_LOG_ALPHA: f64 = 2.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Stochastic,
    Deterministic,
}

/// Per-head gate logits of an `L x H` stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    /// `log_alpha[layer][head]`.
    pub log_alpha: Vec<Vec<f64>>,
    pub temperature: f64,
    pub mode: GateMode,
    /// Sparsity coefficient.
    pub lambda: f64,
}

impl GateSet {
    pub fn new(num_layers: usize, heads: usize, init_log_alpha: f64, lambda: f64) -> Self {
        Self {
            log_alpha: vec![vec![init_log_alpha; heads]; num_layers],
            temperature: DEFAULT_TEMPERATURE,
            mode: GateMode::Stochastic,
            lambda,
        }
    }

    pub fn for_config(cfg: &ModelConfig, lambda: f64) -> Self {
        Self::new(cfg.num_layers, cfg.heads, DEFAULT_INIT_LOG_ALPHA, lambda)
    }

    /// Deterministic gates that open exactly the heads marked `true`.
    pub fn from_mask(mask: &[Vec<bool>]) -> Self {
        let log_alpha = mask
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&open| if open { 10.0 } else { -10.0 })
                    .collect()
            })
            .collect();
        Self {
            log_alpha,
            temperature: DEFAULT_TEMPERATURE,
            mode: GateMode::Deterministic,
            lambda: 0.0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn num_gates(&self) -> usize {
        self.log_alpha.iter().map(Vec::len).sum()
    }

    /// Inference-time gates, `{0, 1}` per head.
    pub fn deterministic(&self) -> Vec<Vec<f32>> {
        self.log_alpha
            .iter()
            .map(|row| row.iter().map(|&a| deterministic_gate(a) as f32).collect())
            .collect()
    }

    /// Gates for noise `u` (same shape as the logits), following `mode`.
    pub fn gates_for_noise(&self, u: &[Vec<f64>]) -> Result<Vec<Vec<f32>>> {
        if self.mode == GateMode::Deterministic {
            return Ok(self.deterministic());
        }
        self.log_alpha
            .iter()
            .zip(u)
            .map(|(row, urow)| {
                row.iter()
                    .zip(urow)
                    .map(|(&a, &u)| binconcrete_gate(a, u, self.temperature).map(|g| g as f32))
                    .collect()
            })
            .collect()
    }

    /// Heads left open per layer at inference.
    pub fn open_per_layer(&self) -> Vec<usize> {
        self.log_alpha
            .iter()
            .map(|row| {
                row.iter()
                    .filter(|&&a| deterministic_gate(a) == 1.0)
                    .count()
            })
            .collect()
    }

    pub fn open_gates(&self) -> usize {
        self.open_per_layer().iter().sum()
    }

    pub fn pruned_per_layer(&self) -> Vec<usize> {
        self.log_alpha
            .iter()
            .zip(self.open_per_layer())
            .map(|(row, open)| row.len() - open)
            .collect()
    }
}

/// Uniform noise in the open interval `(0, 1)`, one draw per gate.
pub fn sample_noise(shape: &GateSet, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    shape
        .log_alpha
        .iter()
        .map(|row| {
            row.iter()
                .map(|_| rng.random_range(f64::MIN_POSITIVE..1.0))
                .collect()
        })
        .collect()
}

/// `sigmoid((log u - log(1 - u) + log_alpha) / beta)`.
pub fn binconcrete_gate(log_alpha: f64, u: f64, beta: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("noise u = {u} outside (0, 1)")));
    }
    if !(beta > 0.0) {
        return Err(Error::Domain(format!(
            "temperature {beta} must be positive"
        )));
    }
    Ok(sigmoid((u.ln() - (1.0 - u).ln() + log_alpha) / beta))
}

/// 1 when `sigmoid(log_alpha) > 0.5`, else 0.
pub fn deterministic_gate(log_alpha: f64) -> f64 {
    if sigmoid(log_alpha) > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// `(H / sum g) * sum_h g_h SA_h W_{O_h} + b_O`; `b_O` alone when every gate is 0.
pub fn gated_mhsa(
    x: &Matrix,
    w: &AttentionWeights,
    gates: &[f32],
    cfg: &ModelConfig,
) -> Result<Matrix> {
    let table = position_table_for(cfg, w, x.rows());
    let spec = crate::layers::AttnSpec {
        gates: Some(gates),
        ..spec_for(cfg, table.as_ref())
    };
    Ok(attend(x, w, &spec, MapSource::Compute { keep: false })?.0)
}

/// Mean open probability over all gates.
pub fn sparsity_loss(gates: &GateSet) -> f64 {
    let n = gates.num_gates();
    if n == 0 {
        return 0.0;
    }
    gates
        .log_alpha
        .iter()
        .flatten()
        .map(|&a| sigmoid(a))
        .sum::<f64>()
        / n as f64
}

/// `task + lambda * sparsity`.
pub fn total_loss(task_loss: f64, gates: &GateSet) -> f64 {
    task_loss + gates.lambda * sparsity_loss(gates)
}

/// Frozen-weight objective for gate training: mean squared error against the
/// ungated model's own outputs on seeded random inputs, or identically zero.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    inputs: Vec<Matrix>,
    targets: Vec<Matrix>,
}

impl SyntheticTask {
    /// `batch` inputs of length `seq_len` drawn from N(0, 1) with `seed`; the
    /// targets are the ungated forward of `teacher`.
    pub fn distillation(
        teacher: &ModelWeights,
        seq_len: usize,
        batch: usize,
        seed: u64,
    ) -> Result<Self> {
        if seq_len == 0 || batch == 0 {
            return config("distillation task needs positive seq_len and batch");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = teacher.config.dim;
        let inputs: Vec<Matrix> = (0..batch)
            .map(|_| random_normal(seq_len, d, &mut rng))
            .collect();
        let targets = inputs
            .iter()
            .map(|x| teacher.forward(x))
            .collect::<Result<_>>()?;
        Ok(Self { inputs, targets })
    }

    /// Task loss identically zero.
    pub fn null() -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn is_null(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Task loss of the gated model.
    pub fn loss(&self, model: &ModelWeights, gates: &[Vec<f32>]) -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in self.inputs.iter().zip(&self.targets) {
            let table = model.position_table(x.rows());
            let states = model.gated_states(x, 0, gates, table.as_ref())?;
            total += mse(states.last().unwrap_or(x), t);
        }
        Ok(self.mean(total))
    }

    fn mean(&self, total: f64) -> f64 {
        if self.inputs.is_empty() {
            0.0
        } else {
            total / self.inputs.len() as f64
        }
    }
}

/// Matrix of independent standard-normal draws.
pub fn random_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn mse(a: &Matrix, b: &Matrix) -> f64 {
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// Cached layer inputs of each task example under one gate sample.
struct Prefix {
    tables: Vec<Option<Matrix>>,
    /// `states[b][l]` is the input to layer `l`; the last entry is the output.
    states: Vec<Vec<Matrix>>,
}

fn prefix(model: &ModelWeights, task: &SyntheticTask, gates: &[Vec<f32>]) -> Result<Prefix> {
    let mut tables = Vec::new();
    let mut states = Vec::new();
    for x in &task.inputs {
        let table = model.position_table(x.rows());
        let mut s = vec![x.clone()];
        s.extend(model.gated_states(x, 0, gates, table.as_ref())?);
        tables.push(table);
        states.push(s);
    }
    Ok(Prefix { tables, states })
}

/// Task loss with the gates of layers `>= layer` replaced, reusing cached prefixes.
fn suffix_loss(
    model: &ModelWeights,
    task: &SyntheticTask,
    pre: &Prefix,
    layer: usize,
    gates: &[Vec<f32>],
) -> Result<f64> {
    let mut total = 0.0;
    for ((states, table), t) in pre.states.iter().zip(&pre.tables).zip(&task.targets) {
        let out = model.gated_states(&states[layer], layer, gates, table.as_ref())?;
        total += mse(out.last().unwrap_or(&states[layer]), t);
    }
    Ok(task.mean(total))
}

/// Central finite-difference gradient of the total loss with respect to every
/// gate logit. All `+`/`-` evaluations share the noise `u`.
pub fn estimate_gradient(
    model: &ModelWeights,
    gates: &GateSet,
    task: &SyntheticTask,
    u: &[Vec<f64>],
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    check_gate_shape(model, gates)?;
    let base = gates.gates_for_noise(u)?;
    let pre = if task.is_null() {
        None
    } else {
        Some(prefix(model, task, &base)?)
    };
    let mut grad = vec![Vec::new(); gates.num_layers()];
    let mut probe = gates.clone();
    let mut g = base.clone();
    for l in 0..gates.num_layers() {
        for h in 0..gates.log_alpha[l].len() {
            let a = gates.log_alpha[l][h];
            let mut eval = |value: f64| -> Result<f64> {
                probe.log_alpha[l][h] = value;
                g[l][h] = match gates.mode {
                    GateMode::Stochastic => {
                        binconcrete_gate(value, u[l][h], gates.temperature)? as f32
                    }
                    GateMode::Deterministic => deterministic_gate(value) as f32,
                };
                let task_loss = match &pre {
                    Some(p) => suffix_loss(model, task, p, l, &g)?,
                    None => 0.0,
                };
                Ok(total_loss(task_loss, &probe))
            };
            let plus = eval(a + step)?;
            let minus = eval(a - step)?;
            probe.log_alpha[l][h] = a;
            g[l][h] = base[l][h];
            grad[l].push((plus - minus) / (2.0 * step));
        }
    }
    Ok(grad)
}

/// Gate training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Finite-difference half step on the logits.
    pub fd_step: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 5.0,
            seed: 0,
            fd_step: 1e-2,
        }
    }
}

/// One row of the training log, recorded before the step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub sparsity_loss: f64,
    pub open_gates: usize,
    pub task_loss: f64,
}

/// Trains the gate logits by gradient descent on `task + lambda * sparsity`
/// with the model weights frozen. Returns the deterministic-mode gates and the
/// per-step log.
pub fn train_gates(
    model: &ModelWeights,
    gates: &GateSet,
    task: &SyntheticTask,
    opts: &TrainOptions,
) -> Result<(GateSet, Vec<StepLog>)> {
    check_gate_shape(model, gates)?;
    if !(opts.fd_step > 0.0) || !opts.learning_rate.is_finite() {
        return config("fd_step must be positive and learning_rate finite");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cur = GateSet {
        mode: GateMode::Stochastic,
        ..gates.clone()
    };
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let u = sample_noise(&cur, &mut rng);
        let task_loss = task.loss(model, &cur.gates_for_noise(&u)?)?;
        let total = total_loss(task_loss, &cur);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.push(StepLog {
            step,
            sparsity_loss: sparsity_loss(&cur),
            open_gates: cur.open_gates(),
            task_loss,
        });
        let grad = estimate_gradient(model, &cur, task, &u, opts.fd_step)?;
        for (row, grow) in cur.log_alpha.iter_mut().zip(&grad) {
            for (a, g) in row.iter_mut().zip(grow) {
                *a -= opts.learning_rate * g;
            }
        }
        if cur.log_alpha.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
    }
    cur.mode = GateMode::Deterministic;
    Ok((cur, log))
}

fn check_gate_shape(model: &ModelWeights, gates: &GateSet) -> Result<()> {
    if gates.num_layers() != model.layers.len() {
        return config(format!(
            "gates cover {} layers, model has {}",
            gates.num_layers(),
            model.layers.len()
        ));
    }
    for (i, (row, layer)) in gates.log_alpha.iter().zip(&model.layers).enumerate() {
        if row.len() != layer.attention().num_heads() {
            return config(format!(
                "layer {i}: {} gates for {} heads",
                row.len(),
                layer.attention().num_heads()
            ));
        }
    }
    Ok(())
}

/// Removes every head whose inference gate is 0, folding the `H / H_kept`
/// rescaling into the surviving output-projection rows.
pub fn prune_heads(model: &ModelWeights, gates: &GateSet) -> Result<ModelWeights> {
    check_gate_shape(model, gates)?;
    if model.config.value_mult != 1 || model.layers.iter().any(|l| !l.attention().computes_map()) {
        return config("head pruning applies to models without attention map reuse");
    }
    let keep = gates.deterministic();
    let mut out = model.clone();
    for (layer, mask) in out.layers.iter_mut().zip(&keep) {
        let attn = layer.attention_mut();
        let n = attn.num_heads();
        let kept: Vec<usize> = (0..n).filter(|&h| mask[h] == 1.0).collect();
        if kept.len() == n {
            continue;
        }
        let old_output = attn.output.take();
        let heads = kept.iter().map(|&h| attn.heads[h].clone()).collect();
        attn.heads = heads;
        if kept.is_empty() {
            continue;
        }
        let old_output = old_output.expect("layer with heads has an output projection");
        let vd = attn.value_head_dim;
        let blocks = kept
            .iter()
            .map(|&h| old_output.slice_rows(h * vd, vd))
            .collect::<Result<Vec<_>>>()?;
        let mut stacked = blocks[0].clone();
        for b in &blocks[1..] {
            stacked = stacked.concat_rows(b)?;
        }
        stacked.scale_in_place(n as f32 / kept.len() as f32);
        attn.output = Some(stacked);
    }
    Ok(out)
}

/// `pruned / total`.
pub fn sparsity_ratio(pruned: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Domain("sparsity ratio of zero heads".into()));
    }
    if pruned > total {
        return Err(Error::Domain(format!(
            "{pruned} pruned of only {total} heads"
        )));
    }
    Ok(pruned as f64 / total as f64)
}
