use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use attnbench::layers::{init_weights, ModelConfig, ModelWeights};
use attnbench::profile::{
    bench_forward, breakdown_latency, count_params, BenchOptions, LatencyReport,
};
use attnbench::pruning::{prune_heads, train_gates, GateSet, SyntheticTask, TrainOptions};
use attnbench::reuse::{build_reuse_model, parse_reuse_config, ReuseSchedule};
use attnbench::verify::run_all;
use serde_json::json;

use crate::config::{config_err, dump_config, load_config, parse_lengths, ConfigError, ReuseSpec};
use crate::tables::{
    concat_reports_csv, prune_table_csv, prune_table_json, reuse_grid_csv, reuse_grid_json,
    trajectory_csv, PruneRow,
};
use crate::{Format, ModelArgs, OutputArgs, PruneArgs, TimingArgs};

/// A failed `verify` run; exits with status 1.
#[derive(Debug)]
pub struct VerifyFailed(pub usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} verification check(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

pub struct Resolved {
    pub cfg: ModelConfig,
    pub reuse: Option<ReuseSpec>,
    pub gate_seed: Option<u64>,
    pub label: String,
}

pub fn resolve(m: &ModelArgs) -> Result<Resolved> {
    let mut r = match (&m.preset, &m.config) {
        (Some(p), None) => Resolved {
            cfg: ModelConfig::preset(p).map_err(|e| ConfigError(e.to_string()))?,
            reuse: None,
            gate_seed: None,
            label: p.clone(),
        },
        (None, Some(path)) => {
            let loaded = load_config(path)?;
            Resolved {
                cfg: loaded.model,
                reuse: loaded.reuse,
                gate_seed: loaded.gate_seed,
                label: path
                    .file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned()),
            }
        }
        _ => return config_err("give exactly one of --preset or --config"),
    };
    if let Some(seed) = m.seed {
        r.cfg.seed = seed;
    }
    for line in dump_config(&r.cfg).lines() {
        eprintln!("# {line}");
    }
    Ok(r)
}

fn schedule_of(r: &Resolved, flag: Option<&str>) -> Result<Option<ReuseSchedule>> {
    let spec = match flag {
        Some(text) => Some(ReuseSpec::Uniform(text.to_string())),
        None => r.reuse.clone(),
    };
    let s = spec.map(|s| s.schedule(r.cfg.num_layers)).transpose()?;
    if let Some(s) = &s {
        eprintln!("# reuse = {s}");
    }
    Ok(s)
}

fn weights_for(cfg: &ModelConfig, schedule: Option<&ReuseSchedule>) -> Result<ModelWeights> {
    Ok(match schedule {
        Some(s) => build_reuse_model(cfg, s)?,
        None => init_weights(cfg)?,
    })
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `<dir>/<stem>_<suffix>.<ext>` next to `out`.
pub fn sibling(out: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or("out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

fn bench_options<'a>(
    t: &TimingArgs,
    r: &Resolved,
    schedule: Option<&'a ReuseSchedule>,
) -> Result<BenchOptions<'a>> {
    Ok(BenchOptions {
        lengths: parse_lengths(&t.lengths)?,
        repeats: t.repeats,
        warmup: t.warmup,
        threads: t.threads,
        seed: r.cfg.seed,
        schedule,
        label: r.label.clone(),
        sparsity: 0.0,
    })
}

/// Writes a latency report in the requested format; with `--out`, the other
/// format goes alongside with the other extension.
fn emit_report(report: &LatencyReport, out: &OutputArgs) -> Result<()> {
    let (primary, secondary, ext) = match out.format {
        Format::Csv => (report.to_csv(), report.to_json(), "json"),
        Format::Json => (report.to_json(), report.to_csv(), "csv"),
    };
    write_out(out.out.as_deref(), &primary)?;
    if let Some(p) = &out.out {
        let path = p.with_extension(ext);
        if path != *p {
            fs::write(&path, secondary).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

pub fn bench(
    m: &ModelArgs,
    reuse: Option<&str>,
    t: &TimingArgs,
    out: &OutputArgs,
    breakdown: bool,
) -> Result<()> {
    let r = resolve(m)?;
    let schedule = schedule_of(&r, reuse)?;
    let opts = bench_options(t, &r, schedule.as_ref())?;
    let w = weights_for(&r.cfg, schedule.as_ref())?;
    let report = if breakdown {
        breakdown_latency(&w, &opts)?
    } else {
        bench_forward(&w, &opts)?
    };
    emit_report(&report, out)
}

pub fn params(m: &ModelArgs, reuse: Option<&str>, out: &OutputArgs) -> Result<()> {
    let r = resolve(m)?;
    let schedule = schedule_of(&r, reuse)?;
    let b = count_params(&r.cfg, schedule.as_ref(), None)?;
    let text = match out.format {
        Format::Csv => {
            let mut s = String::from("submodule,params,fraction\n");
            for (kind, count, frac) in b.rows() {
                s.push_str(&format!("{},{count},{frac:.4}\n", kind.name()));
            }
            s.push_str(&format!("total,{},1.0000\n", b.total()));
            s
        }
        Format::Json => {
            let rows: Vec<_> = b
                .rows()
                .into_iter()
                .map(|(k, c, f)| json!({ "submodule": k.name(), "params": c, "fraction": f }))
                .collect();
            serde_json::to_string_pretty(&json!({ "total": b.total(), "rows": rows }))? + "\n"
        }
    };
    write_out(out.out.as_deref(), &text)
}

/// `AxB` for every `A` in 1, 2, 4, 8 that divides `L`.
fn default_schedules(num_layers: usize) -> Vec<String> {
    [1, 2, 4, 8]
        .into_iter()
        .filter(|a| num_layers.is_multiple_of(*a))
        .map(|a| format!("{a}x{}", num_layers / a))
        .collect()
}

pub fn reuse(
    m: &ModelArgs,
    schedules: Option<&str>,
    t: &TimingArgs,
    out: &OutputArgs,
) -> Result<()> {
    let r = resolve(m)?;
    let names: Vec<String> = match schedules {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => default_schedules(r.cfg.num_layers),
    };
    let parsed = names
        .iter()
        .map(|n| {
            parse_reuse_config(n, r.cfg.num_layers).map_err(|e| ConfigError(e.to_string()).into())
        })
        .collect::<Result<Vec<_>>>()?;
    let lengths = parse_lengths(&t.lengths)?;
    let mut reports = Vec::new();
    for (name, s) in names.iter().zip(&parsed) {
        eprintln!("# schedule {name}");
        let w = build_reuse_model(&r.cfg, s)?;
        let opts = bench_options(t, &r, Some(s))?;
        reports.push((name.clone(), bench_forward(&w, &opts)?));
    }
    let primary = match out.format {
        Format::Csv => reuse_grid_csv(&lengths, &reports),
        Format::Json => reuse_grid_json(&lengths, &reports),
    };
    write_out(out.out.as_deref(), &primary)?;
    if let Some(p) = &out.out {
        let long = sibling(p, "long", "csv");
        fs::write(&long, concat_reports_csv(&reports))
            .with_context(|| format!("writing {}", long.display()))?;
    }
    Ok(())
}

pub fn prune(m: &ModelArgs, a: &PruneArgs, out: &OutputArgs) -> Result<()> {
    let r = resolve(m)?;
    if r.reuse.is_some() {
        return config_err("head pruning applies to models without attention map reuse");
    }
    let lambdas = a
        .lambda
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| ConfigError(format!("bad lambda {:?}", s.trim())).into())
        })
        .collect::<Result<Vec<f64>>>()?;
    if !(a.beta > 0.0) {
        return config_err(format!("beta must be positive, got {}", a.beta));
    }
    let gate_seed = r.gate_seed.unwrap_or(r.cfg.seed);
    eprintln!("# gate_seed = {gate_seed}");
    let w = init_weights(&r.cfg)?;
    let task = SyntheticTask::distillation(&w, a.length, a.batch, gate_seed)?;
    let opts = TrainOptions {
        steps: a.steps,
        learning_rate: a.lr,
        seed: gate_seed,
        ..TrainOptions::default()
    };
    let total_heads = r.cfg.num_layers * r.cfg.heads;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &lambda in &lambdas {
        let mut gates = GateSet::for_config(&r.cfg, lambda);
        gates.temperature = a.beta;
        let (trained, log) = train_gates(&w, &gates, &task, &opts)?;
        let pruned = prune_heads(&w, &trained)?;
        let kept: usize = pruned
            .layers
            .iter()
            .map(|l| l.attention().num_heads())
            .sum();
        eprintln!("# lambda {lambda}: {kept} of {total_heads} heads kept");
        rows.push(PruneRow {
            lambda,
            pruned: trained.pruned_per_layer(),
            total_heads,
        });
        runs.push((lambda, log));
    }
    let primary = match out.format {
        Format::Csv => prune_table_csv(&rows),
        Format::Json => prune_table_json(&rows) + "\n",
    };
    write_out(out.out.as_deref(), &primary)?;
    if let Some(p) = &out.out {
        let path = sibling(p, "trajectory", "csv");
        fs::write(&path, trajectory_csv(&runs))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn verify(m: &ModelArgs) -> Result<()> {
    let r = resolve(m)?;
    let checks = run_all(&r.cfg, r.cfg.seed)?;
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {} ({})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(VerifyFailed(failed).into());
    }
    Ok(())
}
