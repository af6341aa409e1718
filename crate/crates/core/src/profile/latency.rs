use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{AttentionCounter, NoProbe, SpanTimer, Submodule};
use crate::error::{config, Result};
use crate::layers::{LayerKind, ModelWeights, RunOptions};
use crate::pruning::random_normal;
use crate::reuse::ReuseSchedule;
use crate::tensor::Matrix;

/// Exact CSV header of a latency report.
pub const CSV_HEADER: &str =
    "config,reuse,sparsity,threads,length,submodule,median_ms,iqr_ms,repeats";

/// Measurement settings.
#[derive(Debug, Clone)]
pub struct BenchOptions<'a> {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Seeds the fixed random input of each length.
    pub seed: u64,
    pub schedule: Option<&'a ReuseSchedule>,
    /// Label written to the `config` column.
    pub label: String,
    /// Fraction of heads removed, written to the `sparsity` column.
    pub sparsity: f64,
}

impl Default for BenchOptions<'_> {
    fn default() -> Self {
        Self {
            lengths: vec![128, 256, 512, 1024],
            repeats: 20,
            warmup: 3,
            threads: 1,
            seed: 0,
            schedule: None,
            label: "model".into(),
            sparsity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub config: String,
    pub reuse: String,
    pub sparsity: f64,
    pub threads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyRow {
    pub length: usize,
    /// A submodule name or `total`.
    pub submodule: String,
    /// NaN when the length failed.
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub repeats: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub meta: ReportMeta,
    pub rows: Vec<LatencyRow>,
}

#[derive(Serialize)]
struct FlatRecord<'a> {
    config: &'a str,
    reuse: &'a str,
    sparsity: f64,
    threads: usize,
    length: usize,
    submodule: &'a str,
    median_ms: f64,
    iqr_ms: f64,
    repeats: usize,
}

impl LatencyReport {
    pub fn median(&self, length: usize, submodule: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.length == length && r.submodule == submodule)
            .map(|r| r.median_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let m = &self.meta;
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{},{},{},{:.4},{:.4},{}",
                csv_field(&m.config),
                csv_field(&m.reuse),
                m.sparsity,
                m.threads,
                r.length,
                r.submodule,
                r.median_ms,
                r.iqr_ms,
                r.repeats
            );
        }
        out
    }

    /// The CSV records as a JSON array, with the metadata alongside.
    pub fn to_json(&self) -> String {
        let m = &self.meta;
        let records: Vec<FlatRecord<'_>> = self
            .rows
            .iter()
            .map(|r| FlatRecord {
                config: &m.config,
                reuse: &m.reuse,
                sparsity: m.sparsity,
                threads: m.threads,
                length: r.length,
                submodule: &r.submodule,
                median_ms: r.median_ms,
                iqr_ms: r.iqr_ms,
                repeats: r.repeats,
            })
            .collect();
        let doc = serde_json::json!({ "meta": m, "records": records });
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

/// Median and interquartile range (linear interpolation) of `samples` in ms.
pub(crate) fn median_iqr(samples: &mut [f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    samples.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (samples.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        samples[lo] + (samples[hi] - samples[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

fn meta(model: &ModelWeights, opts: &BenchOptions<'_>) -> ReportMeta {
    ReportMeta {
        config: opts.label.clone(),
        reuse: opts
            .schedule
            .map_or_else(|| format!("1x{}", model.num_layers()), ToString::to_string),
        sparsity: opts.sparsity,
        threads: opts.threads,
        repeats: opts.repeats,
        warmup: opts.warmup,
        seed: opts.seed,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    }
}

fn check(opts: &BenchOptions<'_>) -> Result<()> {
    if opts.repeats < 5 || opts.warmup < 1 {
        return config(format!(
            "need repeats >= 5 and warmup >= 1 (got {} and {})",
            opts.repeats, opts.warmup
        ));
    }
    if opts.lengths.is_empty() || opts.lengths.contains(&0) {
        return config("lengths must be a non-empty list of positive values");
    }
    Ok(())
}

fn input(model: &ModelWeights, len: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (len as u64).rotate_left(32));
    random_normal(len, model.config.dim, &mut rng)
}

fn failure(length: usize, submodule: &str, repeats: usize, err: String) -> LatencyRow {
    LatencyRow {
        length,
        submodule: submodule.into(),
        median_ms: f64::NAN,
        iqr_ms: f64::NAN,
        repeats,
        error: Some(err),
    }
}

fn row(length: usize, submodule: &str, samples: &mut [f64]) -> LatencyRow {
    let (median_ms, iqr_ms) = median_iqr(samples);
    LatencyRow {
        length,
        submodule: submodule.into(),
        median_ms,
        iqr_ms,
        repeats: samples.len(),
        error: None,
    }
}

/// Runs `f`, turning errors and panics (allocation failure included) into a message.
fn guarded<T>(f: impl FnOnce() -> Result<T>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn run_opts<'a>(opts: &BenchOptions<'a>) -> RunOptions<'a> {
    RunOptions {
        schedule: opts.schedule,
        gates: None,
        threads: opts.threads.max(1),
    }
}

/// Uninstrumented wall time of the whole stack per length, batch size 1.
pub fn bench_forward(model: &ModelWeights, opts: &BenchOptions<'_>) -> Result<LatencyReport> {
    check(opts)?;
    let run = run_opts(opts);
    let mut rows = Vec::new();
    for &len in &opts.lengths {
        let x = input(model, len, opts.seed);
        let samples = guarded(|| {
            let mut counter = AttentionCounter::default();
            for _ in 0..opts.warmup {
                model.run(&x, &run, &mut counter, &mut NoProbe)?;
            }
            let mut samples = Vec::with_capacity(opts.repeats);
            for _ in 0..opts.repeats {
                let start = Instant::now();
                let y = model.run(&x, &run, &mut counter, &mut NoProbe)?;
                samples.push(start.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(y);
            }
            Ok(samples)
        });
        rows.push(match samples {
            Ok(mut s) => row(len, "total", &mut s),
            Err(e) => failure(len, "total", opts.repeats, e),
        });
    }
    Ok(LatencyReport {
        meta: meta(model, opts),
        rows,
    })
}

fn submodules_of(model: &ModelWeights, schedule: Option<&ReuseSchedule>) -> Vec<Submodule> {
    let kind = model.config.layer_kind;
    let has_followers = schedule.is_some_and(|s| (0..s.num_layers()).any(|i| !s.is_leader(i)));
    Submodule::ALL
        .into_iter()
        .filter(|p| match p {
            Submodule::Ff => kind != LayerKind::AllAttention,
            Submodule::Conv | Submodule::Norm => kind == LayerKind::Conformer,
            Submodule::Sa => true,
            Submodule::ReuseSa => has_followers,
        })
        .collect()
}

/// Per-submodule wall time per length, with a timer around every submodule
/// call, plus the uninstrumented `total` measured in interleaved runs.
pub fn breakdown_latency(model: &ModelWeights, opts: &BenchOptions<'_>) -> Result<LatencyReport> {
    check(opts)?;
    let run = run_opts(opts);
    let parts = submodules_of(model, opts.schedule);
    let mut rows = Vec::new();
    for &len in &opts.lengths {
        let x = input(model, len, opts.seed);
        let measured = guarded(|| {
            let mut counter = AttentionCounter::default();
            let mut timer = SpanTimer::default();
            for _ in 0..opts.warmup {
                model.run(&x, &run, &mut counter, &mut NoProbe)?;
                model.run(&x, &run, &mut counter, &mut timer)?;
            }
            let mut totals = Vec::with_capacity(opts.repeats);
            let mut per_part = vec![Vec::with_capacity(opts.repeats); parts.len()];
            for _ in 0..opts.repeats {
                let start = Instant::now();
                std::hint::black_box(model.run(&x, &run, &mut counter, &mut NoProbe)?);
                totals.push(start.elapsed().as_secs_f64() * 1e3);
                timer.reset();
                std::hint::black_box(model.run(&x, &run, &mut counter, &mut timer)?);
                for (samples, &p) in per_part.iter_mut().zip(&parts) {
                    samples.push(timer.get(p).as_secs_f64() * 1e3);
                }
            }
            Ok((totals, per_part))
        });
        match measured {
            Ok((mut totals, mut per_part)) => {
                for (samples, p) in per_part.iter_mut().zip(&parts) {
                    rows.push(row(len, p.name(), samples));
                }
                rows.push(row(len, "total", &mut totals));
            }
            Err(e) => {
                for p in &parts {
                    rows.push(failure(len, p.name(), opts.repeats, e.clone()));
                }
                rows.push(failure(len, "total", opts.repeats, e));
            }
        }
    }
    Ok(LatencyReport {
        meta: meta(model, opts),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let (m, iqr) = median_iqr(&mut [4.0, 1.0, 3.0, 2.0]);
        assert_eq!(m, 2.5);
        assert_eq!(iqr, 1.5);
        assert!(median_iqr(&mut []).0.is_nan());
    }
}
