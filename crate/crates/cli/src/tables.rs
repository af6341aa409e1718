use std::fmt::Write as _;

use attnbench::profile::LatencyReport;
use attnbench::pruning::StepLog;
use serde_json::json;

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "NaN".into()
    }
}

/// Configs by lengths grid of total medians in ms, header `config,<len>,...`.
pub fn reuse_grid_csv(lengths: &[usize], reports: &[(String, LatencyReport)]) -> String {
    let mut out = String::from("config");
    for l in lengths {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for (name, report) in reports {
        out.push_str(name);
        for &l in lengths {
            let _ = write!(
                out,
                ",{}",
                cell(report.median(l, "total").unwrap_or(f64::NAN))
            );
        }
        out.push('\n');
    }
    out
}

pub fn reuse_grid_json(lengths: &[usize], reports: &[(String, LatencyReport)]) -> String {
    let rows: Vec<_> = reports
        .iter()
        .map(|(name, r)| {
            let cells: Vec<Option<f64>> = lengths
                .iter()
                .map(|&l| r.median(l, "total").filter(|v| v.is_finite()))
                .collect();
            json!({ "config": name, "median_ms": cells })
        })
        .collect();
    let meta = reports.first().map(|(_, r)| &r.meta);
    serde_json::to_string_pretty(&json!({ "meta": meta, "lengths": lengths, "rows": rows }))
        .expect("grid serializes")
}

/// Long-format rows of several reports under one header.
pub fn concat_reports_csv(reports: &[(String, LatencyReport)]) -> String {
    let mut out = String::new();
    for (i, (_, r)) in reports.iter().enumerate() {
        let csv = r.to_csv();
        let body = if i == 0 {
            &csv[..]
        } else {
            csv.split_once('\n').map_or("", |(_, b)| b)
        };
        out.push_str(body);
    }
    out
}

/// One pruning run: the sparsity coefficient and pruned heads per layer.
pub struct PruneRow {
    pub lambda: f64,
    pub pruned: Vec<usize>,
    pub total_heads: usize,
}

impl PruneRow {
    pub fn sparsity_percent(&self) -> f64 {
        100.0 * self.pruned.iter().sum::<usize>() as f64 / self.total_heads as f64
    }
}

/// `lambda,1,...,L,sparsity` with the sparsity in percent to one decimal.
pub fn prune_table_csv(rows: &[PruneRow]) -> String {
    let layers = rows.first().map_or(0, |r| r.pruned.len());
    let mut out = String::from("lambda");
    for l in 1..=layers {
        let _ = write!(out, ",{l}");
    }
    out.push_str(",sparsity\n");
    for r in rows {
        let _ = write!(out, "{}", r.lambda);
        for p in &r.pruned {
            let _ = write!(out, ",{p}");
        }
        let _ = writeln!(out, ",{:.1}", r.sparsity_percent());
    }
    out
}

pub fn prune_table_json(rows: &[PruneRow]) -> String {
    let rows: Vec<_> = rows
        .iter()
        .map(|r| {
            json!({
                "lambda": r.lambda,
                "pruned_per_layer": r.pruned,
                "sparsity_percent": (r.sparsity_percent() * 10.0).round() / 10.0,
            })
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("table serializes")
}

pub const TRAJECTORY_HEADER: &str = "lambda,step,sparsity_loss,open_gates,task_loss";

pub fn trajectory_csv(runs: &[(f64, Vec<StepLog>)]) -> String {
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for (lambda, log) in runs {
        for s in log {
            let _ = writeln!(
                out,
                "{lambda},{},{:.6},{},{:.6e}",
                s.step, s.sparsity_loss, s.open_gates, s.task_loss
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prune_table_schema() {
        let rows = [PruneRow {
            lambda: 0.02,
            pruned: vec![1; 16],
            total_heads: 128,
        }];
        let csv = prune_table_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "lambda,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,sparsity"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0.02,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,12.5"
        );
    }
}
