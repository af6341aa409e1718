//! Wall-clock checks. Kept in one test so nothing else competes for the CPU.

use attnbench::layers::{init_weights, ModelConfig};
use attnbench::profile::{bench_forward, breakdown_latency, BenchOptions, Submodule};

#[test]
fn timing_properties() {
    let cfg = ModelConfig::transformer(2, 64, 4);
    let w = init_weights(&cfg).unwrap();
    let lengths: Vec<usize> = (1..=8).map(|i| 128 * i).collect();
    let opts = BenchOptions {
        lengths: lengths.clone(),
        repeats: 15,
        warmup: 3,
        ..BenchOptions::default()
    };
    let first = bench_forward(&w, &opts).unwrap();
    let medians: Vec<f64> = lengths
        .iter()
        .map(|&l| first.median(l, "total").unwrap())
        .collect();
    println!("medians {medians:?}");
    assert!(
        medians.windows(2).all(|p| p[1] >= p[0]),
        "not monotone in length: {medians:?}"
    );

    let second = bench_forward(&w, &opts).unwrap();
    for &l in &lengths {
        let (a, b) = (
            first.median(l, "total").unwrap(),
            second.median(l, "total").unwrap(),
        );
        assert!((b / a - 1.0).abs() <= 0.2, "rerun at {l}: {a} vs {b}");
    }

    let mut conformer = ModelConfig::conformer(2, 128, 4);
    conformer.conv_kernel = 15;
    let w = init_weights(&conformer).unwrap();
    let opts = BenchOptions {
        lengths: vec![256],
        repeats: 21,
        warmup: 3,
        ..BenchOptions::default()
    };
    let report = breakdown_latency(&w, &opts).unwrap();
    let parts: f64 = [
        Submodule::Ff,
        Submodule::Conv,
        Submodule::Sa,
        Submodule::Norm,
    ]
    .iter()
    .map(|p| report.median(256, p.name()).unwrap())
    .sum();
    let total = report.median(256, "total").unwrap();
    println!(
        "submodules {parts:.3} ms, total {total:.3} ms\n{}",
        report.to_csv()
    );
    assert!((parts / total - 1.0).abs() <= 0.1);
    assert!(report.median(256, Submodule::ReuseSa.name()).is_none());
}
