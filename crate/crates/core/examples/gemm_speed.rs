//! GEMM throughput on the shapes that dominate a conformer-m forward.

use attnbench::tensor::{matmul, Matrix};
use std::time::Instant;
fn main() {
    for &(m, k, n, tb) in &[
        (1024usize, 256usize, 1024usize, false),
        (1024, 1024, 256, false),
        (1024, 64, 1024, true),
        (1024, 64, 2047, true),
        (1024, 1024, 64, false),
        (1024, 1024, 128, false),
    ] {
        let a = Matrix::from_fn(m, k, |i, j| ((i * 7 + j * 3) % 11) as f32 * 0.1);
        let b = if tb {
            Matrix::from_fn(n, k, |i, j| ((i + j) % 5) as f32 * 0.1)
        } else {
            Matrix::from_fn(k, n, |i, j| ((i + j) % 5) as f32 * 0.1)
        };
        let _ = matmul(&a, &b, tb).unwrap();
        let mut s = f64::INFINITY;
        for _ in 0..15 {
            let t = Instant::now();
            std::hint::black_box(matmul(&a, &b, tb).unwrap());
            s = s.min(t.elapsed().as_secs_f64());
        }
        println!(
            "{m}x{k}x{n} tb={tb}: {:.2} ms, {:.1} GFLOP/s",
            s * 1e3,
            2.0 * (m * k * n) as f64 / s / 1e9
        );
    }
}
