//! Packed single-precision GEMM.
//!
//! `B` is packed into `NR`-wide column panels per `KC`-deep slab, then a
//! `MR x NR` register tile walks the rows of `A`. Every output element is
//! accumulated as the fused `c = fma(a, b, c)` in strictly increasing `k`
//! order, whatever tile or thread produced it, so results are bitwise
//! independent of the row partition and of the instruction set picked at
//! runtime. Without hardware FMA the portable path falls back to the
//! (slow, exact) software `mul_add`.

use std::thread;

const KC: usize = 256;
// Row granularity of the thread partition.
const ROW_BLOCK: usize = 8;
// Register tiles per row block; one block of `A` stays in L2 across panels.
const MC_TILES: usize = 8;

/// One cache line of floats. Packing into these keeps every `NR = 16` panel
/// row on its own line whatever address the allocator returns.
#[derive(Clone, Copy)]
#[repr(C, align(64))]
struct Line([f32; 16]);

/// `B` repacked as `[slab][panel][k][NR]`, zero padded on the right edge.
struct PackedB<const NR: usize> {
    lines: Vec<Line>,
    k: usize,
    n: usize,
    panels: usize,
}

impl<const NR: usize> PackedB<NR> {
    fn pack(b: &[f32], k: usize, n: usize, transpose_b: bool) -> Self {
        let panels = n.div_ceil(NR);
        let len = k * panels * NR;
        let mut lines = vec![Line([0.0; 16]); len.div_ceil(16)];
        // SAFETY: `Line` is 16 contiguous f32 without padding.
        let data = unsafe { std::slice::from_raw_parts_mut(lines.as_mut_ptr().cast::<f32>(), len) };
        let mut offset = 0;
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            for jp in 0..panels {
                let j0 = jp * NR;
                let width = NR.min(n - j0);
                for p in 0..kc {
                    let dst = &mut data[offset + p * NR..offset + p * NR + width];
                    if transpose_b {
                        // b is n x k
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = b[(j0 + j) * k + pc + p];
                        }
                    } else {
                        let row = (pc + p) * n + j0;
                        dst.copy_from_slice(&b[row..row + width]);
                    }
                }
                offset += kc * NR;
            }
        }
        Self {
            lines,
            k,
            n,
            panels,
        }
    }

    fn data(&self) -> &[f32] {
        let len = self.k * self.panels * NR;
        // SAFETY: as in `pack`; `lines` holds at least `len` floats.
        unsafe { std::slice::from_raw_parts(self.lines.as_ptr().cast::<f32>(), len) }
    }

    fn panel(&self, pc: usize, jp: usize) -> &[f32] {
        let kc = KC.min(self.k - pc);
        let start = pc * self.panels * NR + jp * kc * NR;
        &self.data()[start..start + kc * NR]
    }
}

/// `MR x NR` block of `c` (row stride `ldc`) accumulated over one panel. The
/// block is always full width so the accumulators stay in registers.
#[inline(always)]
fn kernel<const MR: usize, const NR: usize>(
    a: &[f32],
    lda: usize,
    pc: usize,
    panel: &[f32],
    c: &mut [f32],
    ldc: usize,
) {
    let kc = panel.len() / NR;
    let mut acc: [[f32; NR]; MR] =
        std::array::from_fn(|r| c[r * ldc..r * ldc + NR].try_into().unwrap());
    let rows: [&[f32]; MR] = std::array::from_fn(|r| &a[r * lda + pc..r * lda + pc + kc]);
    for (p, b) in panel.chunks_exact(NR).enumerate() {
        for r in 0..MR {
            let av = rows[r][p];
            for j in 0..NR {
                acc[r][j] = av.mul_add(b[j], acc[r][j]);
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        c[r * ldc..r * ldc + NR].copy_from_slice(acc_row);
    }
}

/// Full-width register tile, scalar or hand-vectorized.
trait Micro<const MR: usize, const NR: usize> {
    /// # Safety
    /// The CPU supports the instructions of the implementation.
    unsafe fn tile(a: &[f32], lda: usize, pc: usize, panel: &[f32], c: &mut [f32], ldc: usize);
}

struct Scalar;

impl<const MR: usize, const NR: usize> Micro<MR, NR> for Scalar {
    #[inline(always)]
    unsafe fn tile(a: &[f32], lda: usize, pc: usize, panel: &[f32], c: &mut [f32], ldc: usize) {
        kernel::<MR, NR>(a, lda, pc, panel, c, ldc)
    }
}

#[cfg(target_arch = "x86_64")]
struct Avx512;

#[cfg(target_arch = "x86_64")]
impl Micro<12, 16> for Avx512 {
    #[inline(always)]
    unsafe fn tile(a: &[f32], lda: usize, pc: usize, panel: &[f32], c: &mut [f32], ldc: usize) {
        // SAFETY: forwarded from the caller.
        unsafe { kernel_avx512(a, lda, pc, panel, c, ldc) }
    }
}

#[cfg(target_arch = "x86_64")]
struct Avx2;

#[cfg(target_arch = "x86_64")]
impl Micro<4, 16> for Avx2 {
    #[inline(always)]
    unsafe fn tile(a: &[f32], lda: usize, pc: usize, panel: &[f32], c: &mut [f32], ldc: usize) {
        // SAFETY: forwarded from the caller.
        unsafe { kernel_avx2(a, lda, pc, panel, c, ldc) }
    }
}

/// `kernel::<4, 16>` with two ymm accumulators per row.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[inline]
unsafe fn kernel_avx2(a: &[f32], lda: usize, pc: usize, panel: &[f32], c: &mut [f32], ldc: usize) {
    use std::arch::x86_64::*;
    const MR: usize = 4;
    let kc = panel.len() / 16;
    assert!(a.len() >= (MR - 1) * lda + pc + kc && c.len() >= (MR - 1) * ldc + 16);
    let (ap, bp, cp) = (a.as_ptr(), panel.as_ptr(), c.as_mut_ptr());
    // SAFETY: the assert bounds every row access below.
    unsafe {
        let mut acc = [[_mm256_setzero_ps(); 2]; MR];
        for (r, v) in acc.iter_mut().enumerate() {
            v[0] = _mm256_loadu_ps(cp.add(r * ldc));
            v[1] = _mm256_loadu_ps(cp.add(r * ldc + 8));
        }
        for p in 0..kc {
            let b0 = _mm256_loadu_ps(bp.add(p * 16));
            let b1 = _mm256_loadu_ps(bp.add(p * 16 + 8));
            for (r, v) in acc.iter_mut().enumerate() {
                let av = _mm256_set1_ps(*ap.add(r * lda + pc + p));
                v[0] = _mm256_fmadd_ps(av, b0, v[0]);
                v[1] = _mm256_fmadd_ps(av, b1, v[1]);
            }
        }
        for (r, v) in acc.iter().enumerate() {
            _mm256_storeu_ps(cp.add(r * ldc), v[0]);
            _mm256_storeu_ps(cp.add(r * ldc + 8), v[1]);
        }
    }
}

/// `kernel::<12, 16>` with one zmm accumulator per row.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
unsafe fn kernel_avx512(
    a: &[f32],
    lda: usize,
    pc: usize,
    panel: &[f32],
    c: &mut [f32],
    ldc: usize,
) {
    use std::arch::x86_64::*;
    const MR: usize = 12;
    let kc = panel.len() / 16;
    assert!(a.len() >= (MR - 1) * lda + pc + kc && c.len() >= (MR - 1) * ldc + 16);
    let (ap, bp, cp) = (a.as_ptr(), panel.as_ptr(), c.as_mut_ptr());
    // SAFETY: the assert bounds every row access below.
    unsafe {
        let mut acc = [_mm512_setzero_ps(); MR];
        for (r, v) in acc.iter_mut().enumerate() {
            *v = _mm512_loadu_ps(cp.add(r * ldc));
        }
        for p in 0..kc {
            let b = _mm512_loadu_ps(bp.add(p * 16));
            for (r, v) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_ps(*ap.add(r * lda + pc + p));
                *v = _mm512_fmadd_ps(av, b, *v);
            }
        }
        for (r, v) in acc.iter().enumerate() {
            _mm512_storeu_ps(cp.add(r * ldc), *v);
        }
    }
}

#[inline(always)]
unsafe fn tile_full<K: Micro<MR, NR>, const MR: usize, const NR: usize>(
    a: &[f32],
    lda: usize,
    pc: usize,
    panel: &[f32],
    c: &mut [f32],
    ldc: usize,
    j0: usize,
    width: usize,
) {
    if width == NR {
        // SAFETY: forwarded from the caller.
        unsafe { K::tile(a, lda, pc, panel, &mut c[j0..], ldc) };
        return;
    }
    // right edge: run the same kernel on a padded copy
    let mut buf = [[0.0f32; NR]; MR];
    for (r, row) in buf.iter_mut().enumerate() {
        row[..width].copy_from_slice(&c[r * ldc + j0..r * ldc + j0 + width]);
    }
    // SAFETY: as above.
    unsafe { K::tile(a, lda, pc, panel, buf.as_flattened_mut(), NR) };
    for (r, row) in buf.iter().enumerate() {
        c[r * ldc + j0..r * ldc + j0 + width].copy_from_slice(&row[..width]);
    }
}

#[inline(always)]
fn tile_row<const NR: usize>(
    a: &[f32],
    pc: usize,
    panel: &[f32],
    c: &mut [f32],
    j0: usize,
    width: usize,
) {
    let kc = panel.len() / NR;
    let mut acc = [0.0f32; NR];
    acc[..width].copy_from_slice(&c[j0..j0 + width]);
    let a0 = &a[pc..pc + kc];
    for (p, b) in panel.chunks_exact(NR).enumerate() {
        let av = a0[p];
        for j in 0..NR {
            acc[j] = av.mul_add(b[j], acc[j]);
        }
    }
    c[j0..j0 + width].copy_from_slice(&acc[..width]);
}

/// Computes `c = a * b` for a block of rows; `c` is overwritten.
#[inline(always)]
unsafe fn gemm_rows<K: Micro<MR, NR>, const MR: usize, const NR: usize>(
    a: &[f32],
    m: usize,
    packed: &PackedB<NR>,
    c: &mut [f32],
) {
    let (k, n) = (packed.k, packed.n);
    c.fill(0.0);
    let mc = MR * MC_TILES;
    for pc in (0..k).step_by(KC) {
        for i0 in (0..m).step_by(mc) {
            let i_end = m.min(i0 + mc);
            for jp in 0..packed.panels {
                let panel = packed.panel(pc, jp);
                let j0 = jp * NR;
                let width = NR.min(n - j0);
                let mut i = i0;
                while i + MR <= i_end {
                    // SAFETY: forwarded from the caller.
                    unsafe {
                        tile_full::<K, MR, NR>(
                            &a[i * k..(i + MR) * k],
                            k,
                            pc,
                            panel,
                            &mut c[i * n..(i + MR) * n],
                            n,
                            j0,
                            width,
                        )
                    };
                    i += MR;
                }
                while i < i_end {
                    tile_row::<NR>(
                        &a[i * k..(i + 1) * k],
                        pc,
                        panel,
                        &mut c[i * n..(i + 1) * n],
                        j0,
                        width,
                    );
                    i += 1;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_rows_avx2(a: &[f32], m: usize, packed: &PackedB<16>, c: &mut [f32]) {
    // SAFETY: AVX2 and FMA checked by the caller.
    unsafe { gemm_rows::<Avx2, 4, 16>(a, m, packed, c) }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
unsafe fn gemm_rows_avx512(a: &[f32], m: usize, packed: &PackedB<16>, c: &mut [f32]) {
    // SAFETY: AVX-512F checked by the caller.
    unsafe { gemm_rows::<Avx512, 12, 16>(a, m, packed, c) }
}

fn run<const NR: usize>(
    a: &[f32],
    m: usize,
    k: usize,
    b: &[f32],
    n: usize,
    transpose_b: bool,
    threads: usize,
    kernel: unsafe fn(&[f32], usize, &PackedB<NR>, &mut [f32]),
    mut c: Vec<f32>,
) -> Vec<f32> {
    let packed = PackedB::<NR>::pack(b, k, n, transpose_b);
    c.clear();
    c.resize(m * n, 0.0);
    let workers = threads.clamp(1, m.div_ceil(ROW_BLOCK).max(1));
    if workers == 1 {
        // SAFETY: `kernel` only requires CPU features checked by the caller.
        unsafe { kernel(a, m, &packed, &mut c) };
        return c;
    }
    let rows_per = m.div_ceil(workers).next_multiple_of(ROW_BLOCK);
    thread::scope(|s| {
        for (a_block, c_block) in a.chunks(rows_per * k).zip(c.chunks_mut(rows_per * n)) {
            let packed = &packed;
            // SAFETY: as above.
            s.spawn(move || unsafe { kernel(a_block, a_block.len() / k, packed, c_block) });
        }
    });
    c
}

unsafe fn gemm_rows_portable(a: &[f32], m: usize, packed: &PackedB<16>, c: &mut [f32]) {
    // SAFETY: the scalar tile needs no CPU features.
    unsafe { gemm_rows::<Scalar, 4, 16>(a, m, packed, c) }
}

/// `c[m x n] = a[m x k] * b`, where `b` is `k x n`, or `n x k` when
/// `transpose_b` is set. Rows of `a` are split across `threads` workers. The
/// result is written into `out`'s allocation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f32],
    m: usize,
    k: usize,
    b: &[f32],
    n: usize,
    transpose_b: bool,
    threads: usize,
    out: Vec<f32>,
) -> Vec<f32> {
    #[cfg(target_arch = "x86_64")]
    {
        let fma = std::arch::is_x86_feature_detected!("fma");
        if fma && std::arch::is_x86_feature_detected!("avx512f") {
            return run::<16>(a, m, k, b, n, transpose_b, threads, gemm_rows_avx512, out);
        }
        if fma && std::arch::is_x86_feature_detected!("avx2") {
            return run::<16>(a, m, k, b, n, transpose_b, threads, gemm_rows_avx2, out);
        }
    }
    run::<16>(a, m, k, b, n, transpose_b, threads, gemm_rows_portable, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, tb: bool) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s = a[i * k + p].mul_add(bv, s);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn fill(len: usize, seed: u32) -> Vec<f32> {
        let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 17;
                state ^= state << 5;
                (state % 2001) as f32 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_order_exactly() {
        // Same fused accumulation order as the naive loop, so equality is bitwise.
        for &(m, k, n) in &[
            (1, 1, 1),
            (5, 3, 17),
            (9, 300, 33),
            (4, 513, 16),
            (13, 64, 70),
        ] {
            let a = fill(m * k, 1);
            for tb in [false, true] {
                let b = fill(k * n, 2);
                assert_eq!(
                    gemm(&a, m, k, &b, n, tb, 1, Vec::new()),
                    naive(&a, m, k, &b, n, tb),
                    "{m}x{k}x{n} tb={tb}"
                );
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let (m, k, n) = (37, 290, 45);
        let a = fill(m * k, 3);
        let b = fill(k * n, 4);
        let one = gemm(&a, m, k, &b, n, false, 1, Vec::new());
        for t in [2, 3, 8] {
            assert_eq!(gemm(&a, m, k, &b, n, false, t, Vec::new()), one);
        }
    }

    #[test]
    fn instruction_sets_agree_bitwise() {
        let (m, k, n) = (29, 300, 37);
        let a = fill(m * k, 5);
        let b = fill(k * n, 6);
        let portable = run::<16>(&a, m, k, &b, n, false, 1, gemm_rows_portable, Vec::new());
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2")
                && std::arch::is_x86_feature_detected!("fma")
            {
                assert_eq!(
                    run::<16>(&a, m, k, &b, n, false, 1, gemm_rows_avx2, Vec::new()),
                    portable
                );
            }
            if std::arch::is_x86_feature_detected!("avx512f")
                && std::arch::is_x86_feature_detected!("fma")
            {
                assert_eq!(
                    run::<16>(&a, m, k, &b, n, false, 1, gemm_rows_avx512, Vec::new()),
                    portable
                );
            }
        }
    }
}
