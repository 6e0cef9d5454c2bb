//! Packed f64 matrix multiply used by matmul and the convolution kernels.
//!
//! BLIS-style structure: panels of A and B are packed into register-tile
//! slivers, the microkernel keeps an 8x16 accumulator block live across the
//! shared dimension. The microkernel dispatches at runtime to AVX-512, AVX2
//! or a portable scalar loop. Row tiles can be split across threads; each
//! output element is produced by exactly one task with a fixed summation
//! order, so results do not depend on the thread count.

use std::sync::OnceLock;

pub const MR: usize = 8;
pub const NR: usize = 16;
const KC: usize = 256;

/// Borrowed matrix view with arbitrary row/column strides.
/// `a[i, j] = data[offset + i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    pub fn col_major(data: &'a [f64], rows: usize) -> Self {
        MatRef { data, rs: 1, cs: rows }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kernel {
    Avx512,
    Avx2,
    Scalar,
}

fn kernel() -> Kernel {
    static KERNEL: OnceLock<Kernel> = OnceLock::new();
    *KERNEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") {
                return Kernel::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Kernel::Avx2;
            }
        }
        Kernel::Scalar
    })
}

fn max_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        match std::env::var("HAN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(n) if n >= 1 => n.min(avail),
            _ => avail,
        }
    })
}

/// C[m, n] += A[m, k] * B[k, n]; C is contiguous row-major.
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64]) {
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let threads = if m * n * k >= 1 << 21 { max_threads().min(m.div_ceil(MR)) } else { 1 };
    let ntiles = n.div_ceil(NR);
    let mut bpack = vec![0.0f64; KC.min(k) * ntiles * NR];

    let mut pc = 0;
    while pc < k {
        let kc = KC.min(k - pc);
        pack_b(&mut bpack, b, pc, kc, n);
        if threads <= 1 {
            compute_panel(c, m, n, 0, m, a, &bpack, pc, kc);
        } else {
            let rows_per = m.div_ceil(MR).div_ceil(threads) * MR;
            let bref = &bpack;
            std::thread::scope(|scope| {
                let mut rest = &mut c[..];
                let mut i0 = 0;
                while i0 < m {
                    let take = rows_per.min(m - i0);
                    let (mine, tail) = rest.split_at_mut(take * n);
                    rest = tail;
                    let start = i0;
                    scope.spawn(move || {
                        compute_panel(mine, take, n, start, start + take, a, bref, pc, kc);
                    });
                    i0 += take;
                }
            });
        }
        pc += kc;
    }
}

/// Compute rows [row0, row1) of C (passed as the slice holding just those rows).
fn compute_panel(
    c: &mut [f64],
    rows: usize,
    n: usize,
    row0: usize,
    row1: usize,
    a: MatRef<'_>,
    bpack: &[f64],
    pc: usize,
    kc: usize,
) {
    debug_assert_eq!(rows, row1 - row0);
    let mut apack = vec![0.0f64; kc * MR];
    let ntiles = n.div_ceil(NR);
    let mut scratch = [0.0f64; MR * NR];
    let mut i = row0;
    while i < row1 {
        let iw = MR.min(row1 - i);
        pack_a(&mut apack, a, i, iw, pc, kc);
        for jt in 0..ntiles {
            let j = jt * NR;
            let jw = NR.min(n - j);
            let bp = &bpack[jt * kc * NR..(jt * kc * NR + kc * NR)];
            if iw == MR && jw == NR {
                let coff = (i - row0) * n + j;
                microkernel(kc, &apack, bp, &mut c[coff..], n, false);
            } else {
                scratch.fill(0.0);
                microkernel(kc, &apack, bp, &mut scratch, NR, true);
                for r in 0..iw {
                    let crow = &mut c[(i - row0 + r) * n + j..(i - row0 + r) * n + j + jw];
                    for q in 0..jw {
                        crow[q] += scratch[r * NR + q];
                    }
                }
            }
        }
        i += MR;
    }
}

fn pack_b(bpack: &mut [f64], b: MatRef<'_>, pc: usize, kc: usize, n: usize) {
    let ntiles = n.div_ceil(NR);
    for jt in 0..ntiles {
        let j0 = jt * NR;
        let jw = NR.min(n - j0);
        let dst = &mut bpack[jt * kc * NR..(jt * kc * NR + kc * NR)];
        if b.cs == 1 {
            // row-major source: copy row slices
            for p in 0..kc {
                let src = (pc + p) * b.rs + j0;
                let row = &mut dst[p * NR..p * NR + NR];
                row[..jw].copy_from_slice(&b.data[src..src + jw]);
                row[jw..].fill(0.0);
            }
        } else if b.rs == 1 {
            // column-major source: walk each column contiguously
            if jw < NR {
                dst.fill(0.0);
            }
            for q in 0..jw {
                let col = &b.data[(j0 + q) * b.cs + pc..(j0 + q) * b.cs + pc + kc];
                for (p, &v) in col.iter().enumerate() {
                    dst[p * NR + q] = v;
                }
            }
        } else {
            for p in 0..kc {
                let row = &mut dst[p * NR..p * NR + NR];
                for (q, slot) in row.iter_mut().enumerate() {
                    *slot = if q < jw { b.at(pc + p, j0 + q) } else { 0.0 };
                }
            }
        }
    }
}

fn pack_a(apack: &mut [f64], a: MatRef<'_>, i0: usize, iw: usize, pc: usize, kc: usize) {
    if a.rs == 1 {
        // column-major source: a sliver row is contiguous per p
        for p in 0..kc {
            let col = &a.data[(pc + p) * a.cs + i0..(pc + p) * a.cs + i0 + iw];
            let row = &mut apack[p * MR..p * MR + MR];
            row[..iw].copy_from_slice(col);
            row[iw..].fill(0.0);
        }
    } else if a.cs == 1 {
        // row-major source: stream each of the MR rows
        if iw < MR {
            apack[..kc * MR].fill(0.0);
        }
        for r in 0..iw {
            let row = &a.data[(i0 + r) * a.rs + pc..(i0 + r) * a.rs + pc + kc];
            for (p, &v) in row.iter().enumerate() {
                apack[p * MR + r] = v;
            }
        }
    } else {
        for p in 0..kc {
            let row = &mut apack[p * MR..p * MR + MR];
            for (r, slot) in row.iter_mut().enumerate() {
                *slot = if r < iw { a.at(i0 + r, pc + p) } else { 0.0 };
            }
        }
    }
}

/// acc[8x16] += sum_p ap[p][0..8] (x) bp[p][0..16], added into C.
/// `overwrite_scratch` is only a hint that C here is a dense 8x16 scratch tile.
fn microkernel(kc: usize, ap: &[f64], bp: &[f64], c: &mut [f64], ldc: usize, _scratch: bool) {
    match kernel() {
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx512 => unsafe { microkernel_avx512(kc, ap, bp, c, ldc) },
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx2 => unsafe { microkernel_avx2(kc, ap, bp, c, ldc) },
        _ => microkernel_scalar(kc, ap, bp, c, ldc),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn microkernel_avx512(kc: usize, ap: &[f64], bp: &[f64], c: &mut [f64], ldc: usize) {
    use std::arch::x86_64::*;
    debug_assert!(ap.len() >= kc * MR && bp.len() >= kc * NR);
    let mut acc0 = [_mm512_setzero_pd(); MR];
    let mut acc1 = [_mm512_setzero_pd(); MR];
    let mut a = ap.as_ptr();
    let mut b = bp.as_ptr();
    for _ in 0..kc {
        let bv0 = _mm512_loadu_pd(b);
        let bv1 = _mm512_loadu_pd(b.add(8));
        for r in 0..MR {
            let av = _mm512_set1_pd(*a.add(r));
            acc0[r] = _mm512_fmadd_pd(av, bv0, acc0[r]);
            acc1[r] = _mm512_fmadd_pd(av, bv1, acc1[r]);
        }
        a = a.add(MR);
        b = b.add(NR);
    }
    let cp = c.as_mut_ptr();
    for r in 0..MR {
        let row = cp.add(r * ldc);
        _mm512_storeu_pd(row, _mm512_add_pd(_mm512_loadu_pd(row), acc0[r]));
        _mm512_storeu_pd(row.add(8), _mm512_add_pd(_mm512_loadu_pd(row.add(8)), acc1[r]));
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn microkernel_avx2(kc: usize, ap: &[f64], bp: &[f64], c: &mut [f64], ldc: usize) {
    use std::arch::x86_64::*;
    // 16 ymm registers: work the 8x16 tile as four 4x8 quadrants.
    for half_i in 0..2 {
        for half_j in 0..2 {
            let mut acc = [_mm256_setzero_pd(); 8]; // 4 rows x 2 vectors
            let mut a = ap.as_ptr().add(half_i * 4);
            let mut b = bp.as_ptr().add(half_j * 8);
            for _ in 0..kc {
                let bv0 = _mm256_loadu_pd(b);
                let bv1 = _mm256_loadu_pd(b.add(4));
                for r in 0..4 {
                    let av = _mm256_set1_pd(*a.add(r));
                    acc[2 * r] = _mm256_fmadd_pd(av, bv0, acc[2 * r]);
                    acc[2 * r + 1] = _mm256_fmadd_pd(av, bv1, acc[2 * r + 1]);
                }
                a = a.add(MR);
                b = b.add(NR);
            }
            let cp = c.as_mut_ptr().add(half_i * 4 * ldc + half_j * 8);
            for r in 0..4 {
                let row = cp.add(r * ldc);
                _mm256_storeu_pd(row, _mm256_add_pd(_mm256_loadu_pd(row), acc[2 * r]));
                _mm256_storeu_pd(
                    row.add(4),
                    _mm256_add_pd(_mm256_loadu_pd(row.add(4)), acc[2 * r + 1]),
                );
            }
        }
    }
}

fn microkernel_scalar(kc: usize, ap: &[f64], bp: &[f64], c: &mut [f64], ldc: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    for p in 0..kc {
        let arow = &ap[p * MR..p * MR + MR];
        let brow = &bp[p * NR..p * NR + NR];
        for r in 0..MR {
            let av = arow[r];
            let dst = &mut acc[r];
            for q in 0..NR {
                dst[q] += av * brow[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        let crow = &mut c[r * ldc..r * ldc + NR];
        for q in 0..NR {
            crow[q] += row[q];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn pseudo(seed: u64, len: usize) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn matches_naive_on_assorted_shapes() {
        for &(m, k, n) in
            &[(1, 1, 1), (3, 5, 7), (8, 16, 16), (9, 17, 33), (64, 20, 50), (33, 129, 31)]
        {
            let a = pseudo(m as u64 * 31 + k as u64, m * k);
            let b = pseudo(n as u64 * 17 + k as u64, k * n);
            let ar = MatRef::row_major(&a, k);
            let br = MatRef::row_major(&b, n);
            let want = naive(m, k, n, ar, br);
            let mut got = vec![0.0; m * n];
            gemm(m, k, n, ar, br, &mut got);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "mismatch {g} vs {w}");
            }
        }
    }

    #[test]
    fn handles_transposed_views() {
        let (m, k, n) = (13, 21, 19);
        let a = pseudo(5, k * m); // stored column-major => A^T of a row-major [k, m]
        let b = pseudo(7, n * k);
        let ar = MatRef { data: &a, rs: 1, cs: m }; // A[m, k] from column-major storage
        let br = MatRef { data: &b, rs: 1, cs: k }; // B[k, n] from column-major storage
        let want = naive(m, k, n, ar, br);
        let mut got = vec![0.0; m * n];
        gemm(m, k, n, ar, br, &mut got);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn accumulates_into_existing_values() {
        let (m, k, n) = (4, 3, 5);
        let a = vec![1.0; m * k];
        let b = vec![2.0; k * n];
        let mut c = vec![10.0; m * n];
        gemm(m, k, n, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut c);
        for &v in &c {
            assert_eq!(v, 10.0 + 6.0);
        }
    }
}
