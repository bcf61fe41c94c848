//! Single-threaded dense kernels.
//!
//! Three GEMM layouts cover every product the graph needs (forward *and*
//! backward), so no kernel ever materializes a transpose:
//!
//! * `nn`: `out[m,n] = a[m,k] · b[k,n]`
//! * `nt`: `out[m,n] = a[m,k] · b[n,k]ᵀ`
//! * `tn`: `out[m,n] = a[k,m]ᵀ · b[k,n]`
//!
//! Loop orders are chosen so the innermost loop runs over contiguous
//! memory in both operands, which lets the compiler auto-vectorize; with
//! `target-cpu=native` these saturate a single core well enough for the
//! model sizes this crate trains.

/// `out = a · b` (or `out += a · b` when `acc`): a is `[m,k]`, b is `[k,n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        if !acc {
            row.fill(0.0);
        }
        for kk in 0..k {
            let s = a[i * k + kk];
            if s == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out = a · bᵀ` (or `+=`): a is `[m,k]`, b is `[n,k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    // Transposing b up front turns the inner loop into the same contiguous
    // FMA sweep as `gemm_nn`; the O(n·k) copy is noise next to O(m·n·k)
    // and roughly triples throughput over a dot-product formulation.
    let mut bt = vec![0.0f32; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    gemm_nn(m, k, n, a, &bt, out, acc);
}

/// `out = aᵀ · b` (or `+=`): a is `[k,m]`, b is `[k,n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32], acc: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(0.0);
    }
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let s = arow[i];
            if s == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// Dense dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators: breaks the FP dependency chain so the
    // loop vectorizes, while keeping the summation order fixed.
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out += s * x`.
#[inline]
pub fn axpy(s: f32, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        out
    }

    fn pseudo(len: usize, salt: u64) -> Vec<f32> {
        // Cheap deterministic filler; values in (-1, 1).
        (0..len)
            .map(|i| {
                let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt);
                ((x >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32
            })
            .collect()
    }

    #[test]
    fn gemm_layouts_agree_with_naive_f64() {
        let (m, k, n) = (7, 5, 9);
        let a = pseudo(m * k, 1);
        let b = pseudo(k * n, 2);
        let a64: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&x| x as f64).collect();
        let want = naive(m, k, n, &a64, &b64);

        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut out, false);
        for (got, want) in out.iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }

        // nt: feed b transposed so the product matches.
        let mut bt = vec![0.0f32; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        gemm_nt(m, k, n, &a, &bt, &mut out, false);
        for (got, want) in out.iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }

        // tn: feed a transposed.
        let mut at = vec![0.0f32; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        gemm_tn(m, k, n, &at, &b, &mut out, false);
        for (got, want) in out.iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn accumulate_adds_on_top() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![2.0, 3.0, 4.0, 5.0];
        let mut out = vec![10.0; 4];
        gemm_nn(2, 2, 2, &a, &b, &mut out, true);
        assert_eq!(out, vec![12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn dot_matches_sequential_sum() {
        let a = pseudo(103, 7);
        let b = pseudo(103, 8);
        let want: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        assert!((dot(&a, &b) as f64 - want).abs() < 1e-5);
    }
}
