//! Raw dense kernels shared by the tape, the no-grad forward pass and the
//! incremental decoder. Everything is row-major and accumulates in the same
//! index order regardless of caller, which keeps results reproducible.

use super::Real;

/// C[m,n] += A[m,k] * B[k,n]. The k-loop is unrolled four-wide; the inner
/// j-loop vectorizes on the contiguous B and C rows.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
            p += 1;
        }
    }
}

pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A[m,k] * B^T where B is [n,k]. Row-by-row dot products, both
/// operands contiguous.
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            crow[j] += dot(arow, brow);
        }
    }
}

/// C[k,n] += A^T * B where A is [m,k], B is [m,n]. Outer loop over shared
/// rows, inner axpy over contiguous C rows.
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != F::zero() {
                let crow = &mut c[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
}

/// out[c] += sum_j weights[j] * rows[j*d + c], accumulating rows strictly
/// in j order. The attention paths (batch and incremental) both use this so
/// their rounding agrees regardless of how long the context has grown.
pub fn weighted_rows_acc<F: Real>(weights: &[F], rows: &[F], out: &mut [F], d: usize) {
    debug_assert!(rows.len() >= weights.len() * d);
    debug_assert_eq!(out.len(), d);
    for (j, &w) in weights.iter().enumerate() {
        let row = &rows[j * d..(j + 1) * d];
        for c in 0..d {
            out[c] += w * row[c];
        }
    }
}

/// Packs one attention head's columns into a contiguous [len, dh] buffer.
pub fn copy_head<F: Real>(src: &[F], dst: &mut [F], len: usize, d: usize, dh: usize, h: usize) {
    for i in 0..len {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

/// Inverse of [`copy_head`].
pub fn scatter_head<F: Real>(src: &[F], dst: &mut [F], len: usize, d: usize, dh: usize, h: usize) {
    for i in 0..len {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc0 = F::zero();
    let mut acc1 = F::zero();
    let mut acc2 = F::zero();
    let mut acc3 = F::zero();
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        acc0 += ca[0] * cb[0];
        acc1 += ca[1] * cb[1];
        acc2 += ca[2] * cb[2];
        acc3 += ca[3] * cb[3];
    }
    let mut tail = F::zero();
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail += x * y;
    }
    acc0 + acc1 + acc2 + acc3 + tail
}

/// In-place row softmax with max subtraction. `row` must be non-empty.
pub fn softmax_row<F: Real>(row: &mut [F]) {
    let mut max = row[0];
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Per-row layer norm: out = (x - mean) / sqrt(var + eps) * gain + bias.
/// Returns the inverse standard deviation per row for the backward pass.
pub fn layer_norm_rows<F: Real>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    out: &mut [F],
    d: usize,
    eps: F,
) -> Vec<F> {
    let rows = x.len() / d;
    let mut inv_std = Vec::with_capacity(rows);
    let inv_d = F::one() / F::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let or = &mut out[r * d..(r + 1) * d];
        let mut mean = F::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = F::zero();
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            or[j] = (xr[j] - mean) * is * gain[j] + bias[j];
        }
    }
    inv_std
}

#[inline]
pub fn relu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

/// d/dx of [`relu`] (0 at the kink).
#[inline]
pub fn relu_grad<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        F::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent triple-loop reference, kept deliberately naive.
    fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn kernels_match_triple_loop_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(3, 4, 2), (5, 5, 5), (7, 3, 9), (1, 8, 1)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = matmul_ref(&a, &b, m, k, n);
            let got = matmul(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
            // A * B == (B^T row-major) via the nt kernel.
            let mut bt = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut got_nt = vec![0.0; m * n];
            matmul_nt_acc(&a, &bt, &mut got_nt, m, k, n);
            for (g, w) in got_nt.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            // A^T path: C = A^T * B2 where A is [m,k] so C is [k,n2].
            let b2: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let want_tn = matmul_ref(&at, &b2, k, m, n);
            let mut got_tn = vec![0.0; k * n];
            matmul_tn_acc(&a, &b2, &mut got_tn, m, k, n);
            for (g, w) in got_tn.iter().zip(&want_tn) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_row_uniform_and_ratios() {
        let mut row = [0.0f64; 4];
        softmax_row(&mut row);
        for &p in &row {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let mut row = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
        softmax_row(&mut row);
        assert!((row[0] - 1.0 / 6.0).abs() < 1e-6);
        assert!((row[1] - 2.0 / 6.0).abs() < 1e-6);
        assert!((row[2] - 3.0 / 6.0).abs() < 1e-6);
    }
}
