//! Dense f64 kernels used by the tape ops.
//!
//! Every output element of `gemm_nt` is produced by the same `dot`
//! accumulation order whether it is computed alone or as part of a tile, so
//! callers that evaluate a single row of a linear layer get bit-identical
//! results to the batched path.

/// Dot product with four interleaved accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() / 4 * 4;
    let mut acc = [0.0f64; 4];
    let mut k = 0;
    while k < n {
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
        k += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while k < a.len() {
        s += a[k] * b[k];
        k += 1;
    }
    s
}

/// Four dot products against a shared right-hand row; per-element arithmetic
/// matches [`dot`] exactly.
#[inline]
fn dot4(a0: &[f64], a1: &[f64], a2: &[f64], a3: &[f64], b: &[f64]) -> [f64; 4] {
    let len = b.len();
    let n = len / 4 * 4;
    let mut c0 = [0.0f64; 4];
    let mut c1 = [0.0f64; 4];
    let mut c2 = [0.0f64; 4];
    let mut c3 = [0.0f64; 4];
    let mut k = 0;
    while k < n {
        for l in 0..4 {
            let bv = b[k + l];
            c0[l] += a0[k + l] * bv;
            c1[l] += a1[k + l] * bv;
            c2[l] += a2[k + l] * bv;
            c3[l] += a3[k + l] * bv;
        }
        k += 4;
    }
    let mut s = [
        (c0[0] + c0[1]) + (c0[2] + c0[3]),
        (c1[0] + c1[1]) + (c1[2] + c1[3]),
        (c2[0] + c2[1]) + (c2[2] + c2[3]),
        (c3[0] + c3[1]) + (c3[2] + c3[3]),
    ];
    while k < len {
        let bv = b[k];
        s[0] += a0[k] * bv;
        s[1] += a1[k] * bv;
        s[2] += a2[k] * bv;
        s[3] += a3[k] * bv;
        k += 1;
    }
    s
}

/// Four rows against two right-hand rows; per-element arithmetic matches
/// [`dot`] exactly.
#[inline]
fn dot4x2(a: [&[f64]; 4], b0: &[f64], b1: &[f64]) -> [[f64; 4]; 2] {
    let len = b0.len();
    let n = len / 4 * 4;
    let mut c = [[[0.0f64; 4]; 4]; 2];
    let mut k = 0;
    while k < n {
        for l in 0..4 {
            let (x0, x1) = (b0[k + l], b1[k + l]);
            for r in 0..4 {
                let av = a[r][k + l];
                c[0][r][l] += av * x0;
                c[1][r][l] += av * x1;
            }
        }
        k += 4;
    }
    let mut s = [[0.0; 4]; 2];
    for j in 0..2 {
        for r in 0..4 {
            let cc = &c[j][r];
            s[j][r] = (cc[0] + cc[1]) + (cc[2] + cc[3]);
        }
    }
    while k < len {
        for r in 0..4 {
            s[0][r] += a[r][k] * b0[k];
            s[1][r] += a[r][k] * b1[k];
        }
        k += 1;
    }
    s
}

/// `out[m, n] = a[m, k] · b[n, k]ᵀ` (overwrites `out`).
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let m4 = m / 4 * 4;
    let n2 = n / 2 * 2;
    let mut i = 0;
    while i < m4 {
        let rows = [
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        ];
        let mut j = 0;
        while j < n2 {
            let r = dot4x2(rows, &b[j * k..(j + 1) * k], &b[(j + 1) * k..(j + 2) * k]);
            for q in 0..4 {
                out[(i + q) * n + j] = r[0][q];
                out[(i + q) * n + j + 1] = r[1][q];
            }
            j += 2;
        }
        if j < n {
            let r = dot4(rows[0], rows[1], rows[2], rows[3], &b[j * k..(j + 1) * k]);
            for q in 0..4 {
                out[(i + q) * n + j] = r[q];
            }
        }
        i += 4;
    }
    while i < m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ai, &b[j * k..(j + 1) * k]);
        }
        i += 1;
    }
}

/// `y += Σ_r alpha[r] · x[r]`, adding the terms in order.
#[inline]
fn axpy4(alpha: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
    for (j, yj) in y.iter_mut().enumerate() {
        *yj = (((*yj + alpha[0] * x[0][j]) + alpha[1] * x[1][j]) + alpha[2] * x[2][j]) + alpha[3] * x[3][j];
    }
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m, n] += a[m, k] · b[k, n]`.
pub fn gemm_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let k4 = k / 4 * 4;
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p < k4 {
            axpy4(
                [ar[p], ar[p + 1], ar[p + 2], ar[p + 3]],
                [
                    &b[p * n..(p + 1) * n],
                    &b[(p + 1) * n..(p + 2) * n],
                    &b[(p + 2) * n..(p + 3) * n],
                    &b[(p + 3) * n..(p + 4) * n],
                ],
                row,
            );
            p += 4;
        }
        while p < k {
            axpy(ar[p], &b[p * n..(p + 1) * n], row);
            p += 1;
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ · b[m, n]`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let m4 = m / 4 * 4;
    let mut i = 0;
    while i < m4 {
        let rows = [
            &b[i * n..(i + 1) * n],
            &b[(i + 1) * n..(i + 2) * n],
            &b[(i + 2) * n..(i + 3) * n],
            &b[(i + 3) * n..(i + 4) * n],
        ];
        for p in 0..k {
            let alpha = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            if alpha != [0.0; 4] {
                axpy4(alpha, rows, &mut out[p * n..(p + 1) * n]);
            }
        }
        i += 4;
    }
    while i < m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let alpha = a[i * k + p];
            if alpha != 0.0 {
                axpy(alpha, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
        i += 1;
    }
}

/// Unfold a `[c, h, w]` image into `[h*w, c*ks*ks]` patches with zero padding `ks/2`.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, ks: usize, out: &mut [f64]) {
    let pad = (ks / 2) as isize;
    let cols = c * ks * ks;
    debug_assert_eq!(out.len(), h * w * cols);
    for y in 0..h {
        for xx in 0..w {
            let row = &mut out[(y * w + xx) * cols..(y * w + xx + 1) * cols];
            let mut idx = 0;
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for ky in 0..ks {
                    let sy = y as isize + ky as isize - pad;
                    for kx in 0..ks {
                        let sx = xx as isize + kx as isize - pad;
                        row[idx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub fn col2im_acc(cols_grad: &[f64], c: usize, h: usize, w: usize, ks: usize, out: &mut [f64]) {
    let pad = (ks / 2) as isize;
    let cols = c * ks * ks;
    for y in 0..h {
        for xx in 0..w {
            let row = &cols_grad[(y * w + xx) * cols..(y * w + xx + 1) * cols];
            let mut idx = 0;
            for ch in 0..c {
                for ky in 0..ks {
                    let sy = y as isize + ky as isize - pad;
                    for kx in 0..ks {
                        let sx = xx as isize + kx as isize - pad;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            out[ch * h * w + sy as usize * w + sx as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
            }
        }
        out
    }

    #[test]
    fn gemm_nt_rows_match_single_dot_bitwise() {
        let (m, k, n) = (7, 13, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        gemm_nt(&a, &b, m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let d = dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
                assert_eq!(out[i * n + j].to_bits(), d.to_bits());
            }
        }
        let reference = naive_nt(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sqrt()).collect();
        let mut nn = vec![0.0; m * n];
        gemm_nn_acc(&a, &b, m, k, n, &mut nn);
        for i in 0..m {
            for j in 0..n {
                let r: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((nn[i * n + j] - r).abs() < 1e-12);
            }
        }
        // aᵀ·c with c[m, n]
        let c: Vec<f64> = (0..m * n).map(|i| 0.5 * i as f64).collect();
        let mut tn = vec![0.0; k * n];
        gemm_tn_acc(&a, &c, m, k, n, &mut tn);
        for p in 0..k {
            for j in 0..n {
                let r: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((tn[p * n + j] - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, ks) = (2, 4, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut cols = vec![0.0; h * w * c * ks * ks];
        im2col(&x, c, h, w, ks, &mut cols);
        let g: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&g, c, h, w, ks, &mut back);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
