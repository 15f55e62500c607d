//! Flat row-major f32 matrices and the handful of kernels the lab needs.
//!
//! All arithmetic is plain f32 with a fixed accumulation order, so results
//! are bitwise-reproducible across runs and thread counts. Norm reductions
//! accumulate in f64 for stability and are truncated back to f32 at the
//! boundary.

use serde::{Deserialize, Serialize};

/// Row-major matrix: element (r, c) lives at `data[r * cols + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data length mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Frobenius norm (f64 accumulation).
    pub fn frobenius(&self) -> f32 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// out = a @ b, a: [m x k], b: [k x n].
///
/// i-k-j loop order: the inner loop is a contiguous axpy over b's rows,
/// which LLVM vectorizes.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = b.row(p);
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
    out
}

/// out = a @ b^T, a: [m x k], b: [n x k].
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    let (m, n) = (a.rows, b.rows);
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..n {
            out_row[j] = dot(a_row, b.row(j));
        }
    }
    out
}

/// out = a^T @ b, a: [k x m], b: [k x n].
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
    let (m, n, k) = (a.cols, b.cols, a.rows);
    let mut out = Mat::zeros(m, n);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &a_pi) in a_row.iter().enumerate().take(m) {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = out.row_mut(i);
            for j in 0..n {
                out_row[j] += a_pi * b_row[j];
            }
        }
    }
    out
}

/// y = x @ w + b for a single row vector x.
pub fn affine_row(x: &[f32], w: &Mat, bias: &[f32], out: &mut [f32]) {
    assert_eq!(x.len(), w.rows);
    assert_eq!(out.len(), w.cols);
    out.copy_from_slice(bias);
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        let w_row = w.row(p);
        for j in 0..w.cols {
            out[j] += xp * w_row[j];
        }
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// L2 norm with f64 accumulation.
pub fn norm(v: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for &x in v {
        acc += f64::from(x) * f64::from(x);
    }
    acc.sqrt() as f32
}

/// y += alpha * x.
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

pub fn scale(v: &mut [f32], alpha: f32) {
    for x in v.iter_mut() {
        *x *= alpha;
    }
}

pub fn sub(a: &[f32], b: &[f32]) -> Vec<f32> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// w += scale_factor * (k outer delta); w: [len(k) x len(delta)].
pub fn add_outer(w: &mut Mat, k: &[f32], delta: &[f32], scale_factor: f32) {
    assert_eq!(w.rows, k.len());
    assert_eq!(w.cols, delta.len());
    for (r, &kr) in k.iter().enumerate() {
        let coeff = scale_factor * kr;
        if coeff == 0.0 {
            continue;
        }
        let row = w.row_mut(r);
        for (c, &dc) in delta.iter().enumerate() {
            row[c] += coeff * dc;
        }
    }
}

/// Numerically stable in-place softmax over a slice.
pub fn softmax_inplace(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// log(softmax(v))[idx], computed in f64 for loss accumulation.
pub fn log_softmax_at(v: &[f32], idx: usize) -> f64 {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for &x in v {
        sum += f64::from(x - max).exp();
    }
    f64::from(v[idx] - max) - sum.ln()
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > best_v {
            best_v = x;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_reference() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let b = Mat::from_vec(2, 3, vec![0.2, 1.0, -0.7, 2.0, -0.3, 0.9]);
        // a @ b^T
        let nt = matmul_nt(&a, &b);
        let mut bt = Mat::zeros(3, 2);
        for r in 0..2 {
            for c in 0..3 {
                bt.set(c, r, b.get(r, c));
            }
        }
        assert_eq!(nt.data, matmul(&a, &bt).data);
        // a^T @ b
        let tn = matmul_tn(&a, &b);
        let mut at = Mat::zeros(3, 2);
        for r in 0..2 {
            for c in 0..3 {
                at.set(c, r, a.get(r, c));
            }
        }
        assert_eq!(tn.data, matmul(&at, &b).data);
    }

    #[test]
    fn softmax_normalizes() {
        let mut v = vec![1.0, 2.0, 3.0, -1.0];
        softmax_inplace(&mut v);
        let s: f32 = v.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn outer_update_matches_manual() {
        let mut w = Mat::zeros(2, 3);
        add_outer(&mut w, &[1.0, 2.0], &[3.0, 4.0, 5.0], 0.5);
        assert_eq!(w.data, vec![1.5, 2.0, 2.5, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn norm_uses_stable_accumulation() {
        let v = vec![3.0f32, 4.0];
        assert!((norm(&v) - 5.0).abs() < 1e-6);
    }
}
