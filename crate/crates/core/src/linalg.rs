//! Dense row-major matrices and the handful of kernels the pipeline runs on.
//!
//! Kernels are written so the inner loops autovectorize: elementwise update
//! loops for products, and fixed-shape multi-accumulator reductions for dot
//! products (f64 sums cannot be reassociated by the compiler, so the unroll
//! is explicit and the summation order is fixed, keeping results
//! bit-reproducible across runs).

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Accumulator lanes for unrolled dot products. One AVX-512 f64 register.
const DOT_LANES: usize = 8;

/// Row-major dense matrix of finite f64 entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("matrix entries must be finite".to_string()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Standard normal entries.
    pub fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Copies the given rows into a new matrix, preserving order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * b` for `self: m x k`, `b: k x n`.
    pub fn matmul(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut c = Matrix::zeros(m, n);
        let full = m - m % 4;
        // Blocks of four output rows reuse each streamed row of b four times.
        for ib in (0..full).step_by(4) {
            let (c0, rest) = c.data[ib * n..(ib + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let a0 = &self.data[ib * k..(ib + 1) * k];
            let a1 = &self.data[(ib + 1) * k..(ib + 2) * k];
            let a2 = &self.data[(ib + 2) * k..(ib + 3) * k];
            let a3 = &self.data[(ib + 3) * k..(ib + 4) * k];
            for p in 0..k {
                let brow = b.row(p);
                let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
                for j in 0..n {
                    let bv = brow[j];
                    c0[j] += v0 * bv;
                    c1[j] += v1 * bv;
                    c2[j] += v2 * bv;
                    c3[j] += v3 * bv;
                }
            }
        }
        for i in full..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let crow = &mut c.data[i * n..(i + 1) * n];
            for p in 0..k {
                let v = arow[p];
                let brow = b.row(p);
                for j in 0..n {
                    crow[j] += v * brow[j];
                }
            }
        }
        c
    }

    /// `self * b^T` for `self: m x k`, `b: n x k`.
    pub fn matmul_bt(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.cols, "matmul_bt shape mismatch");
        let (m, n) = (self.rows, b.rows);
        let mut c = Matrix::zeros(m, n);
        for i in 0..m {
            let arow = self.row(i);
            let crow = c.row_mut(i);
            for (j, val) in crow.iter_mut().enumerate() {
                *val = dot(arow, b.row(j));
            }
        }
        c
    }

    /// `self^T * diag(w) * b` for `self: s x m`, `b: s x n`, `w: s`.
    ///
    /// This is the clipped-gradient aggregation kernel: summing weighted
    /// per-sample outer products without materializing them.
    pub fn matmul_at_weighted(&self, b: &Matrix, w: &[f64]) -> Matrix {
        assert_eq!(self.rows, b.rows, "matmul_at_weighted shape mismatch");
        assert_eq!(self.rows, w.len(), "matmul_at_weighted weight mismatch");
        let (s, m, n) = (self.rows, self.cols, b.cols);
        let mut c = Matrix::zeros(m, n);
        let full = m - m % 4;
        for ib in (0..full).step_by(4) {
            let (c0, rest) = c.data[ib * n..(ib + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for p in 0..s {
                let arow = self.row(p);
                let brow = b.row(p);
                let wp = w[p];
                let (v0, v1, v2, v3) = (
                    wp * arow[ib],
                    wp * arow[ib + 1],
                    wp * arow[ib + 2],
                    wp * arow[ib + 3],
                );
                for j in 0..n {
                    let bv = brow[j];
                    c0[j] += v0 * bv;
                    c1[j] += v1 * bv;
                    c2[j] += v2 * bv;
                    c3[j] += v3 * bv;
                }
            }
        }
        for i in full..m {
            let crow = &mut c.data[i * n..(i + 1) * n];
            for p in 0..s {
                let v = w[p] * self.data[p * m + i];
                let brow = b.row(p);
                for j in 0..n {
                    crow[j] += v * brow[j];
                }
            }
        }
        c
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    /// Squared L2 norm of every row.
    pub fn row_sq_norms(&self) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), self.row(i))).collect()
    }
}

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    let chunks = a.len() / DOT_LANES;
    let mut acc = [0.0f64; DOT_LANES];
    for c in 0..chunks {
        let off = c * DOT_LANES;
        for l in 0..DOT_LANES {
            acc[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * DOT_LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// Scaled vector addition `y += alpha * x`.
#[inline]
pub fn vec_axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len(), "vec_axpy length mismatch");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Orthogonal matrix sampled by QR-decomposing a standard normal matrix.
///
/// Householder QR with the R diagonal forced positive, which makes the
/// distribution of Q uniform over the orthogonal group.
pub fn haar_orthogonal(d: usize, rng: &mut impl Rng) -> Matrix {
    assert!(d >= 1, "haar_orthogonal requires d >= 1");
    // Work on the transpose so each column of A is a contiguous row here.
    let mut at = Matrix::randn(d, d, rng);
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(d);
    for k in 0..d {
        let x = &at.row(k)[k..];
        let norm = dot(x, x).sqrt();
        let mut v = x.to_vec();
        if norm > 0.0 {
            // v = x + sign(x0)*|x|*e0 avoids cancellation in the reflector.
            let alpha = if v[0] >= 0.0 { norm } else { -norm };
            v[0] += alpha;
        }
        let vn2 = dot(&v, &v);
        if vn2 > 0.0 {
            // Reflect columns k.. of A (rows k.. of the transpose).
            for j in k..d {
                let rowj = &mut at.row_mut(j)[k..];
                let c = 2.0 * dot(&v, rowj) / vn2;
                vec_axpy(rowj, -c, &v);
            }
        }
        reflectors.push(v);
    }
    // Accumulate M = H_{d-1} ... H_0 = Q^T by left-applying each reflector.
    let mut m = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });
    for (k, v) in reflectors.iter().enumerate() {
        let vn2 = dot(v, v);
        if vn2 == 0.0 {
            continue;
        }
        let mut w = vec![0.0; d];
        for (off, &vi) in v.iter().enumerate() {
            vec_axpy(&mut w, vi, m.row(k + off));
        }
        let c = 2.0 / vn2;
        for (off, &vi) in v.iter().enumerate() {
            vec_axpy(m.row_mut(k + off), -c * vi, &w);
        }
    }
    // Row j of M is column j of Q; rescale by the sign of R's diagonal.
    for j in 0..d {
        if at.get(j, j) < 0.0 {
            for v in m.row_mut(j) {
                *v = -*v;
            }
        }
    }
    m.transpose()
}
