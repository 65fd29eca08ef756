//! Dense row-major f64 matrix.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-adds a product runs single-threaded; above it,
/// output rows are processed in fixed-size chunks in parallel. Chunk
/// contents are computed sequentially, so results are bitwise identical
/// for any thread count.
const PAR_MIN_MADDS: usize = 1 << 20;
const PAR_ROW_CHUNK: usize = 16;

/// Dense row-major matrix of `f64`.
///
/// All reductions (matrix products, column sums) accumulate in a fixed,
/// documented order — ascending over the contracted index — so identical
/// inputs give bitwise-identical outputs regardless of parallelism.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Wrap an existing row-major buffer; its length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot form a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; all rows must share one width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {} has {} values, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
        Error::Shape(format!(
            "{op}: lhs {}x{}, rhs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ))
    }

    /// `self * rhs`. Each output entry sums over the contracted index in
    /// ascending order (row-major, left to right).
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Self::shape_err("matmul", self, rhs));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let madds = self.rows * self.cols * rhs.cols;
        if madds >= PAR_MIN_MADDS && self.rows > 1 {
            let n = rhs.cols;
            out.data
                .par_chunks_mut(PAR_ROW_CHUNK * n)
                .zip(self.data.par_chunks(PAR_ROW_CHUNK * self.cols))
                .for_each(|(out_chunk, a_chunk)| {
                    mul_rows(a_chunk, self.cols, rhs, out_chunk);
                });
        } else {
            mul_rows(&self.data, self.cols, rhs, &mut out.data);
        }
        Ok(out)
    }

    /// `selfᵀ * rhs` without materialising the transpose.
    ///
    /// The contracted index is `self.rows`; each output entry accumulates
    /// over it in ascending order, the same order `transpose().matmul()`
    /// would use.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Self::shape_err("matmul_tn", self, rhs));
        }
        let (k, m, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(m, n);
        let madds = k * m * n;
        if madds >= PAR_MIN_MADDS && m > 1 {
            out.data
                .par_chunks_mut(PAR_ROW_CHUNK * n)
                .enumerate()
                .for_each(|(chunk_idx, out_chunk)| {
                    let i0 = chunk_idx * PAR_ROW_CHUNK;
                    for kk in 0..k {
                        let a_row = self.row(kk);
                        let b_row = rhs.row(kk);
                        for (local_i, out_row) in out_chunk.chunks_mut(n).enumerate() {
                            let a = a_row[i0 + local_i];
                            for (o, &b) in out_row.iter_mut().zip(b_row) {
                                *o += a * b;
                            }
                        }
                    }
                });
        } else {
            for kk in 0..k {
                let a_row = &self.data[kk * m..(kk + 1) * m];
                let b_row = &rhs.data[kk * n..(kk + 1) * n];
                for i in 0..m {
                    let a = a_row[i];
                    let out_row = &mut out.data[i * n..(i + 1) * n];
                    for (o, &b) in out_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `self * rhsᵀ`. Implemented as a transpose followed by `matmul`, which
    /// keeps the contracted-index accumulation order of `matmul`.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Self::shape_err("matmul_nt", self, rhs));
        }
        self.matmul(&rhs.transpose())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.zip_inplace(other, "add", |a, b| a + b)
    }

    pub fn sub_assign(&mut self, other: &Matrix) -> Result<()> {
        self.zip_inplace(other, "sub", |a, b| a - b)
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        self.zip_inplace(other, "add_scaled", |a, b| a + factor * b)
    }

    pub fn hadamard_assign(&mut self, other: &Matrix) -> Result<()> {
        self.zip_inplace(other, "hadamard", |a, b| a * b)
    }

    fn zip_inplace(
        &mut self,
        other: &Matrix,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Self::shape_err(op, self, other));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = f(*a, b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Column sums, accumulated in ascending row order.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    /// Sum of squared entries (ascending index order).
    pub fn sq_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Self::shape_err("max_abs_diff", self, other));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Multiply a block of `lhs` rows (given as a flat slice) by `rhs`,
/// accumulating into the matching block of output rows. Inner loops run
/// `k` ascending then `j` ascending, so each output cell's sum is in
/// contracted-index order while the `j` loop stays vectorisable.
fn mul_rows(a_rows: &[f64], k: usize, rhs: &Matrix, out_rows: &mut [f64]) {
    let n = rhs.cols;
    for (a_row, out_row) in a_rows.chunks(k).zip(out_rows.chunks_mut(n)) {
        for (kk, &a) in a_row.iter().enumerate() {
            let b_row = rhs.row(kk);
            for (o, &b) in out_row.iter_mut().zip(b_row) {
                *o += a * b;
            }
        }
    }
}
