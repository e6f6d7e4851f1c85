//! Dense row-major `f64` matrices and the handful of kernels the network needs.
//!
//! Every kernel produces bitwise identical results regardless of the size of
//! the rayon pool: row-parallel products are computed row by row in a fixed
//! order, and reductions over rows are split into fixed-size chunks whose
//! partial results are combined sequentially.

use std::fmt;

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};

/// Rows per chunk for reductions over the row axis.
const REDUCE_CHUNK: usize = 2048;
/// Below this many multiply-adds a product runs serially.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(
                "tensor",
                format!("{} values for shape {rows}x{cols}", data.len()),
            );
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return dim_err("tensor", "ragged rows");
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "item() on {}x{} tensor",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copy of columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return dim_err(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, self.cols),
            );
        }
        let mut out = Self::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(out)
    }

    /// Copy of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::zeros(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 32 {
            f.debug_list()
                .entries((0..self.rows).map(|r| self.row(r)))
                .finish()?;
        }
        Ok(())
    }
}

/// Accumulates `out_row += a_row · b` for a single row of the product.
#[inline]
fn row_times(a_row: &[f64], b: &Tensor, out_row: &mut [f64]) {
    let n = out_row.len();
    let mut quads = a_row.chunks_exact(4);
    let mut k = 0;
    // Four input rows per pass over `out_row`; each element still sees the
    // additions in increasing k.
    for a in quads.by_ref() {
        let rows = &b.data[k * n..(k + 4) * n];
        let (b0, rest) = rows.split_at(n);
        let (b1, rest) = rest.split_at(n);
        let (b2, b3) = rest.split_at(n);
        for j in 0..n {
            out_row[j] = out_row[j] + a[0] * b0[j] + a[1] * b1[j] + a[2] * b2[j] + a[3] * b3[j];
        }
        k += 4;
    }
    for &a in quads.remainder() {
        for (o, &w) in out_row.iter_mut().zip(b.row(k)) {
            *o += a * w;
        }
        k += 1;
    }
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return dim_err(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        );
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    let work = a.rows * a.cols * b.cols;
    if work < PAR_THRESHOLD {
        for (i, out_row) in out.data.chunks_mut(b.cols).enumerate() {
            row_times(a.row(i), b, out_row);
        }
    } else {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(i, out_row)| row_times(a.row(i), b, out_row));
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.cols {
        return dim_err(
            "matmul_a_bt",
            format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        );
    }
    let mut out = Tensor::zeros(a.rows, b.rows);
    if b.rows == 0 {
        return Ok(out);
    }
    let kernel = |i: usize, out_row: &mut [f64]| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b.row(j)) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if a.rows * a.cols * b.rows < PAR_THRESHOLD {
        for (i, out_row) in out.data.chunks_mut(b.rows).enumerate() {
            kernel(i, out_row);
        }
    } else {
        out.data
            .par_chunks_mut(b.rows)
            .enumerate()
            .for_each(|(i, out_row)| kernel(i, out_row));
    }
    Ok(out)
}

/// `aᵀ · b`, reducing over rows in fixed-size chunks.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows != b.rows {
        return dim_err(
            "matmul_at_b",
            format!("({}x{})ᵀ · {}x{}", a.rows, a.cols, b.rows, b.cols),
        );
    }
    let partial = |range: std::ops::Range<usize>| {
        let mut acc = Tensor::zeros(a.cols, b.cols);
        for i in range {
            let b_row = b.row(i);
            for (k, &x) in a.row(i).iter().enumerate() {
                for (o, &y) in acc.row_mut(k).iter_mut().zip(b_row) {
                    *o += x * y;
                }
            }
        }
        acc
    };
    let chunks: Vec<_> = (0..a.rows.div_ceil(REDUCE_CHUNK))
        .map(|c| c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(a.rows))
        .collect();
    let partials: Vec<Tensor> = if chunks.len() > 1 {
        chunks.into_par_iter().map(partial).collect()
    } else {
        chunks.into_iter().map(partial).collect()
    };
    let mut out = Tensor::zeros(a.cols, b.cols);
    for p in &partials {
        out.add_assign(p);
    }
    Ok(out)
}

/// Column sums, reduced in the same chunked order as [`matmul_at_b`].
pub fn column_sums(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, a.cols);
    for chunk in a.data.chunks(REDUCE_CHUNK * a.cols.max(1)) {
        let mut acc = vec![0.0; a.cols];
        for row in chunk.chunks(a.cols.max(1)) {
            for (o, v) in acc.iter_mut().zip(row) {
                *o += v;
            }
        }
        for (o, v) in out.data.iter_mut().zip(&acc) {
            *o += v;
        }
    }
    out
}
