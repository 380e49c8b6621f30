//! Dense row-major matrix. Deliberately minimal: exactly the operations the
//! layers, combiners, and metrics need, nothing resembling a BLAS.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major 2-D array of scalars. Values are immutable once returned
/// from an operation; in-place mutation is reserved for owned buffers
/// (gradients, velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    /// Build from a flat row-major buffer. Fails if the length does not
    /// match `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Domain(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Domain(format!(
                    "row {} has length {}, expected {}",
                    i,
                    row.len(),
                    c
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Standard matrix product. `self` is (m, k), `rhs` is (k, n).
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Self::zeros(m, n);
        // i-k-j order keeps the inner loop contiguous in both rhs and out.
        for i in 0..m {
            let a_row = self.row(i);
            let o_row = out.row_mut(i);
            for (p, &a_ip) in a_row.iter().enumerate().take(k) {
                let b_row = rhs.row(p);
                for j in 0..n {
                    o_row[j] += a_ip * b_row[j];
                }
            }
        }
        debug_assert!(out.is_all_finite(), "matmul produced non-finite entries");
        Ok(out)
    }

    /// `self * rhs^T` without materializing the transpose.
    /// `self` is (m, k), `rhs` is (n, k), result is (m, n).
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (m, n) = (self.rows, rhs.rows);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let o_row = out.row_mut(i);
            for (j, o) in o_row.iter_mut().enumerate().take(n) {
                let b_row = rhs.row(j);
                let mut acc = F::zero();
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += *a * *b;
                }
                *o = acc;
            }
        }
        debug_assert!(out.is_all_finite(), "matmul_nt produced non-finite entries");
        Ok(out)
    }

    /// `self^T * rhs` without materializing the transpose.
    /// `self` is (k, m), `rhs` is (k, n), result is (m, n).
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (k, m, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Self::zeros(m, n);
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = rhs.row(p);
            for (i, &a_pi) in a_row.iter().enumerate().take(m) {
                let o_row = out.row_mut(i);
                for j in 0..n {
                    o_row[j] += a_pi * b_row[j];
                }
            }
        }
        debug_assert!(out.is_all_finite(), "matmul_tn produced non-finite entries");
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Index of the maximum entry in `row`; ties break to the lowest index.
    pub fn argmax_row(&self, row: usize) -> usize {
        assert!(row < self.rows, "row {} out of range {}", row, self.rows);
        assert!(self.cols >= 1, "argmax on empty row");
        let mut best = 0;
        let mut best_val = self.get(row, 0);
        for (j, &v) in self.row(row).iter().enumerate().skip(1) {
            if v > best_val {
                best = j;
                best_val = v;
            }
        }
        best
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_assign",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: F) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn fill(&mut self, v: F) {
        self.data.fill(v);
    }

    /// Column-wise sums as a (1, cols) matrix.
    pub fn col_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let o = out.row_mut(0);
            for (j, &v) in row.iter().enumerate() {
                o[j] += v;
            }
        }
        out
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat_cols of empty list".into()))?;
        let rows = first.rows;
        let total_cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Self::zeros(rows, total_cols);
        for r in 0..rows {
            let mut offset = 0;
            for part in parts {
                if part.rows != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        lhs: (rows, first.cols),
                        rhs: part.shape(),
                    });
                }
                out.row_mut(r)[offset..offset + part.cols].copy_from_slice(part.row(r));
                offset += part.cols;
            }
        }
        Ok(out)
    }

    /// Copy of columns `[start, start + len)`.
    pub fn col_slice(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut out = Self::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference against another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(F::zero(), F::max)
    }
}
