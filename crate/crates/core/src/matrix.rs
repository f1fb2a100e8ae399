//! Dense row-major f64 matrices with the fixed operation set the pipeline
//! needs.
//!
//! Everything downstream (graph layers, the GAN, the trainer) works on a few
//! hundred to a few thousand nodes, so a plain `Vec<f64>` store beats any
//! sparse cleverness. Matmul parallelizes over output rows; each output
//! element is accumulated by a single thread in ascending-k order, so results
//! are identical regardless of worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Below this many output elements, matmul stays single-threaded.
const PAR_MATMUL_THRESHOLD: usize = 64 * 64;

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        lhs: format!("{}x{}", a.rows, a.cols),
        rhs: format!("{}x{}", b.rows, b.cols),
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data. Rejects length mismatches and non-finite
    /// entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(
                "Matrix::from_vec",
                format!("{} values for a {}x{} matrix", data.len(), rows, cols),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "Matrix::from_vec",
                msg: format!("non-finite entry {v}"),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::contract("Matrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single entry of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar matrix");
        self.data[0]
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

    /// Standard product. Accumulation runs over k in ascending order per
    /// output element, matching the naive triple loop bit for bit.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", self, other));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        let body = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if n * m >= PAR_MATMUL_THRESHOLD {
            out.par_chunks_mut(m).enumerate().for_each(body);
        } else {
            out.chunks_mut(m).enumerate().for_each(body);
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(shape_err(op, self, other));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn softplus(&self) -> Matrix {
        self.map(softplus)
    }

    pub fn exp(&self) -> Result<Matrix> {
        let out = self.map(f64::exp);
        if !out.is_finite() {
            return Err(Error::Numeric {
                op: "exp",
                msg: "overflow to infinity".into(),
            });
        }
        Ok(out)
    }

    pub fn ln(&self) -> Result<Matrix> {
        if let Some(v) = self.data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("log of non-positive entry {v}"),
            });
        }
        Ok(self.map(f64::ln))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Per-row log-softmax with max-subtraction; rows exponentiate and sum
    /// to 1 within 1e-12.
    pub fn log_softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    /// Tile a 1xC row into an NxC matrix.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Matrix> {
        if self.rows != 1 {
            return Err(Error::contract(
                "broadcast_rows",
                format!("expected a single row, got {}x{}", self.rows, self.cols),
            ));
        }
        let mut data = Vec::with_capacity(rows * self.cols);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Ok(Matrix {
            rows,
            cols: self.cols,
            data,
        })
    }

    /// Column sums as a 1xC row.
    pub fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }
}

/// Numerically stable softplus: ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the softplus derivative.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    /// Independent brute-force oracle: naive i-j-k triple loop.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let m = mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = Matrix::identity(2);
        assert_eq!(i.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(2, 1, &[1.0, 1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bit_for_bit() {
        let mut rng = crate::rng::stream(7, "matmul-oracle");
        for _ in 0..20 {
            let (n, k, m) = (3, 4, 2);
            let a = crate::rng::random_matrix(&mut rng, n, k, 1.0);
            let b = crate::rng::random_matrix(&mut rng, k, m, 1.0);
            let got = a.matmul(&b).unwrap();
            let want = matmul_oracle(&a, &b);
            assert_eq!(got.data(), want.data());
        }
    }

    #[test]
    fn matmul_large_parallel_matches_oracle() {
        let mut rng = crate::rng::stream(8, "matmul-par");
        let a = crate::rng::random_matrix(&mut rng, 70, 33, 1.0);
        let b = crate::rng::random_matrix(&mut rng, 33, 70, 1.0);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_large_inputs_stay_finite_and_positive() {
        assert!(softplus(1000.0).is_finite());
        // no underflow to zero anywhere in the working range
        assert!(softplus(-40.0) > 0.0);
        assert!(softplus(40.0).is_finite());
    }

    #[test]
    fn relu_definition() {
        let m = mat(1, 3, &[-1.0, 0.0, 2.0]);
        assert_eq!(m.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn hadamard_with_identity_zeroes_off_diagonal() {
        let f = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let masked = f.hadamard(&Matrix::identity(2)).unwrap();
        assert_eq!(masked.data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let m = mat(1, 2, &[1.0, 0.0]);
        assert!(matches!(m.ln(), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_softmax_symmetric_row() {
        let m = mat(1, 2, &[0.0, 0.0]);
        let s = m.log_softmax_rows();
        for v in s.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_no_overflow() {
        let m = mat(1, 2, &[1000.0, 0.0]);
        let s = m.log_softmax_rows();
        assert!(s.is_finite());
        assert!(s.get(0, 0).abs() < 1e-10);
    }

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let mut rng = crate::rng::stream(3, "lsm");
        let m = crate::rng::random_matrix(&mut rng, 4, 3, 5.0);
        let s = m.log_softmax_rows();
        for r in 0..4 {
            let total: f64 = s.row(r).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "row {r} sums to {total}");
        }
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn broadcast_and_column_sums_are_adjoint_shapes() {
        let row = mat(1, 3, &[1.0, 2.0, 3.0]);
        let tiled = row.broadcast_rows(4).unwrap();
        assert_eq!(tiled.rows(), 4);
        assert_eq!(tiled.row(3), row.data());
        let sums = tiled.column_sums();
        assert_eq!(sums.data(), &[4.0, 8.0, 12.0]);
    }
}
