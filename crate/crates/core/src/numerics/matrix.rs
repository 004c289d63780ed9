//! Dense row-major f64 matrices and the plain (non-differentiable) kernels.

use serde::{Deserialize, Serialize};

use crate::error::{CromeError, Result};

/// Dense matrix, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Matrix::from_vec(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() on non-scalar matrix");
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// a += s * b, shapes must match.
    pub fn add_scaled(&mut self, b: &Matrix, s: f64) {
        assert_eq!(self.shape(), b.shape(), "add_scaled shape mismatch");
        for (x, y) in self.data.iter_mut().zip(b.data.iter()) {
            *x += s * y;
        }
    }

    /// Mean of each column, returned as a 1 x cols row vector.
    pub fn col_mean(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        let n = self.rows as f64;
        for v in out.data.iter_mut() {
            *v /= n;
        }
        out
    }
}

/// Standard matrix product. ikj loop order over row-major data.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(CromeError::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax, stabilized by per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Elementwise max(0, x). The subgradient at 0 is taken as 0 everywhere.
pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Cosine similarity of two equal-length vectors. Errors on zero norm: a
/// zero-norm embedding signals a dead encoder and must surface, not be patched.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CromeError::shape("cosine_sim", (1, a.len()), (1, b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(CromeError::DegenerateVector(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let i = Matrix::identity(2);
        assert_eq!(matmul(&i, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_against_triple_loop_oracle() {
        let mut rng = crate::numerics::rng::RngStream::new(7, "matmul-oracle");
        let a = Matrix::from_vec(5, 7, (0..35).map(|_| rng.next_f64() - 0.5).collect());
        let b = Matrix::from_vec(7, 3, (0..21).map(|_| rng.next_f64() - 0.5).collect());
        let c = matmul(&a, &b).unwrap();
        // Independent naive triple loop.
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.get(i, p) * b.get(p, j);
                }
                assert!((c.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "got: {msg}");
    }

    #[test]
    fn softmax_equal_logits() {
        let m = Matrix::from_rows(&[vec![3.5, 3.5, 3.5]]);
        let s = softmax_rows(&m);
        for v in s.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic() {
        let m = Matrix::from_rows(&[vec![0.0, 3.0f64.ln()]]);
        let s = softmax_rows(&m);
        assert!((s.data[0] - 0.25).abs() < 1e-12);
        assert!((s.data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula_oracle() {
        let mut rng = crate::numerics::rng::RngStream::new(11, "softmax-oracle");
        let m = Matrix::from_vec(4, 6, (0..24).map(|_| 4.0 * (rng.next_f64() - 0.5)).collect());
        let s = softmax_rows(&m);
        for r in 0..4 {
            let row = m.row(r);
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..6 {
                assert!((s.get(r, c) - row[c].exp() / sum).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_stable_at_large_magnitude() {
        let m = Matrix::from_rows(&[vec![1e4, -1e4, 0.0]]);
        let s = softmax_rows(&m);
        assert!(s.is_finite());
        let sum: f64 = s.row(0).iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn relu_cases() {
        let m = Matrix::from_rows(&[vec![-1.0, 0.0, 2.0]]);
        assert_eq!(relu(&m).data, vec![0.0, 0.0, 2.0]);
        let neg = Matrix::from_rows(&[vec![-3.0, -0.5]]);
        assert_eq!(relu(&neg).data, vec![0.0, 0.0]);
        let pos = Matrix::from_rows(&[vec![3.0, 0.5]]);
        assert_eq!(relu(&pos).data, pos.data);
    }

    #[test]
    fn cosine_basic() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
