//! Dense row-major matrix over a [`Real`] scalar, plus the small set of
//! vector helpers the algorithms lean on.
//!
//! Shapes here are desk scale (tens to a few hundred rows), so every kernel
//! is a straightforward loop; clarity and determinism win over blocking
//! tricks. Accumulation order is fixed, which the reproducibility
//! guarantees rely on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::real::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Wraps `data` (row-major) after checking only the element count.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> CoreResult<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::ShapeMismatch {
                context: "Matrix::from_vec: data length != rows * cols",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but additionally rejects NaN/Inf entries.
    pub fn checked(rows: usize, cols: usize, data: Vec<T>) -> CoreResult<Self> {
        let m = Matrix::from_vec(rows, cols, data)?;
        if !m.is_finite() {
            return Err(CoreError::NonFinite {
                context: "Matrix::checked: entry is NaN or infinite",
            });
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Borrow row `r` as a slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Iterator over rows as slices, in order.
    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols)
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> CoreResult<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(CoreError::ShapeMismatch {
                context: "Matrix::matmul: lhs cols != rhs rows",
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == T::zero() {
                    continue;
                }
                let rrow = &rhs.data[p * rhs.cols..(p + 1) * rhs.cols];
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix–vector product `self * x`.
    pub fn mul_vec(&self, x: &[T]) -> CoreResult<Vec<T>> {
        if x.len() != self.cols {
            return Err(CoreError::ShapeMismatch {
                context: "Matrix::mul_vec: vector length != cols",
            });
        }
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            out.push(dot(self.row(r), x));
        }
        Ok(out)
    }

    /// Transposed-matrix–vector product `selfᵀ * x`, without materializing
    /// the transpose.
    pub fn tr_mul_vec(&self, x: &[T]) -> CoreResult<Vec<T>> {
        if x.len() != self.rows {
            return Err(CoreError::ShapeMismatch {
                context: "Matrix::tr_mul_vec: vector length != rows",
            });
        }
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == T::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o = *o + xr * a;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .map(|&v| v * v)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    /// Multiplies every entry by `c` in place.
    pub fn scale_in_place(&mut self, c: T) {
        for v in &mut self.data {
            *v = *v * c;
        }
    }

    /// Adds `c * other` in place; shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix<T>, c: T) -> CoreResult<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(CoreError::ShapeMismatch {
                context: "Matrix::add_scaled: shapes differ",
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + c * b;
        }
        Ok(())
    }

    /// Vertical concatenation `[self; below]`.
    pub fn vstack(&self, below: &Matrix<T>) -> CoreResult<Matrix<T>> {
        if self.cols != below.cols && self.rows != 0 && below.rows != 0 {
            return Err(CoreError::ShapeMismatch {
                context: "Matrix::vstack: column counts differ",
            });
        }
        let cols = if self.rows == 0 { below.cols } else { self.cols };
        let mut data = Vec::with_capacity(self.data.len() + below.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&below.data);
        Matrix::from_vec(self.rows + below.rows, cols, data)
    }

    /// Copy of the row block `[start, start + len)`.
    pub fn row_block(&self, start: usize, len: usize) -> CoreResult<Matrix<T>> {
        if start + len > self.rows {
            return Err(CoreError::ShapeMismatch {
                context: "Matrix::row_block: block exceeds row count",
            });
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Matrix::from_vec(len, self.cols, data)
    }

    /// Copy of the column block `[start, start + len)`.
    pub fn column_block(&self, start: usize, len: usize) -> CoreResult<Matrix<T>> {
        if start + len > self.cols {
            return Err(CoreError::ShapeMismatch {
                context: "Matrix::column_block: block exceeds column count",
            });
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + start + len]);
        }
        Matrix::from_vec(self.rows, len, data)
    }
}

/// Dot product with a fixed left-to-right accumulation order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// `y += c * x` in place.
#[inline]
pub fn axpy<T: Real>(y: &mut [T], c: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + c * xi;
    }
}

/// Euclidean norm.
#[inline]
pub fn norm2<T: Real>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

/// Multiplies a slice by `c` in place.
#[inline]
pub fn scale<T: Real>(x: &mut [T], c: T) {
    for v in x {
        *v = *v * c;
    }
}

/// Cosine similarity with the convention that any zero-norm operand gives 0.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> T {
    let na = norm2(a);
    let nb = norm2(b);
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot(a, b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0f64; 4]).is_ok());
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0f64; 3]),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn checked_rejects_non_finite() {
        assert!(matches!(
            Matrix::checked(1, 2, vec![1.0f64, f64::NAN]),
            Err(CoreError::NonFinite { .. })
        ));
        assert!(matches!(
            Matrix::checked(1, 2, vec![1.0f32, f32::INFINITY]),
            Err(CoreError::NonFinite { .. })
        ));
        assert!(Matrix::checked(1, 2, vec![1.0f64, -3.5]).is_ok());
    }

    #[test]
    fn matmul_identity_is_noop() {
        let a = Matrix::from_vec(2, 2, vec![3.0f64, -1.0, 2.0, 0.5]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(i.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = Matrix::from_vec(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(
            a.matmul(&b),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mul_vec_and_transpose_agree() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = [1.0, -1.0];
        let direct = a.tr_mul_vec(&x).unwrap();
        let via_transpose = a.transpose().mul_vec(&x).unwrap();
        assert_eq!(direct, via_transpose);
        assert_eq!(direct, vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn frobenius_norm_hand_case() {
        let a = Matrix::from_vec(1, 2, vec![3.0f64, 4.0]).unwrap();
        assert!((a.frobenius_norm() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_convention() {
        assert_eq!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine_similarity(&[1.0f64, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0f64, 0.0], &[0.0, 3.0])).abs() < 1e-15);
    }

    #[test]
    fn vstack_and_row_block_round_trip() {
        let a = Matrix::from_vec(1, 2, vec![1.0f64, 2.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = a.vstack(&b).unwrap();
        assert_eq!(s.rows(), 3);
        assert_eq!(s.row_block(1, 2).unwrap(), b);
    }

    #[test]
    fn column_block_extracts_contiguous_columns() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = a.column_block(1, 2).unwrap();
        assert_eq!(b.as_slice(), &[2.0, 3.0, 5.0, 6.0]);
        assert!(a.column_block(2, 2).is_err());
    }
}
