//! Minimal dense linear algebra: row-major matrices, vectors, and the handful
//! of operations backpropagation needs.
//!
//! Accumulation order is fixed (ascending loop indices) so that distributed
//! runs can be compared bit-for-bit against single-process runs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector<S: Scalar> {
    data: Vec<S>,
}

impl<S: Scalar> DenseMatrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        DenseMatrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 || rows[0].is_empty() {
            return Err(Error::shape("empty row set"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Standard matrix product. i-k-j loop order: row-major friendly and a
    /// fixed accumulation order for every element.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == S::zero() {
                    continue;
                }
                let b_row = rhs.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + aik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self += alpha * x`, in place.
    pub fn axpy_into(&mut self, alpha: S, x: &Self) -> Result<()> {
        if !self.same_shape(x) {
            return Err(Error::shape(format!(
                "axpy {}x{} into {}x{}",
                x.rows, x.cols, self.rows, self.cols
            )));
        }
        for (y, &xv) in self.data.iter_mut().zip(x.data.iter()) {
            *y = *y + alpha * xv;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: S) {
        for v in &mut self.data {
            *v = *v * alpha;
        }
    }

    pub fn scaled(&self, alpha: S) -> Self {
        let mut out = self.clone();
        out.scale_in_place(alpha);
        out
    }

    /// Accumulates `alpha * u vᵀ` into `self`.
    pub fn add_outer(&mut self, alpha: S, u: &[S], v: &[S]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::shape(format!(
                "outer {}x{} into {}x{}",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            )));
        }
        for (i, &ui) in u.iter().enumerate() {
            let row = self.row_mut(i);
            let a = alpha * ui;
            for (r, &vj) in row.iter_mut().zip(v.iter()) {
                *r = *r + a * vj;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise relative difference, with a unit floor so that
    /// near-zero entries compare absolutely.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "max_rel_diff shape mismatch");
        let mut worst = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let a = a.to_f64_lossy();
            let b = b.to_f64_lossy();
            let denom = a.abs().max(b.abs()).max(1.0);
            worst = worst.max((a - b).abs() / denom);
        }
        worst
    }
}

impl<S: Scalar> DenseVector<S> {
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        DenseVector {
            data: vec![S::zero(); len],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        assert!(!data.is_empty(), "vector length must be positive");
        DenseVector { data }
    }

    pub fn unit(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.data[index] = S::one();
        v
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
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }
}

/// Outer product `u vᵀ`, dims `u.len() x v.len()`.
pub fn outer<S: Scalar>(u: &DenseVector<S>, v: &DenseVector<S>) -> DenseMatrix<S> {
    let mut out = DenseMatrix::zeros(u.len(), v.len());
    out.add_outer(S::one(), u.as_slice(), v.as_slice())
        .expect("freshly sized");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    /// Independent naive triple-loop product.
    fn matmul_oracle(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
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
    fn identity_times_matrix_is_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 3, 3);
        let id = DenseMatrix::identity(3);
        assert_eq!(id.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(got.max_rel_diff(&want) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = DenseMatrix::<f64>::zeros(2, 3);
        let b = DenseMatrix::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(crate::error::Error::Shape(_))));
    }

    #[test]
    fn outer_basis_vectors() {
        let u = DenseVector::<f64>::unit(3, 0);
        let v = DenseVector::<f64>::unit(4, 1);
        let m = outer(&u, &v);
        assert_eq!(m.rows(), 3);
        assert_eq!(m.cols(), 4);
        for i in 0..3 {
            for j in 0..4 {
                let want = if i == 0 && j == 1 { 1.0 } else { 0.0 };
                assert_eq!(m.get(i, j), want);
            }
        }
    }

    #[test]
    fn outer_scalars() {
        let u = DenseVector::from_vec(vec![2.0f64]);
        let v = DenseVector::from_vec(vec![3.0f64]);
        assert_eq!(outer(&u, &v).as_slice(), &[6.0]);
    }

    #[test]
    fn outer_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = DenseVector::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let v = DenseVector::from_vec((0..9).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let m = outer(&u, &v);
        for i in 0..6 {
            for j in 0..9 {
                assert_eq!(m.get(i, j), u.as_slice()[i] * v.as_slice()[j]);
            }
        }
    }

    #[test]
    fn axpy_zero_alpha_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 4);
        let y0 = random_matrix(&mut rng, 4, 4);
        let mut y = y0.clone();
        y.axpy_into(0.0, &x).unwrap();
        assert_eq!(y, y0);
    }

    #[test]
    fn axpy_cancels_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y0 = random_matrix(&mut rng, 3, 5);
        let x = y0.scaled(-1.0);
        let mut y = y0;
        y.axpy_into(1.0, &x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn axpy_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 3, 7);
        let y0 = random_matrix(&mut rng, 3, 7);
        let alpha = 0.37;
        let mut y = y0.clone();
        y.axpy_into(alpha, &x).unwrap();
        for idx in 0..y.len() {
            assert_eq!(
                y.as_slice()[idx],
                y0.as_slice()[idx] + alpha * x.as_slice()[idx]
            );
        }
    }

    #[test]
    fn summed_outers_equal_stacked_matmul() {
        // Σ_k u_k v_kᵀ == U Vᵀ with U the column-stack of u's, V the row-stack of v's.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (m, n, k) = (5, 7, 4);
        let us: Vec<DenseVector<f64>> = (0..k)
            .map(|_| DenseVector::from_vec((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let vs: Vec<DenseVector<f64>> = (0..k)
            .map(|_| DenseVector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();

        let mut sum = DenseMatrix::zeros(m, n);
        for (u, v) in us.iter().zip(vs.iter()) {
            sum.axpy_into(1.0, &outer(u, v)).unwrap();
        }

        let mut u_stack = DenseMatrix::zeros(m, k);
        let mut v_stack = DenseMatrix::zeros(k, n);
        for (c, u) in us.iter().enumerate() {
            for i in 0..m {
                u_stack.set(i, c, u.as_slice()[i]);
            }
        }
        for (r, v) in vs.iter().enumerate() {
            v_stack.row_mut(r).copy_from_slice(v.as_slice());
        }
        let prod = u_stack.matmul(&v_stack).unwrap();
        assert!(sum.max_rel_diff(&prod) < 1e-10);
    }

    #[test]
    fn matmul_associativity_on_small_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 4, 3);
            let b = random_matrix(&mut rng, 3, 5);
            let c = random_matrix(&mut rng, 5, 2);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_rel_diff(&right) < 1e-8);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = random_matrix(&mut rng, 4, 6);
        assert_eq!(m.transpose().transpose(), m);
    }
}
