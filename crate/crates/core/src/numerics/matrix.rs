use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense row-major matrix of `f64`.
///
/// Entries are checked for finiteness when the matrix is built from caller
/// data. Arithmetic results are not re-checked; the simulation loop has its
/// own divergence guard.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for DenseMatrix {
    type Error = NumericsError;

    fn try_from(repr: MatrixRepr) -> Result<Self, Self::Error> {
        DenseMatrix::new(repr.rows, repr.cols, repr.data)
    }
}

impl From<DenseMatrix> for MatrixRepr {
    fn from(m: DenseMatrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::InvalidData {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != ncols {
                return Err(NumericsError::InvalidData {
                    expected: ncols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), ncols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
        if self.cols != rhs.rows {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
        if self.cols != rhs.cols {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Self::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        }))
    }

    pub fn mul_vec(&self, v: &DenseVector) -> Result<DenseVector, NumericsError> {
        if self.cols != v.dim() {
            return Err(NumericsError::DimensionMismatch {
                op: "mul_vec",
                left: self.shape(),
                right: (v.dim(), 1),
            });
        }
        Ok(DenseVector(
            (0..self.rows)
                .map(|i| dot(self.row(i), v.as_slice()))
                .collect(),
        ))
    }

    pub(crate) fn mul_slice_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.cols, v.len());
        debug_assert_eq!(self.rows, out.len());
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), v);
        }
    }

    fn zip_with(
        &self,
        rhs: &DenseMatrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix, NumericsError> {
        if self.shape() != rhs.shape() {
            return Err(NumericsError::DimensionMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// Mean of the rows, i.e. `(1/rows) 𝟙ᵀ M`.
    pub fn row_mean(&self) -> DenseVector {
        let n = self.rows.max(1) as f64;
        DenseVector(self.column_sums().into_iter().map(|s| s / n).collect())
    }

    /// `M − 𝟙 mᵀ` where `m` is the row mean: the deviation-from-average matrix.
    pub fn centered_rows(&self) -> DenseMatrix {
        let mean = self.row_mean();
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)] - mean[j])
    }

    /// `‖M − 𝟙 mᵀ‖_F` without forming the centred matrix.
    pub fn centered_frobenius_norm(&self) -> f64 {
        let n = self.rows.max(1) as f64;
        let mut total = 0.0;
        for j in 0..self.cols {
            let mean = (0..self.rows).map(|i| self[(i, j)]).sum::<f64>() / n;
            total += (0..self.rows)
                .map(|i| (self[(i, j)] - mean).powi(2))
                .sum::<f64>();
        }
        total.sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Copies the `rows x cols` block starting at (`row`, `col`).
    pub fn block(&self, row: usize, col: usize, rows: usize, cols: usize) -> DenseMatrix {
        Self::from_fn(rows, cols, |i, j| self[(row + i, col + j)])
    }

    /// Assembles `[[a, b], [c, d]]` from four equally sized square blocks.
    pub fn from_blocks(
        a: &DenseMatrix,
        b: &DenseMatrix,
        c: &DenseMatrix,
        d: &DenseMatrix,
    ) -> Result<DenseMatrix, NumericsError> {
        let n = a.rows;
        for m in [a, b, c, d] {
            if m.shape() != (n, n) {
                return Err(NumericsError::DimensionMismatch {
                    op: "from_blocks",
                    left: a.shape(),
                    right: m.shape(),
                });
            }
        }
        Ok(Self::from_fn(2 * n, 2 * n, |i, j| {
            let m = match (i < n, j < n) {
                (true, true) => a,
                (true, false) => b,
                (false, true) => c,
                (false, false) => d,
            };
            m[(i % n, j % n)]
        }))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Dense real vector.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl fmt::Debug for DenseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseVector{:?}", self.0)
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = NumericsError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        DenseVector::new(v)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

impl DenseVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, NumericsError> {
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { row: pos, col: 0 });
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub(crate) fn from_vec_unchecked(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        dot(&self.0, &other.0)
    }

    pub fn scale(&self, c: f64) -> DenseVector {
        DenseVector(self.0.iter().map(|v| v * c).collect())
    }

    pub fn add(&self, other: &DenseVector) -> DenseVector {
        debug_assert_eq!(self.dim(), other.dim());
        DenseVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &DenseVector) -> DenseVector {
        debug_assert_eq!(self.dim(), other.dim());
        DenseVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn distance_sq(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Element-wise mean of a non-empty list of equal-length vectors.
    pub fn mean_of(vectors: &[DenseVector]) -> DenseVector {
        let dim = vectors.first().map_or(0, DenseVector::dim);
        let mut acc = vec![0.0; dim];
        for v in vectors {
            for (a, x) in acc.iter_mut().zip(&v.0) {
                *a += x;
            }
        }
        let n = vectors.len().max(1) as f64;
        DenseVector(acc.into_iter().map(|a| a / n).collect())
    }

    pub fn sum_of(vectors: &[DenseVector]) -> DenseVector {
        let dim = vectors.first().map_or(0, DenseVector::dim);
        let mut acc = vec![0.0; dim];
        for v in vectors {
            for (a, x) in acc.iter_mut().zip(&v.0) {
                *a += x;
            }
        }
        DenseVector(acc)
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for DenseVector {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rejects_bad_shapes_and_nan() {
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0; 3]),
            Err(NumericsError::InvalidData {
                expected: 4,
                got: 3
            })
        ));
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0, f64::NAN, 0.0, 1.0]),
            Err(NumericsError::NonFinite { row: 0, col: 1 })
        ));
        assert!(DenseVector::new(vec![f64::INFINITY]).is_err());
        assert!(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn matmul_and_transpose_agree() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.as_slice(), &[4.0, 5.0, 10.0, 11.0]);
        let abt = a.matmul_transposed(&b.transpose()).unwrap();
        assert_eq!(ab, abt);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn centered_rows_have_zero_column_sums() {
        let m = DenseMatrix::from_rows(&[[1.0, 5.0], [3.0, -1.0], [2.0, 2.0]]).unwrap();
        let c = m.centered_rows();
        for s in c.column_sums() {
            assert!(s.abs() < 1e-15);
        }
        assert_eq!(m.row_mean().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn blocks_round_trip() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let z = DenseMatrix::zeros(2, 2);
        let i = DenseMatrix::identity(2);
        let big = DenseMatrix::from_blocks(&a, &z, &i, &a).unwrap();
        assert_eq!(big.block(0, 0, 2, 2), a);
        assert_eq!(big.block(2, 0, 2, 2), i);
        assert_eq!(big.block(2, 2, 2, 2), a);
    }

    #[test]
    fn serde_validates() {
        let m = DenseMatrix::identity(2);
        let json = serde_json::to_string(&m).unwrap();
        let back: DenseMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        let bad = r#"{"rows":2,"cols":2,"data":[1.0]}"#;
        assert!(serde_json::from_str::<DenseMatrix>(bad).is_err());
    }
}
