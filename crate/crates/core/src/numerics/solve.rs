use super::{DenseMatrix, DenseVector, NumericsError};

/// Relative pivot threshold: a pivot below `PIVOT_RTOL * max|A|` is singular.
pub const PIVOT_RTOL: f64 = 1e-12;

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector, NumericsError> {
    let rhs = DenseMatrix::new(b.dim(), 1, b.as_slice().to_vec())?;
    let x = solve_many(a, &rhs)?;
    Ok(DenseVector::from_vec_unchecked(x.into_vec()))
}

/// Solves `A X = B` for every column of `B`.
pub fn solve_many(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if b.rows() != n {
        return Err(NumericsError::DimensionMismatch {
            op: "solve",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let m = b.cols();
    let threshold = PIVOT_RTOL * a.max_abs();
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let (pivot_row, pivot_abs) =
            (col..n)
                .map(|r| (r, lu[(r, col)].abs()))
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if pivot_abs <= threshold || pivot_abs == 0.0 {
            return Err(NumericsError::Singular { pivot: col });
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(pivot_row, j)];
                lu[(pivot_row, j)] = tmp;
            }
            for j in 0..m {
                let tmp = x[(col, j)];
                x[(col, j)] = x[(pivot_row, j)];
                x[(pivot_row, j)] = tmp;
            }
        }
        let pivot = lu[(col, col)];
        for r in col + 1..n {
            let factor = lu[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            lu[(r, col)] = 0.0;
            for j in col + 1..n {
                lu[(r, j)] -= factor * lu[(col, j)];
            }
            for j in 0..m {
                x[(r, j)] -= factor * x[(col, j)];
            }
        }
    }

    for col in (0..n).rev() {
        let pivot = lu[(col, col)];
        for j in 0..m {
            let mut acc = x[(col, j)];
            for k in col + 1..n {
                acc -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = acc / pivot;
        }
    }
    Ok(x)
}

/// Inverse via `solve_many` against the identity.
pub fn inverse(a: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    solve_many(a, &DenseMatrix::identity(a.rows()))
}
