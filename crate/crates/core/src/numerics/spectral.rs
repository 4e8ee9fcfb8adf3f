use super::{DenseMatrix, NumericsError};

/// Iteration cap for the deflated power method.
pub const POWER_ITERATION_CAP: usize = 500_000;

/// Second largest singular value of a doubly stochastic matrix.
///
/// For doubly stochastic `M` the pair (1, 𝟙/√N) is a singular pair, and its
/// orthogonal complement is invariant under `MᵀM`. Power iteration on `MᵀM`
/// restricted to 𝟙⊥ therefore converges to σ₂². For matrices that are not
/// doubly stochastic the result is the largest singular value of `M` on 𝟙⊥,
/// which is not σ₂ in general.
///
/// Returns 0 for `N ≤ 1`.
pub fn second_singular_value(m: &DenseMatrix, tol: f64) -> Result<f64, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let n = m.rows();
    if n <= 1 {
        return Ok(0.0);
    }

    // Deterministic, generic starting direction.
    let mut v: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.754_877_666_246_692_8).fract() - 0.5 + 1e-3 * i as f64)
        .collect();
    project_out_ones(&mut v);
    if !normalize(&mut v) {
        v = (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        project_out_ones(&mut v);
        normalize(&mut v);
    }

    let mut mv = vec![0.0; n];
    let mut w = vec![0.0; n];
    for _ in 0..POWER_ITERATION_CAP {
        m.mul_slice_into(&v, &mut mv);
        // w = Mᵀ (M v)
        w.iter_mut().for_each(|x| *x = 0.0);
        for (i, &s) in mv.iter().enumerate() {
            for (wj, &mij) in w.iter_mut().zip(m.row(i)) {
                *wj += mij * s;
            }
        }
        project_out_ones(&mut w);
        let lambda = super::matrix::dot(&v, &w);
        let w_norm = super::matrix::dot(&w, &w).sqrt();
        if w_norm <= f64::MIN_POSITIVE.sqrt() {
            return Ok(0.0);
        }
        let resid = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        // |σ − σ̂| ≈ |λ − λ̂| / (2σ), and |λ − λ̂| ≤ resid.
        let sigma = lambda.max(0.0).sqrt();
        if resid <= 0.25 * tol * sigma || lambda <= tol * tol * 1e-2 {
            return Ok(sigma);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / w_norm;
        }
    }
    Err(NumericsError::NoConvergence {
        iterations: POWER_ITERATION_CAP,
    })
}

fn project_out_ones(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= f64::MIN_POSITIVE {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    m.frobenius_norm()
}

/// Column sums of `xhat` above this magnitude violate the zero-mean precondition.
pub const ZERO_MEAN_TOL: f64 = 1e-8;

/// Checks `‖W X̂‖_F ≤ σ ‖X̂‖_F + 1e−9` for a zero-column-sum `X̂`.
pub fn spectral_norm_bound_check(
    w: &DenseMatrix,
    xhat: &DenseMatrix,
    sigma: f64,
) -> Result<bool, NumericsError> {
    if let Some((col, sum)) = xhat
        .column_sums()
        .into_iter()
        .enumerate()
        .find(|(_, s)| s.abs() > ZERO_MEAN_TOL)
    {
        return Err(NumericsError::Precondition(format!(
            "column {col} of X̂ sums to {sum:e}, expected zero"
        )));
    }
    let wx = w.matmul(xhat)?;
    Ok(wx.frobenius_norm() <= sigma * xhat.frobenius_norm() + 1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring4_metropolis() -> DenseMatrix {
        let t = 1.0 / 3.0;
        DenseMatrix::from_rows(&[
            [t, t, 0.0, t],
            [t, t, t, 0.0],
            [0.0, t, t, t],
            [t, 0.0, t, t],
        ])
        .unwrap()
    }

    #[test]
    fn complete_averaging_has_zero_sigma2() {
        let m = DenseMatrix::from_fn(5, 5, |_, _| 0.2);
        assert!(second_singular_value(&m, 1e-12).unwrap() < 1e-12);
    }

    #[test]
    fn identity_has_unit_sigma2() {
        let s = second_singular_value(&DenseMatrix::identity(4), 1e-12).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ring4_metropolis_sigma2_is_one_third() {
        let s = second_singular_value(&ring4_metropolis(), 1e-12).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-10, "{s}");
    }

    #[test]
    fn rejects_non_square() {
        assert!(second_singular_value(&DenseMatrix::zeros(2, 3), 1e-9).is_err());
    }

    #[test]
    fn bound_check_examples() {
        let w = ring4_metropolis();
        assert!(spectral_norm_bound_check(&w, &DenseMatrix::zeros(4, 2), 1.0 / 3.0).unwrap());
        let avg = DenseMatrix::from_fn(4, 4, |_, _| 0.25);
        let xhat =
            DenseMatrix::from_rows(&[[1.0, 2.0], [-1.0, 0.0], [3.0, -1.0], [-3.0, -1.0]]).unwrap();
        assert!(spectral_norm_bound_check(&avg, &xhat, 0.0).unwrap());
        assert_eq!(avg.matmul(&xhat).unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn bound_check_precondition() {
        let w = ring4_metropolis();
        let bad = DenseMatrix::from_fn(4, 1, |_, _| 1.0);
        assert!(matches!(
            spectral_norm_bound_check(&w, &bad, 0.5),
            Err(NumericsError::Precondition(_))
        ));
    }
}
