//! Symmetric-definite generalized eigenproblem `A v = μ B v`, reduced to a
//! standard symmetric problem through the Cholesky factor of `B`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use crate::error::{HfdError, Result};

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Unit eigenvector of the largest generalized eigenvalue of `(a, b)`, with
/// `b` symmetric positive definite.
///
/// Among (numerically) tied eigenvectors the one whose absolute-value
/// pattern is lexicographically largest wins; the sign makes the
/// largest-magnitude entry positive.
pub(crate) fn top_generalized_eigenvector(a: &Array2<f64>, b: &Array2<f64>) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(HfdError::DimensionMismatch {
            expected: n,
            got: b.nrows(),
        });
    }
    let a = to_dmatrix(a);
    let b = to_dmatrix(b);
    let chol = b
        .cholesky()
        .ok_or_else(|| HfdError::NumericalFailure("metric matrix is not positive definite".into()))?;
    let l = chol.l();
    let solve_failed = || HfdError::NumericalFailure("triangular solve failed".into());
    // L⁻¹ A L⁻ᵀ, using the symmetry of A for the second solve
    let half = l.solve_lower_triangular(&a).ok_or_else(solve_failed)?;
    let reduced = l
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(solve_failed)?;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    if reduced.iter().any(|v| !v.is_finite()) {
        return Err(HfdError::NumericalFailure("non-finite reduced matrix".into()));
    }
    let eig = SymmetricEigen::try_new(reduced, 1e-14, 10_000)
        .ok_or_else(|| HfdError::NumericalFailure("symmetric eigensolve did not converge".into()))?;

    let top = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale.max(f64::MIN_POSITIVE);
    let mut best: Option<Vec<f64>> = None;
    for (k, &mu) in eig.eigenvalues.iter().enumerate() {
        if top - mu > tol {
            continue;
        }
        let u: DVector<f64> = eig.eigenvectors.column(k).into_owned();
        let v = l.tr_solve_lower_triangular(&u).ok_or_else(solve_failed)?;
        let len = v.norm();
        if !(len.is_finite() && len > 0.0) {
            continue;
        }
        let v: Vec<f64> = v.iter().map(|x| x / len).collect();
        let wins = match &best {
            None => true,
            Some(cur) => abs_pattern_greater(&v, cur),
        };
        if wins {
            best = Some(v);
        }
    }
    let mut v = best.ok_or_else(|| HfdError::NumericalFailure("no finite eigenvector".into()))?;
    fix_sign(&mut v);
    Ok(v)
}

fn abs_pattern_greater(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.abs(), y.abs());
        if x > y {
            return true;
        }
        if x < y {
            return false;
        }
    }
    false
}

/// Flips `v` so that its largest-magnitude entry (first on ties) is positive.
pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v.get(idx).is_some_and(|&x| x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}
