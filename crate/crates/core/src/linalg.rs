//! Dense real linear algebra helpers on top of `faer`.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::solvers::Solve;
use faer::{Accum, Col, Mat, MatRef, Par, Side};

use crate::{Error, Result};

/// `B^T B` as a full symmetric matrix (only the lower half is computed).
pub fn gram(b: MatRef<'_, f64>) -> Mat<f64> {
    let n = b.ncols();
    let mut a = Mat::<f64>::zeros(n, n);
    triangular::matmul(
        a.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        b.transpose(),
        BlockStructure::Rectangular,
        b,
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
    mirror_lower(&mut a);
    a
}

/// `acc += B^T B` on the lower half; call [`mirror_lower`] afterwards.
pub fn gram_accumulate_lower(acc: &mut Mat<f64>, b: MatRef<'_, f64>) {
    triangular::matmul(
        acc.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Add,
        b.transpose(),
        BlockStructure::Rectangular,
        b,
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
}

/// `B B^T` as a full symmetric matrix.
pub fn outer_gram(b: MatRef<'_, f64>) -> Mat<f64> {
    gram(b.transpose())
}

pub fn mirror_lower(a: &mut Mat<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in j + 1..n {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// `B^T v`.
pub fn t_mul_vec(b: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    assert_eq!(b.nrows(), v.len());
    (0..b.ncols())
        .map(|j| {
            let col = b.col(j);
            let mut s = 0.0;
            for i in 0..v.len() {
                s += col[i] * v[i];
            }
            s
        })
        .collect()
}

/// `B v`.
pub fn mul_vec(b: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    assert_eq!(b.ncols(), v.len());
    let mut out = vec![0.0; b.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let col = b.col(j);
        for (i, o) in out.iter_mut().enumerate() {
            *o += col[i] * vj;
        }
    }
    out
}

pub fn all_finite(a: MatRef<'_, f64>) -> bool {
    (0..a.ncols()).all(|j| (0..a.nrows()).all(|i| a[(i, j)].is_finite()))
}

/// Cholesky solve; `None` when the matrix is not numerically positive definite.
/// Also returns the smallest squared pivot.
pub fn cholesky_solve(a: &Mat<f64>, rhs: &[f64]) -> Option<(Vec<f64>, f64)> {
    let llt = a.llt(Side::Lower).ok()?;
    let l = llt.L();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    let mut x = Col::<f64>::from_fn(rhs.len(), |i| rhs[i]);
    llt.solve_in_place(x.as_mat_mut());
    let out: Vec<f64> = (0..rhs.len()).map(|i| x[i]).collect();
    if out.iter().all(|v| v.is_finite()) {
        Some((out, min_pivot))
    } else {
        None
    }
}

/// Eigendecomposition pseudo-inverse dropping eigenvalues below `cutoff * λ_max`.
/// Returns the solution and the smallest eigenvalue.
pub fn pseudo_inverse_solve(a: &Mat<f64>, rhs: &[f64], cutoff: f64) -> Result<(Vec<f64>, f64)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Solver(format!("eigendecomposition failed: {e:?}")))?;
    let (u, s) = (evd.U(), evd.S());
    let n = a.nrows();
    let lmax = (0..n).map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max);
    let lmin = (0..n).map(|i| s[i]).fold(f64::INFINITY, f64::min);
    let mut x = vec![0.0; n];
    if lmax > 0.0 {
        let thresh = cutoff * lmax;
        for k in 0..n {
            let lam = s[k];
            if lam < thresh || lam <= 0.0 {
                continue;
            }
            let col = u.col(k);
            let proj: f64 = (0..n).map(|i| col[i] * rhs[i]).sum::<f64>() / lam;
            for i in 0..n {
                x[i] += proj * col[i];
            }
        }
    }
    Ok((x, lmin))
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(a: &Mat<f64>) -> Result<Vec<f64>> {
    a.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Solver(format!("eigenvalues failed: {e:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_matches_naive() {
        let b = Mat::<f64>::from_fn(7, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 - 2.5);
        let g = gram(b.as_ref());
        for r in 0..4 {
            for c in 0..4 {
                let v: f64 = (0..7).map(|k| b[(k, r)] * b[(k, c)]).sum();
                assert!((g[(r, c)] - v).abs() < 1e-12);
            }
        }
        let o = outer_gram(b.as_ref());
        assert_eq!(o.nrows(), 7);
        assert!((o[(2, 5)] - (0..4).map(|k| b[(2, k)] * b[(5, k)]).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_fails_on_singular_and_pinv_drops_null_direction() {
        let mut a = Mat::<f64>::zeros(2, 2);
        a[(0, 0)] = 1.0;
        assert!(cholesky_solve(&a, &[1.0, 1.0]).is_none());
        let (x, lmin) = pseudo_inverse_solve(&a, &[1.0, 1.0], 1e-8).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && x[1].abs() < 1e-15);
        assert_eq!(lmin, 0.0);
    }
}
