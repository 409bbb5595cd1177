//! Thin wrappers over the sparse and dense direct solvers.

use faer::linalg::solvers::{Solve, SolveCore};
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::{Mat, MatMut, Side};

use crate::error::{LodError, Result};
use crate::fem::SparseOperator;

/// A reusable sparse factorization: Cholesky for symmetric positive definite
/// operators, LU with partial pivoting otherwise.
pub enum SparseFactor {
    Cholesky(Llt<usize, f64>),
    Lu(Lu<usize, f64>),
}

impl SparseFactor {
    pub fn new(op: &SparseOperator) -> Result<Self> {
        if op.nrows() != op.ncols() {
            return Err(LodError::SolverFailure("matrix is not square".into()));
        }
        if op.is_symmetric() {
            if let Ok(llt) = op.csc().sp_cholesky(Side::Lower) {
                return Ok(Self::Cholesky(llt));
            }
        }
        op.csc()
            .sp_lu()
            .map(Self::Lu)
            .map_err(|e| LodError::SolverFailure(format!("sparse LU failed: {e:?}")))
    }

    pub fn solve_in_place(&self, rhs: MatMut<'_, f64>) {
        match self {
            Self::Cholesky(f) => f.solve_in_place_with_conj(faer::Conj::No, rhs),
            Self::Lu(f) => f.solve_in_place_with_conj(faer::Conj::No, rhs),
        }
    }

    /// Solves for several right-hand sides and rejects non-finite results.
    pub fn solve(&self, mut rhs: Mat<f64>) -> Result<Mat<f64>> {
        self.solve_in_place(rhs.as_mut());
        check_finite(&rhs)?;
        Ok(rhs)
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let x = self.solve(column(rhs))?;
        Ok(x.col(0).iter().copied().collect())
    }
}

pub fn column(values: &[f64]) -> Mat<f64> {
    Mat::from_fn(values.len(), 1, |i, _| values[i])
}

pub fn check_finite(m: &Mat<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        if m.col(j).iter().any(|v| !v.is_finite()) {
            return Err(LodError::SolverFailure("solution is not finite (singular system?)".into()));
        }
    }
    Ok(())
}

/// Dense solve with partial pivoting.
pub fn dense_solve(matrix: &Mat<f64>, rhs: Mat<f64>) -> Result<Mat<f64>> {
    if matrix.nrows() != matrix.ncols() || matrix.nrows() != rhs.nrows() {
        return Err(LodError::SolverFailure("dimension mismatch in dense solve".into()));
    }
    if matrix.nrows() == 0 {
        return Ok(rhs);
    }
    let lu = matrix.partial_piv_lu();
    let x = lu.solve(rhs);
    check_finite(&x)?;
    Ok(x)
}

/// Dense Cholesky solve, falling back to LU when the matrix is not SPD.
pub fn dense_spd_solve(matrix: &Mat<f64>, rhs: Mat<f64>) -> Result<Mat<f64>> {
    if matrix.nrows() == 0 {
        return Ok(rhs);
    }
    match matrix.llt(Side::Lower) {
        Ok(llt) => {
            let x = llt.solve(rhs);
            check_finite(&x)?;
            Ok(x)
        }
        Err(_) => dense_solve(matrix, rhs),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
