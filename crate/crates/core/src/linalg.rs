//! Small dense linear algebra helpers shared by the estimators.
//!
//! All systems here are tiny (dimension below ~50), so condition numbers are
//! computed exactly from eigenvalues or singular values rather than estimated.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{GmmError, Result};

/// Matrices with a 2-norm condition number above this are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Condition number of a symmetric matrix, `|λ|max / |λ|min`; infinite when
/// the matrix is not positive definite.
pub fn spd_condition(a: &DMatrix<f64>) -> f64 {
    let eig = a.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min.is_nan() || min <= 0.0 || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// 2-norm condition number of a general square matrix.
pub fn condition(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Cholesky factorisation of a symmetric positive definite matrix, with
/// solves refined by one step of iterative refinement.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    condition: f64,
}

impl SpdFactor {
    /// Factor `a`, calling `on_fail` with the condition number when `a` is not
    /// numerically positive definite.
    pub fn new(a: DMatrix<f64>, on_fail: impl Fn(f64) -> GmmError) -> Result<Self> {
        if !a.is_square() {
            return Err(GmmError::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(on_fail(f64::INFINITY));
        }
        let a = symmetrize(&a);
        let condition = spd_condition(&a);
        if condition > CONDITION_LIMIT {
            return Err(on_fail(condition));
        }
        let chol = Cholesky::new(a.clone()).ok_or_else(|| on_fail(condition))?;
        Ok(Self {
            matrix: a,
            chol,
            condition,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.chol.solve(b);
        let r = b - &self.matrix * &x;
        x += self.chol.solve(&r);
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = self.chol.solve(b);
        let r = b - &self.matrix * &x;
        x += self.chol.solve(&r);
        x
    }

    /// `A⁻¹`, obtained by solving against the identity.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_mat(&DMatrix::identity(self.dim(), self.dim()))
    }
}

/// LU factorisation of a general square matrix with a condition guard.
#[derive(Debug, Clone)]
pub struct LuFactor {
    matrix: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    condition: f64,
}

impl LuFactor {
    pub fn new(a: DMatrix<f64>, on_fail: impl Fn(f64) -> GmmError) -> Result<Self> {
        if !a.is_square() {
            return Err(GmmError::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(on_fail(f64::INFINITY));
        }
        let condition = condition(&a);
        if condition > CONDITION_LIMIT {
            return Err(on_fail(condition));
        }
        let lu = LU::new(a.clone());
        Ok(Self {
            matrix: a,
            lu,
            condition,
        })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        // Guarded by the condition check in `new`, so the solve cannot fail.
        let mut x = self
            .lu
            .solve(b)
            .expect("LU solve on a well-conditioned matrix");
        let r = b - &self.matrix * &x;
        if let Some(dx) = self.lu.solve(&r) {
            x += dx;
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.matrix.nrows();
        self.solve_mat(&DMatrix::identity(n, n))
    }
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute elementwise difference relative to the largest absolute
/// entry of `b` (with a floor of one ulp-scale to avoid division by zero).
pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
