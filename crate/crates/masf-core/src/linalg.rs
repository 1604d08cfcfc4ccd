//! Small operator algebra used by processes, kernels and filters.
//!
//! Measurement operators and everything derived from them (interpolated
//! operators, drifts, transition kernels) are either diagonal or dense.
//! Keeping the two cases in one enum lets the common identity / grid-mask
//! configurations run in O(d) per step while dense operators take the
//! factorization path.

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{check_dim, Error, Result};

/// Condition-number limit above which a solve is reported as singular.
pub const COND_LIMIT: f64 = 1e12;
/// Jitter added to a covariance whose smallest eigenvalue is below this floor.
pub const JITTER: f64 = 1e-12;
/// Eigenvalues below `-NEG_EIG_TOL` mean a matrix is structurally not PSD;
/// anything in `[-NEG_EIG_TOL, 0)` is treated as roundoff and clamped to zero.
pub const NEG_EIG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum OpMatrix {
    /// Diagonal matrix stored as its diagonal.
    Diag(DVector<f64>),
    /// General dense matrix.
    Dense(DMatrix<f64>),
}

impl OpMatrix {
    pub fn identity(dim: usize) -> Self {
        OpMatrix::Diag(DVector::from_element(dim, 1.0))
    }

    pub fn from_diag(diag: DVector<f64>) -> Self {
        OpMatrix::Diag(diag)
    }

    pub fn from_dense(m: DMatrix<f64>) -> Result<Self> {
        check_dim(m.nrows(), m.ncols())?;
        Ok(OpMatrix::Dense(m))
    }

    pub fn dim(&self) -> usize {
        match self {
            OpMatrix::Diag(d) => d.len(),
            OpMatrix::Dense(m) => m.nrows(),
        }
    }

    pub fn is_diag(&self) -> bool {
        matches!(self, OpMatrix::Diag(_))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            OpMatrix::Diag(d) => DMatrix::from_diagonal(d),
            OpMatrix::Dense(m) => m.clone(),
        }
    }

    pub fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(match self {
            OpMatrix::Diag(d) => d.component_mul(v),
            OpMatrix::Dense(m) => m * v,
        })
    }

    pub fn tr_matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(match self {
            OpMatrix::Diag(d) => d.component_mul(v),
            OpMatrix::Dense(m) => m.transpose() * v,
        })
    }

    /// `self * other`, staying diagonal when both factors are.
    pub fn mul(&self, other: &OpMatrix) -> Result<OpMatrix> {
        check_dim(self.dim(), other.dim())?;
        Ok(match (self, other) {
            (OpMatrix::Diag(a), OpMatrix::Diag(b)) => OpMatrix::Diag(a.component_mul(b)),
            _ => OpMatrix::Dense(self.to_dense() * other.to_dense()),
        })
    }

    pub fn add(&self, other: &OpMatrix) -> Result<OpMatrix> {
        check_dim(self.dim(), other.dim())?;
        Ok(match (self, other) {
            (OpMatrix::Diag(a), OpMatrix::Diag(b)) => OpMatrix::Diag(a + b),
            _ => OpMatrix::Dense(self.to_dense() + other.to_dense()),
        })
    }

    pub fn sub(&self, other: &OpMatrix) -> Result<OpMatrix> {
        check_dim(self.dim(), other.dim())?;
        Ok(match (self, other) {
            (OpMatrix::Diag(a), OpMatrix::Diag(b)) => OpMatrix::Diag(a - b),
            _ => OpMatrix::Dense(self.to_dense() - other.to_dense()),
        })
    }

    pub fn scale(&self, c: f64) -> OpMatrix {
        match self {
            OpMatrix::Diag(d) => OpMatrix::Diag(d * c),
            OpMatrix::Dense(m) => OpMatrix::Dense(m * c),
        }
    }

    pub fn transpose(&self) -> OpMatrix {
        match self {
            OpMatrix::Diag(d) => OpMatrix::Diag(d.clone()),
            OpMatrix::Dense(m) => OpMatrix::Dense(m.transpose()),
        }
    }

    /// `self * m * self^T` for symmetric sandwich products (kernel covariances).
    pub fn sandwich(&self, inner: &OpMatrix) -> Result<OpMatrix> {
        check_dim(self.dim(), inner.dim())?;
        Ok(match (self, inner) {
            (OpMatrix::Diag(a), OpMatrix::Diag(b)) => {
                OpMatrix::Diag(a.component_mul(b).component_mul(a))
            }
            _ => {
                let a = self.to_dense();
                OpMatrix::Dense(&a * inner.to_dense() * a.transpose())
            }
        })
    }

    /// Condition-number estimate (ratio of extreme singular values).
    pub fn condition(&self) -> f64 {
        match self {
            OpMatrix::Diag(d) => {
                let max = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let min = d.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
                if min == 0.0 {
                    f64::INFINITY
                } else {
                    max / min
                }
            }
            OpMatrix::Dense(m) => {
                let sv = m.clone().svd(false, false).singular_values;
                let max = sv.iter().fold(0.0f64, |m, x| m.max(*x));
                let min = sv.iter().fold(f64::INFINITY, |m, x| m.min(*x));
                if min == 0.0 {
                    f64::INFINITY
                } else {
                    max / min
                }
            }
        }
    }

    /// Solve `self * x = v`, failing when the condition estimate exceeds
    /// [`COND_LIMIT`].
    pub fn solve_vec(&self, v: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
        check_dim(self.dim(), v.len())?;
        if self.condition() > COND_LIMIT {
            return Err(Error::Singular(format!(
                "{what}: condition estimate exceeds {COND_LIMIT:.0e}"
            )));
        }
        match self {
            OpMatrix::Diag(d) => Ok(v.component_div(d)),
            OpMatrix::Dense(m) => m
                .clone()
                .lu()
                .solve(v)
                .ok_or_else(|| Error::Singular(format!("{what}: LU solve failed"))),
        }
    }

    /// Solve `self * X = b` column-wise, with the same condition guard as
    /// [`solve_vec`](Self::solve_vec).
    pub fn solve_mat(&self, b: &OpMatrix, what: &str) -> Result<OpMatrix> {
        check_dim(self.dim(), b.dim())?;
        if self.condition() > COND_LIMIT {
            return Err(Error::Singular(format!(
                "{what}: condition estimate exceeds {COND_LIMIT:.0e}"
            )));
        }
        match (self, b) {
            (OpMatrix::Diag(d), OpMatrix::Diag(rhs)) => {
                Ok(OpMatrix::Diag(rhs.component_div(d)))
            }
            _ => {
                let lu = self.to_dense().lu();
                let x = lu
                    .solve(&b.to_dense())
                    .ok_or_else(|| Error::Singular(format!("{what}: LU solve failed")))?;
                Ok(OpMatrix::Dense(x))
            }
        }
    }

    /// Smallest eigenvalue of the symmetrized matrix.
    pub fn min_sym_eigenvalue(&self) -> f64 {
        match self {
            OpMatrix::Diag(d) => d.iter().fold(f64::INFINITY, |m, x| m.min(*x)),
            OpMatrix::Dense(m) => {
                let sym = (m + m.transpose()) * 0.5;
                let eig = sym.symmetric_eigen();
                eig.eigenvalues.iter().fold(f64::INFINITY, |m, x| m.min(*x))
            }
        }
    }

    /// Symmetrizes and clamps roundoff-negative eigenvalues to zero.
    /// Eigenvalues below `-NEG_EIG_TOL` are a genuine PSD violation.
    pub fn psd_clamp(&self, what: &str) -> Result<OpMatrix> {
        match self {
            OpMatrix::Diag(d) => {
                let mut out = d.clone();
                for x in out.iter_mut() {
                    if *x < -NEG_EIG_TOL {
                        return Err(Error::NotPsd(format!("{what}: eigenvalue {x:.3e}")));
                    }
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
                Ok(OpMatrix::Diag(out))
            }
            OpMatrix::Dense(m) => {
                let sym = (m + m.transpose()) * 0.5;
                let mut eig = sym.symmetric_eigen();
                for x in eig.eigenvalues.iter_mut() {
                    if *x < -NEG_EIG_TOL {
                        return Err(Error::NotPsd(format!("{what}: eigenvalue {x:.3e}")));
                    }
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
                Ok(OpMatrix::Dense(eig.recompose()))
            }
        }
    }

    /// Symmetric PSD square root (errors on genuinely negative eigenvalues).
    pub fn sqrt_psd(&self, what: &str) -> Result<OpMatrix> {
        match self.psd_clamp(what)? {
            OpMatrix::Diag(d) => Ok(OpMatrix::Diag(d.map(f64::sqrt))),
            OpMatrix::Dense(m) => {
                let mut eig = m.symmetric_eigen();
                for x in eig.eigenvalues.iter_mut() {
                    // clamp again: recompose can reintroduce tiny negatives
                    *x = x.max(0.0).sqrt();
                }
                Ok(OpMatrix::Dense(eig.recompose()))
            }
        }
    }

    /// Row-major JSON representation (debug artifacts).
    pub fn to_json(&self) -> serde_json::Value {
        let d = self.dim();
        let dense = self.to_dense();
        let mut data = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                data.push(dense[(i, j)]);
            }
        }
        json!({ "rows": d, "cols": d, "data": data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dense(rows: &[&[f64]]) -> OpMatrix {
        let r = rows.len();
        let c = rows[0].len();
        OpMatrix::from_dense(DMatrix::from_fn(r, c, |i, j| rows[i][j])).unwrap()
    }

    #[test]
    fn diag_matvec_and_solve_roundtrip() {
        let a = OpMatrix::from_diag(DVector::from_vec(vec![2.0, 0.5, 4.0]));
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let av = a.matvec(&v).unwrap();
        assert_eq!(av, DVector::from_vec(vec![2.0, 1.0, 12.0]));
        let back = a.solve_vec(&av, "test").unwrap();
        assert_relative_eq!(back, v, epsilon = 1e-14);
    }

    #[test]
    fn dense_solve_matches_diag_for_diagonal_input() {
        let d = OpMatrix::from_diag(DVector::from_vec(vec![3.0, 7.0]));
        let m = OpMatrix::Dense(d.to_dense());
        let v = DVector::from_vec(vec![6.0, 14.0]);
        let xd = d.solve_vec(&v, "diag").unwrap();
        let xm = m.solve_vec(&v, "dense").unwrap();
        assert_relative_eq!(xd, xm, epsilon = 1e-12);
    }

    #[test]
    fn singular_solve_is_an_error() {
        let a = OpMatrix::from_diag(DVector::from_vec(vec![1.0, 0.0]));
        let v = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            a.solve_vec(&v, "test"),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn sandwich_matches_dense_product() {
        let a = dense(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let s = dense(&[&[2.0, 0.3], &[0.3, 1.0]]);
        let got = a.sandwich(&s).unwrap().to_dense();
        let want = a.to_dense() * s.to_dense() * a.to_dense().transpose();
        assert_relative_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let s = dense(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let r = s.sqrt_psd("test").unwrap().to_dense();
        assert_relative_eq!(&r * &r, s.to_dense(), epsilon = 1e-12);
    }

    #[test]
    fn psd_clamp_zeroes_roundoff_but_rejects_structure() {
        let tiny = OpMatrix::from_diag(DVector::from_vec(vec![1.0, -1e-12]));
        let clamped = tiny.psd_clamp("test").unwrap();
        assert_eq!(clamped.min_sym_eigenvalue(), 0.0);

        let bad = OpMatrix::from_diag(DVector::from_vec(vec![1.0, -1e-6]));
        assert!(matches!(bad.psd_clamp("test"), Err(Error::NotPsd(_))));
    }

    #[test]
    fn condition_of_identity_is_one() {
        assert_eq!(OpMatrix::identity(5).condition(), 1.0);
        let m = dense(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_relative_eq!(m.condition(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn json_is_row_major() {
        let m = dense(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let j = m.to_json();
        assert_eq!(j["rows"], 2);
        let data: Vec<f64> = j["data"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
