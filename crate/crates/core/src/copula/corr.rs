use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Tolerance on the smallest eigenvalue when checking semi-definiteness.
pub const PSD_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;

/// Validated correlation matrix: symmetric, unit diagonal, positive
/// semi-definite.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix(DMatrix<f64>);

impl CorrMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square_symmetric(&m)?;
        for i in 0..m.nrows() {
            if (m[(i, i)] - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::domain(format!("diagonal entry {i} is {} not 1", m[(i, i)])));
            }
            for j in 0..i {
                if m[(i, j)].abs() > 1.0 + SYMMETRY_TOL {
                    return Err(Error::domain(format!("entry ({i},{j}) = {} outside [-1,1]", m[(i, j)])));
                }
            }
        }
        check_psd(&m)?;
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn select(&self, idx: &[usize]) -> CorrMatrix {
        CorrMatrix(select(&self.0, idx))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.0)
    }
}

/// Association matrix; its diagonal may differ from one (e.g. variances of
/// temporally filtered scores). `correlation` normalizes it.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocMatrix(DMatrix<f64>);

impl AssocMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square_symmetric(&m)?;
        for i in 0..m.nrows() {
            if !(m[(i, i)] > 0.0) {
                return Err(Error::domain(format!("diagonal entry {i} = {} must be positive", m[(i, i)])));
            }
        }
        check_psd(&m)?;
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `diag(S)^{-1/2} S diag(S)^{-1/2}`.
    pub fn correlation(&self) -> CorrMatrix {
        let d = self.dim();
        let sd: Vec<f64> = (0..d).map(|i| self.0[(i, i)].sqrt()).collect();
        let mut r = DMatrix::from_fn(d, d, |i, j| self.0[(i, j)] / (sd[i] * sd[j]));
        for i in 0..d {
            r[(i, i)] = 1.0;
        }
        CorrMatrix(r)
    }
}

impl From<CorrMatrix> for AssocMatrix {
    fn from(r: CorrMatrix) -> Self {
        AssocMatrix(r.0)
    }
}

pub(crate) fn select(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn check_square_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::domain(format!("matrix is {}x{}, not square", m.nrows(), m.ncols())));
    }
    for i in 0..m.nrows() {
        for j in 0..i {
            if !m[(i, j)].is_finite() || (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::domain(format!("matrix not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let ev = min_eigenvalue(m);
    if ev < -PSD_TOL {
        return Err(Error::NotPsd(format!("smallest eigenvalue {ev:e}")));
    }
    Ok(())
}
