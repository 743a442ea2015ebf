//! The identifiable parametrization of reduction bases: p×q matrices with
//! orthonormal columns and a positive first nonzero entry per column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries smaller than this are treated as zero when locating the first
/// nonzero entry of a unit-norm column.
const SIGN_TOL: f64 = 1e-9;

const ORTHO_TOL: f64 = 1e-10;

/// A p×q basis with orthonormal columns, sign-normalized so the first
/// nonzero entry of each column is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionBasis {
    b: DMatrix<f64>,
}

impl ReductionBasis {
    /// Wraps a matrix that is already orthonormal (checked to 1e-10),
    /// applying the sign convention.
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if b.ncols() == 0 || b.nrows() < b.ncols() {
            return Err(Error::Validation(format!(
                "reduction basis must be p×q with 1 <= q <= p, got {}×{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let gram = b.transpose() * &b;
        let eye = DMatrix::<f64>::identity(b.ncols(), b.ncols());
        let dev = (&gram - &eye).abs().max();
        if dev > ORTHO_TOL {
            return Err(Error::Validation(format!(
                "columns are not orthonormal (max deviation {dev:.3e})"
            )));
        }
        Ok(Self { b: sign_normalize(b) })
    }

    /// Orthonormalizes an arbitrary full-column-rank matrix (thin QR) and
    /// applies the sign convention. The column span is preserved.
    pub fn from_unnormalized(b: DMatrix<f64>) -> Result<Self> {
        if b.ncols() == 0 || b.nrows() < b.ncols() {
            return Err(Error::Validation(format!(
                "reduction basis must be p×q with 1 <= q <= p, got {}×{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let qr = b.clone().qr();
        let q = qr.q();
        let r = qr.r();
        for j in 0..r.ncols() {
            if r[(j, j)].abs() < 1e-12 {
                return Err(Error::Numerical(
                    "rank-deficient basis cannot be orthonormalized".into(),
                ));
            }
        }
        Ok(Self { b: sign_normalize(q) })
    }

    /// q=1 basis from an arbitrary nonzero vector.
    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        let n = v.norm();
        if n < 1e-12 || !n.is_finite() {
            return Err(Error::Numerical(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        let b = DMatrix::from_column_slice(v.len(), 1, (v / n).as_slice());
        Ok(Self { b: sign_normalize(b) })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Number of covariates p.
    pub fn nrows(&self) -> usize {
        self.b.nrows()
    }

    /// Structural dimension q.
    pub fn dim(&self) -> usize {
        self.b.ncols()
    }

    /// The single column as a vector (q=1 convenience).
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.b.column(0).as_slice())
    }

    /// Index values X·B, one row per observation.
    pub fn indices(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.b
    }

    /// Index values for a single covariate vector: Bᵀx.
    pub fn index_of(&self, x: &DVector<f64>) -> DVector<f64> {
        self.b.transpose() * x
    }
}

/// Flips column signs so the first entry with |v| > 1e-9 is positive.
pub fn sign_normalize(mut b: DMatrix<f64>) -> DMatrix<f64> {
    for j in 0..b.ncols() {
        let mut flip = false;
        for i in 0..b.nrows() {
            let v = b[(i, j)];
            if v.abs() > SIGN_TOL {
                flip = v < 0.0;
                break;
            }
        }
        if flip {
            for i in 0..b.nrows() {
                b[(i, j)] = -b[(i, j)];
            }
        }
    }
    b
}
