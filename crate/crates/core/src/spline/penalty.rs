//! Difference penalties on basis coefficients (P-splines).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The (d−order)×d "square root" of a difference penalty: row i holds the
/// order-th finite-difference stencil at offset i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRoot {
    matrix: DMatrix<f64>,
    order: usize,
}

impl PenaltyRoot {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// The d×d penalty matrix PᵀP.
    pub fn gram(&self) -> DMatrix<f64> {
        self.matrix.transpose() * &self.matrix
    }
}

/// Order-th difference matrix on d coefficients.
pub fn difference_penalty(dim: usize, order: usize) -> Result<PenaltyRoot> {
    if order < 1 {
        return Err(Error::Validation("penalty order must be at least 1".into()));
    }
    if dim <= order {
        return Err(Error::Validation(format!(
            "basis dimension {dim} must exceed penalty order {order}"
        )));
    }
    // j-th stencil coefficient of the order-th forward difference.
    let mut stencil = vec![0.0; order + 1];
    let mut binom = 1.0f64;
    for (j, slot) in stencil.iter_mut().enumerate() {
        let sign = if (order - j) % 2 == 0 { 1.0 } else { -1.0 };
        *slot = sign * binom;
        binom = binom * (order - j) as f64 / (j + 1) as f64;
    }
    let mut p = DMatrix::zeros(dim - order, dim);
    for i in 0..dim - order {
        for (j, &c) in stencil.iter().enumerate() {
            p[(i, i + j)] = c;
        }
    }
    Ok(PenaltyRoot { matrix: p, order })
}
