//! Linear-constraint absorption: orthonormal bases for constraint null spaces,
//! found by deterministic Gram–Schmidt completion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// m×(m−r) matrix Z with orthonormal columns spanning the null space of an
/// r×m constraint matrix C, so θ = Zθ̃ satisfies Cθ = 0 for any θ̃.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintNullBasis {
    z: DMatrix<f64>,
}

impl ConstraintNullBasis {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn ambient_dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn null_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Expands unconstrained coordinates to the full coefficient vector.
    pub fn expand(&self, reduced: &DVector<f64>) -> DVector<f64> {
        &self.z * reduced
    }
}

/// Orthonormal null-space basis of a full-row-rank constraint matrix.
/// Deterministic: constraint rows are orthonormalized in order, then the
/// standard basis vectors e_0, e_1, ... complete the frame in index order.
pub fn null_space_basis(c: &DMatrix<f64>) -> Result<ConstraintNullBasis> {
    let (r, m) = (c.nrows(), c.ncols());
    if r == 0 || m == 0 {
        return Err(Error::Validation("empty constraint matrix".into()));
    }
    if r > m {
        return Err(Error::Validation(format!(
            "more constraints ({r}) than coefficients ({m})"
        )));
    }
    let mut frame: Vec<DVector<f64>> = Vec::with_capacity(m);
    for i in 0..r {
        let row = DVector::from_iterator(m, c.row(i).iter().copied());
        let scale = row.norm().max(1.0);
        let v = orthogonalize(&frame, row);
        if v.norm() < 1e-10 * scale {
            return Err(Error::Validation(format!(
                "rank-deficient constraint matrix: detected rank {} of {r}",
                frame.len()
            )));
        }
        let n = v.norm();
        frame.push(v / n);
    }
    if frame.len() == m {
        return Err(Error::Validation(
            "constraint null space is empty (as many independent constraints as coefficients)"
                .into(),
        ));
    }
    for j in 0..m {
        if frame.len() == m {
            break;
        }
        let mut e = DVector::zeros(m);
        e[j] = 1.0;
        let v = orthogonalize(&frame, e);
        let n = v.norm();
        if n > 1e-8 {
            frame.push(v / n);
        }
    }
    if frame.len() != m {
        return Err(Error::Numerical(
            "failed to complete the null-space basis".into(),
        ));
    }
    let z = DMatrix::from_fn(m, m - r, |i, j| frame[r + j][i]);
    Ok(ConstraintNullBasis { z })
}

/// Modified Gram–Schmidt with one reorthogonalization pass.
fn orthogonalize(frame: &[DVector<f64>], mut v: DVector<f64>) -> DVector<f64> {
    for _ in 0..2 {
        for q in frame {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
    }
    v
}

/// The d×dL constraint matrix (π₁ I_d; …; π_L I_d) encoding Σ_a π_a θ_a = 0
/// on the stacked per-treatment coefficient vector.
pub fn pi_constraint_matrix(pi: &[f64], d: usize) -> DMatrix<f64> {
    let levels = pi.len();
    let mut c = DMatrix::zeros(d, d * levels);
    for (a, &p) in pi.iter().enumerate() {
        for k in 0..d {
            c[(k, a * d + k)] = p;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_sum_constraint() {
        let c = DMatrix::from_row_slice(1, 2, &[3.0, 3.0]);
        let z = null_space_basis(&c).unwrap();
        let col = z.matrix().column(0);
        let s = 1.0 / 2f64.sqrt();
        assert!((col[0].abs() - s).abs() < 1e-12);
        assert!((col[1].abs() - s).abs() < 1e-12);
        assert!((col[0] + col[1]).abs() < 1e-12);
    }

    #[test]
    fn identity_constraint_has_empty_null_space() {
        let c = DMatrix::<f64>::identity(3, 3);
        let err = null_space_basis(&c).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn rank_deficiency_is_detected() {
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let err = null_space_basis(&c).unwrap_err();
        assert!(err.to_string().contains("detected rank 1"), "{err}");
    }

    #[test]
    fn pi_constraint_is_absorbed_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(levels, d) in &[(2usize, 4usize), (3, 8), (5, 3)] {
            let raw: Vec<f64> = (0..levels).map(|_| 0.2 + rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let pi: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let c = pi_constraint_matrix(&pi, d);
            let z = null_space_basis(&c).unwrap();
            assert_eq!(z.null_dim(), d * (levels - 1));
            // ZᵀZ = I
            let g = z.matrix().transpose() * z.matrix();
            assert!((g - DMatrix::<f64>::identity(z.null_dim(), z.null_dim())).abs().max() < 1e-12);
            for _ in 0..10 {
                let reduced = DVector::from_fn(z.null_dim(), |_, _| rng.random::<f64>() - 0.5);
                let theta = z.expand(&reduced);
                // Σ_a π_a θ_a per coefficient slot
                for k in 0..d {
                    let s: f64 = (0..levels).map(|a| pi[a] * theta[a * d + k]).sum();
                    assert!(s.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_same_input() {
        let c = DMatrix::from_row_slice(1, 5, &[0.3, 0.1, 0.25, 0.2, 0.15]);
        let z1 = null_space_basis(&c).unwrap();
        let z2 = null_space_basis(&c).unwrap();
        assert_eq!(z1.matrix(), z2.matrix());
    }
}
