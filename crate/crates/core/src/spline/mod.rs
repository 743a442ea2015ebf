//! Smoothing machinery: B-spline bases, difference penalties, constraint
//! absorption by null-space reparametrization, block and tensor-product
//! designs, and penalized least squares with GCV smoothing selection.

pub mod basis;
pub mod constraint;
pub mod design;
pub mod fit;
pub mod penalty;

pub use basis::BasisSpec;
pub use constraint::{null_space_basis, pi_constraint_matrix, ConstraintNullBasis};
pub use design::{basis_rows, basis_rows_with_derivative, block_design, block_rows, tensor_design};
pub use fit::{penalized_fit, select_lambda, LambdaGrid, PenalizedFit, PenalizedSystem};
pub use penalty::{difference_penalty, PenaltyRoot};

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Reparametrized penalties satisfy θ̃ᵀ(ZᵀSZ)θ̃ = θᵀSθ with θ = Zθ̃.
    #[test]
    fn reparametrized_penalty_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 6;
        let pi = [0.25, 0.4, 0.35];
        let c = pi_constraint_matrix(&pi, d);
        let z = null_space_basis(&c).unwrap();
        let gram = difference_penalty(d, 2).unwrap().gram();
        for a in 0..3 {
            let mut s = DMatrix::zeros(d * 3, d * 3);
            s.view_mut((a * d, a * d), (d, d)).copy_from(&gram);
            let s_tilde = z.matrix().transpose() * &s * z.matrix();
            for _ in 0..20 {
                let reduced = DVector::from_fn(z.null_dim(), |_, _| rng.random::<f64>() - 0.5);
                let theta = z.expand(&reduced);
                let full = (&s * &theta).dot(&theta);
                let rep = (&s_tilde * &reduced).dot(&reduced);
                assert!((full - rep).abs() < 1e-12 * full.abs().max(1.0));
            }
        }
    }
}
