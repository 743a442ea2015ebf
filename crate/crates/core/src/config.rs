//! Shared configuration for the iterative estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduction::ReductionBasis;
use crate::spline::LambdaGrid;

/// Starting point for the index vector / basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Leading eigenvectors of the linear dispersion matrix (discrete A)
    /// or the continuous modified-covariate direction (continuous A).
    LeadingEigen,
    /// Seeded random orthonormal start.
    Random,
    /// Caller-supplied basis.
    Given(ReductionBasis),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Basis dimension per axis for q = 1 fits.
    pub basis_dim: usize,
    /// Basis dimension per axis for tensor (q ≥ 2) fits.
    pub tensor_basis_dim: usize,
    pub degree: usize,
    pub penalty_order: usize,
    pub max_iter: usize,
    /// Relative β-change stopping threshold.
    pub tol: f64,
    pub init: InitStrategy,
    pub lambda_grid: LambdaGrid,
    /// λ is re-selected every this many iterations, held fixed between.
    pub lambda_refresh_every: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            basis_dim: 8,
            tensor_basis_dim: 6,
            degree: 3,
            penalty_order: 2,
            max_iter: 50,
            tol: 1e-6,
            init: InitStrategy::LeadingEigen,
            lambda_grid: LambdaGrid::default(),
            lambda_refresh_every: 5,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tol <= 0.0 {
            return Err(Error::Validation("tolerance must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::Validation("max_iter must be at least 1".into()));
        }
        if self.basis_dim < self.degree + 1 || self.tensor_basis_dim < self.degree + 1 {
            return Err(Error::Validation(
                "basis dimension must be at least degree+1".into(),
            ));
        }
        if self.basis_dim <= self.penalty_order || self.tensor_basis_dim <= self.penalty_order {
            return Err(Error::Validation(
                "basis dimension must exceed the penalty order".into(),
            ));
        }
        if self.lambda_refresh_every == 0 {
            return Err(Error::Validation(
                "lambda_refresh_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}
