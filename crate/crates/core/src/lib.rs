//! Sufficient dimension reduction for covariate-by-treatment interactions.
//!
//! Estimates a basis of the interaction central mean subspace under linear
//! and semiparametric models (single- and multi-index, discrete or continuous
//! treatments), selects the structural dimension by AIC, and evaluates the
//! induced individualized treatment rules by inverse-probability-weighted
//! value estimation on held-out data.

pub mod config;
pub mod data;
pub mod error;
pub mod itr;
pub mod linear;
mod profile;
pub mod reduction;
pub mod sim;
pub mod simml;
pub mod simsl;
pub mod spline;
pub mod stiefel;

pub use config::{FitConfig, InitStrategy};
pub use data::{
    basis_to_raw_space, center_outcome_by_treatment, center_outcome_grand,
    estimate_treatment_probs, load_csv, standardize_covariates, Dataset, PreprocessReport,
    Schema, Treatment,
};
pub use error::{Error, Result};
pub use itr::{
    ipwe_value, split_evaluate, DecisionRule, EstimatorSpec, TreatmentRule, ValueReport,
};
pub use linear::{
    dispersion_matrix, fit_group_coefficients, fit_linear_gem, gem_slopes,
    interaction_eigenbasis, modified_covariate_fit, GroupCoefficients, InteractionEigenbasis,
    LinearGemFit,
};
pub use reduction::ReductionBasis;
pub use sim::{
    generate, run_experiment, subspace_distance, Family, GeneratorSpec, Link, MuSpec,
    RecoveryMetrics, Surface, TruthRecord,
};
pub use simml::{fit_simml, profile_g_step, GStep, SimmlFit};
pub use simsl::{fit_simsl, SimslFit};
pub use stiefel::{
    model_aic, profiled_objective, select_dimension, stiefel_optimize, DimensionSelection,
    MultiFit,
};
