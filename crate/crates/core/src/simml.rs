//! The q = 1 semiparametric estimator for discrete treatments: alternating
//! optimization of treatment-specific constrained link functions (penalized
//! B-splines) and the index vector β (linearized least squares), the
//! single-index model with multiple links.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{FitConfig, InitStrategy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linear::{dispersion_matrix, fit_group_coefficients, interaction_eigenbasis};
use crate::profile::{constrained_tensor_fit, ConstraintContext, InnerFit};
use crate::reduction::ReductionBasis;
use crate::spline::{basis_rows_with_derivative, BasisSpec};

/// A fitted single-index model with multiple links.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimmlFit {
    pub beta: ReductionBasis,
    /// Per-treatment basis coefficients θ_a.
    pub theta: Vec<DVector<f64>>,
    pub basis: BasisSpec,
    pub pi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub edf: f64,
    pub rss: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

impl SimmlFit {
    pub fn levels(&self) -> usize {
        self.theta.len()
    }

    /// All L link values ĝ_a(β̂ᵀx); the flag reports index clamping.
    pub fn predict_links(&self, x: &DVector<f64>) -> (Vec<f64>, bool) {
        let u = self.beta.as_vector().dot(x);
        self.links_at(u)
    }

    /// Link values at a given index value.
    pub fn links_at(&self, u: f64) -> (Vec<f64>, bool) {
        let (psi, clamped) = self.basis.evaluate_clamped(u);
        (self.theta.iter().map(|t| psi.dot(t)).collect(), clamped)
    }
}

/// The inner profile solution at a fixed β: the exact g-step of the
/// alternating fit, exposed for testing and for the multi-index profiled
/// objective.
#[derive(Debug, Clone)]
pub struct GStep {
    pub theta: Vec<DVector<f64>>,
    pub lambda: Vec<f64>,
    pub edf: f64,
    pub objective: f64,
    pub rss: f64,
    pub basis: BasisSpec,
    pub fitted: DVector<f64>,
}

impl From<InnerFit> for GStep {
    fn from(f: InnerFit) -> Self {
        GStep {
            theta: f.theta,
            lambda: f.lambda,
            edf: f.edf,
            objective: f.objective,
            rss: f.rss,
            basis: f.axis_specs.into_iter().next().expect("one axis"),
            fitted: f.fitted,
        }
    }
}

/// Penalized constrained fit of the links at a fixed β, with GCV-selected λ.
pub fn profile_g_step(ds: &Dataset, beta: &ReductionBasis, cfg: &FitConfig) -> Result<GStep> {
    profile_g_step_with_lambda(ds, beta, cfg, None)
}

/// As `profile_g_step` but with the smoothing parameters frozen when given.
pub fn profile_g_step_with_lambda(
    ds: &Dataset,
    beta: &ReductionBasis,
    cfg: &FitConfig,
    lambda: Option<&[f64]>,
) -> Result<GStep> {
    cfg.validate()?;
    if beta.dim() != 1 {
        return Err(Error::Validation("the g-step expects a q = 1 index".into()));
    }
    let labels = ds.labels()?;
    let pi = ds.pi()?;
    let ctx = ConstraintContext::new(&pi, &[cfg.basis_dim], cfg.penalty_order)?;
    let index: Vec<f64> = beta.indices(ds.x()).column(0).iter().copied().collect();
    let inner = constrained_tensor_fit(
        std::slice::from_ref(&index),
        labels,
        ds.y(),
        &ctx,
        &[cfg.basis_dim],
        cfg,
        lambda,
    )?;
    Ok(inner.into())
}

fn constrained_tensor_fit_1d(
    index: &[f64],
    labels: &[usize],
    y: &DVector<f64>,
    ctx: &ConstraintContext,
    cfg: &FitConfig,
    lambda: Option<&[f64]>,
) -> Result<InnerFit> {
    let col = index.to_vec();
    constrained_tensor_fit(
        std::slice::from_ref(&col),
        labels,
        y,
        ctx,
        &[cfg.basis_dim],
        cfg,
        lambda,
    )
}

/// Starting β for the alternation.
pub(crate) fn initial_beta(ds: &Dataset, cfg: &FitConfig) -> Result<ReductionBasis> {
    match &cfg.init {
        InitStrategy::Given(b) => {
            if b.nrows() != ds.p() || b.dim() != 1 {
                return Err(Error::Validation(format!(
                    "supplied initial basis is {}×{}, expected {}×1",
                    b.nrows(),
                    b.dim(),
                    ds.p()
                )));
            }
            Ok(b.clone())
        }
        InitStrategy::Random => Ok(random_unit(ds.p(), cfg.seed)?),
        InitStrategy::LeadingEigen => {
            let gc = fit_group_coefficients(ds)?;
            let eig = interaction_eigenbasis(&dispersion_matrix(&gc), ds.levels()?)?;
            match eig.leading() {
                Ok(b) => Ok(b),
                Err(_) => random_unit(ds.p(), cfg.seed),
            }
        }
    }
}

fn random_unit(p: usize, seed: u64) -> Result<ReductionBasis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    ReductionBasis::from_vector(v)
}

/// Fits the single-index model with multiple links by alternating the
/// constrained penalized g-step and the linearized β-step.
pub fn fit_simml(ds: &Dataset, cfg: &FitConfig) -> Result<SimmlFit> {
    cfg.validate()?;
    if !ds.is_standardized() || !ds.is_outcome_centered() {
        return Err(Error::Validation(
            "fit_simml requires a standardized, outcome-centered dataset".into(),
        ));
    }
    let labels = ds.labels()?.to_vec();
    let pi = ds.pi()?;
    let ctx = ConstraintContext::new(&pi, &[cfg.basis_dim], cfg.penalty_order)?;
    let y_scale = 1.0 + ds.y().amax();

    let mut beta = initial_beta(ds, cfg)?;
    let mut lambda: Option<Vec<f64>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    // Fit at the current β under the current frozen λ, when already computed
    // by the previous iteration's line search.
    let mut pending: Option<InnerFit> = None;

    for k in 0..cfg.max_iter {
        iterations = k + 1;
        let refresh = k % cfg.lambda_refresh_every == 0;
        let fit = match (refresh, pending.take()) {
            (false, Some(f)) => f,
            _ => {
                let index = index_column(&beta, ds);
                let frozen = if refresh { None } else { lambda.as_deref() };
                let f = constrained_tensor_fit_1d(&index, &labels, ds.y(), &ctx, cfg, frozen)?;
                if refresh {
                    lambda = Some(f.lambda.clone());
                }
                f
            }
        };
        trace.push(fit.objective);

        let theta_max = fit.theta.iter().map(|t| t.amax()).fold(0.0f64, f64::max);
        if theta_max < 1e-12 * y_scale {
            converged = true;
            break;
        }

        let index = index_column(&beta, ds);
        let proposal = beta_step(ds, &fit, &index, &labels)?;
        match backtrack(
            ds,
            &labels,
            &ctx,
            cfg,
            lambda.as_deref(),
            &beta,
            proposal,
            fit.objective,
        )? {
            None => {
                converged = true;
                break;
            }
            Some((next_beta, next_fit)) => {
                let delta = (next_beta.as_vector() - beta.as_vector()).norm();
                beta = next_beta;
                pending = Some(next_fit);
                if delta < cfg.tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    drop(pending);

    // Final fit at the exit β with λ re-selected, so the reported smoothing
    // state matches the reported index.
    let index = index_column(&beta, ds);
    let fin = constrained_tensor_fit_1d(&index, &labels, ds.y(), &ctx, cfg, None)?;
    trace.push(fin.objective);
    Ok(SimmlFit {
        beta,
        theta: fin.theta,
        basis: fin.axis_specs.into_iter().next().expect("one axis"),
        pi,
        lambda: fin.lambda,
        edf: fin.edf,
        rss: fin.rss,
        objective: fin.objective,
        iterations,
        converged,
        objective_trace: trace,
    })
}

fn index_column(beta: &ReductionBasis, ds: &Dataset) -> Vec<f64> {
    beta.indices(ds.x()).column(0).iter().copied().collect()
}

/// One linearized β update: regress y − ĝ(u) + ġ(u)·u on ġ(u)·x.
fn beta_step(
    ds: &Dataset,
    fit: &InnerFit,
    index: &[f64],
    labels: &[usize],
) -> Result<ReductionBasis> {
    let spec = &fit.axis_specs[0];
    let (rows, drows, _) = basis_rows_with_derivative(index, spec);
    let n = ds.n();
    let p = ds.p();
    let mut rtr = DMatrix::zeros(p, p);
    let mut rtz = DVector::zeros(p);
    let mut max_slope = 0.0f64;
    for i in 0..n {
        let theta_a = &fit.theta[labels[i] - 1];
        let g = rows.row(i).transpose().dot(theta_a);
        let dg = drows.row(i).transpose().dot(theta_a);
        max_slope = max_slope.max(dg.abs());
        if dg == 0.0 {
            continue;
        }
        let r = ds.x().row(i).transpose() * dg;
        let z = ds.y()[i] - g + dg * index[i];
        rtr.syger(1.0, &r, &r, 1.0);
        rtz.axpy(z, &r, 1.0);
    }
    let theta_scale = fit.theta.iter().map(|t| t.amax()).fold(0.0f64, f64::max);
    if max_slope < 1e-10 * (1.0 + theta_scale) {
        return Err(Error::Numerical(
            "no interaction signal for index update: fitted links are flat".into(),
        ));
    }
    let chol = Cholesky::new(rtr).ok_or_else(|| {
        Error::Numerical("singular normal equations in the index update".into())
    })?;
    let raw = chol.solve(&rtz);
    ReductionBasis::from_vector(raw)
}

/// Moves from `beta` toward `proposal`, halving the step until the inner
/// objective (at frozen λ) does not increase. `None` means no movement was
/// accepted; otherwise returns the accepted β and its fit.
#[allow(clippy::too_many_arguments)]
fn backtrack(
    ds: &Dataset,
    labels: &[usize],
    ctx: &ConstraintContext,
    cfg: &FitConfig,
    lambda: Option<&[f64]>,
    beta: &ReductionBasis,
    proposal: ReductionBasis,
    objective: f64,
) -> Result<Option<(ReductionBasis, InnerFit)>> {
    let from = beta.as_vector();
    let to = proposal.as_vector();
    let tol = 1e-12 * (1.0 + objective.abs());
    let mut t = 1.0;
    for _ in 0..10 {
        let blend = &from * (1.0 - t) + &to * t;
        if blend.norm() > 1e-10 {
            let cand = ReductionBasis::from_vector(blend)?;
            if (cand.as_vector() - &from).norm() < 1e-15 {
                return Ok(None);
            }
            let index = index_column(&cand, ds);
            let fit = constrained_tensor_fit_1d(&index, labels, ds.y(), ctx, cfg, lambda)?;
            if fit.objective <= objective + tol {
                return Ok(Some((cand, fit)));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}
