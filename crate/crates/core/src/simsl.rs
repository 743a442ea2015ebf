//! The continuous-treatment variant: a single 2-D tensor-product surface link
//! g(βᵀX, A) with the index main effect excluded by a sum-to-zero (over the
//! observed treatment values) constraint on the A-axis marginal basis.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{FitConfig, InitStrategy};
use crate::data::{Dataset, OutcomeCentering};
use crate::error::{Error, Result};
use crate::reduction::ReductionBasis;
use crate::spline::{
    basis_rows, basis_rows_with_derivative, difference_penalty, null_space_basis, tensor_design,
    BasisSpec, LambdaGrid, PenalizedSystem,
};

/// A fitted single-index model with a surface link.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimslFit {
    pub beta: ReductionBasis,
    /// Constrained tensor coefficients, length d·(ď−1).
    pub theta_star: DVector<f64>,
    pub index_basis: BasisSpec,
    pub dose_basis: BasisSpec,
    /// ď×(ď−1) null-space basis absorbing 1ᵀΨ̌γ̌ = 0.
    pub z: DMatrix<f64>,
    /// Observed treatment range (before the basis domain expansion).
    pub dose_range: (f64, f64),
    pub lambda_index: f64,
    pub lambda_dose: f64,
    pub edf: f64,
    pub rss: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    /// Set when the fitted surface is constant along the index axis, leaving
    /// no identifiable direction to update.
    pub no_index_signal: bool,
}

impl SimslFit {
    /// Surface value ĝ(β̂ᵀx, a); the flag reports clamping on either axis.
    pub fn predict_surface(&self, x: &DVector<f64>, a: f64) -> (f64, bool) {
        let u = self.beta.as_vector().dot(x);
        self.surface_at(u, a)
    }

    pub fn surface_at(&self, u: f64, a: f64) -> (f64, bool) {
        let (psi, c1) = self.index_basis.evaluate_clamped(u);
        let (check, c2) = self.dose_basis.evaluate_clamped(a);
        let check_star = check.transpose() * &self.z;
        let dz = self.z.ncols();
        let mut val = 0.0;
        for r in 0..psi.len() {
            if psi[r] == 0.0 {
                continue;
            }
            for s in 0..dz {
                val += psi[r] * check_star[s] * self.theta_star[r * dz + s];
            }
        }
        (val, c1 || c2)
    }

    /// Grid argmax of the fitted surface over the observed treatment range;
    /// ties go to the smallest dose.
    pub fn optimal_dose(&self, x: &DVector<f64>, grid: usize) -> Result<f64> {
        if grid < 2 {
            return Err(Error::Validation("dose grid needs at least 2 points".into()));
        }
        let (lo, hi) = self.dose_range;
        let mut best_a = lo;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..grid {
            let a = lo + (hi - lo) * k as f64 / (grid - 1) as f64;
            let (v, _) = self.predict_surface(x, a);
            if v > best_v {
                best_v = v;
                best_a = a;
            }
        }
        Ok(best_a)
    }

    /// (u, a, ĝ) values on a regular grid for external plotting.
    pub fn surface_grid(&self, nu: usize, na: usize) -> Vec<(f64, f64, f64)> {
        let (ulo, uhi) = self.index_basis.domain();
        let (alo, ahi) = self.dose_range;
        let mut out = Vec::with_capacity(nu * na);
        for i in 0..nu {
            let u = ulo + (uhi - ulo) * i as f64 / (nu - 1).max(1) as f64;
            for j in 0..na {
                let a = alo + (ahi - alo) * j as f64 / (na - 1).max(1) as f64;
                let (g, _) = self.surface_at(u, a);
                out.push((u, a, g));
            }
        }
        out
    }
}

struct SurfaceContext {
    check_star: DMatrix<f64>,
    z: DMatrix<f64>,
    dose_basis: BasisSpec,
    dose_range: (f64, f64),
    penalties: Vec<DMatrix<f64>>,
}

/// Everything that depends only on the treatment axis, fixed across the
/// alternation.
fn surface_context(ds: &Dataset, cfg: &FitConfig) -> Result<SurfaceContext> {
    let doses = ds.doses()?;
    let lo = doses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = doses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Validation("treatment has no variation".into()));
    }
    let d_check = cfg.basis_dim;
    let dose_basis = BasisSpec::from_observed(doses, d_check, cfg.degree)?;
    let (check_rows, _) = basis_rows(doses, &dose_basis);
    // Sum-to-zero over observed doses: C = 1ᵀΨ̌.
    let col_sums = DMatrix::from_fn(1, d_check, |_, j| check_rows.column(j).sum());
    let z = null_space_basis(&col_sums)?.matrix().clone();
    let check_star = &check_rows * &z;

    let d = cfg.basis_dim;
    let s_index = difference_penalty(d, cfg.penalty_order)?.gram();
    let s_dose = difference_penalty(d_check, cfg.penalty_order)?.gram();
    let s_dose_z = z.transpose() * &s_dose * &z;
    let dz = d_check - 1;
    // S* = S ⊗ I, Š* = I ⊗ (ZᵀŠZ) on the d·(ď−1) coefficients.
    let mut s_star = DMatrix::zeros(d * dz, d * dz);
    let mut s_check_star = DMatrix::zeros(d * dz, d * dz);
    for r in 0..d {
        for c in 0..d {
            let v = s_index[(r, c)];
            if v != 0.0 {
                for k in 0..dz {
                    s_star[(r * dz + k, c * dz + k)] = v;
                }
            }
        }
        for i in 0..dz {
            for j in 0..dz {
                s_check_star[(r * dz + i, r * dz + j)] = s_dose_z[(i, j)];
            }
        }
    }
    Ok(SurfaceContext {
        check_star,
        z,
        dose_basis,
        dose_range: (lo, hi),
        penalties: vec![s_star, s_check_star],
    })
}

struct SurfaceStep {
    theta: DVector<f64>,
    lambda: Vec<f64>,
    edf: f64,
    rss: f64,
    objective: f64,
    index_basis: BasisSpec,
}

fn surface_step(
    index: &[f64],
    y: &DVector<f64>,
    ctx: &SurfaceContext,
    cfg: &FitConfig,
    frozen: Option<&[f64]>,
) -> Result<SurfaceStep> {
    let index_basis = BasisSpec::from_observed(index, cfg.basis_dim, cfg.degree)?;
    let (psi, _) = basis_rows(index, &index_basis);
    let design = tensor_design(&psi, &ctx.check_star)?;
    let system = PenalizedSystem::new(&design, y, &ctx.penalties)?;
    let lambda = match frozen {
        Some(l) => l.to_vec(),
        None => {
            let grid = LambdaGrid {
                passes: 2,
                ..cfg.lambda_grid.clone()
            };
            system.select_lambda(&grid)?.0
        }
    };
    let s = system.solve(&lambda)?;
    Ok(SurfaceStep {
        theta: s.theta,
        lambda,
        edf: s.edf,
        rss: s.rss,
        objective: s.objective,
        index_basis,
    })
}

fn initial_beta(ds: &Dataset, cfg: &FitConfig) -> Result<ReductionBasis> {
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
        InitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            ReductionBasis::from_vector(DVector::from_fn(ds.p(), |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            }))
        }
        // Least squares of Y on the continuous modified covariate X·(A − Ā).
        InitStrategy::LeadingEigen => {
            let doses = ds.doses()?;
            let abar = doses.iter().sum::<f64>() / doses.len() as f64;
            let p = ds.p();
            let mut wtw = DMatrix::zeros(p, p);
            let mut wty = DVector::zeros(p);
            for i in 0..ds.n() {
                let w = ds.x().row(i).transpose() * (doses[i] - abar);
                wtw.syger(1.0, &w, &w, 1.0);
                wty.axpy(ds.y()[i], &w, 1.0);
            }
            let chol = Cholesky::new(wtw).ok_or_else(|| {
                Error::Numerical("singular initialization normal equations".into())
            })?;
            let v = chol.solve(&wty);
            if v.norm() < 1e-12 {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                ReductionBasis::from_vector(DVector::from_fn(p, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                }))
            } else {
                ReductionBasis::from_vector(v)
            }
        }
    }
}

/// Fits the surface-link model by alternating the constrained tensor
/// surface step and the index-axis linearized β-step.
pub fn fit_simsl(ds: &Dataset, cfg: &FitConfig) -> Result<SimslFit> {
    cfg.validate()?;
    match ds.state().centering {
        Some(OutcomeCentering::Grand(_)) => {}
        _ => {
            return Err(Error::Validation(
                "fit_simsl requires a grand-mean-centered outcome".into(),
            ))
        }
    }
    let ctx = surface_context(ds, cfg)?;
    let y_scale = 1.0 + ds.y().amax();
    let mut beta = initial_beta(ds, cfg)?;
    let mut lambda: Option<Vec<f64>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut no_index_signal = false;
    let mut iterations = 0;
    let mut pending: Option<SurfaceStep> = None;

    for k in 0..cfg.max_iter {
        iterations = k + 1;
        let refresh = k % cfg.lambda_refresh_every == 0;
        let step = match (refresh, pending.take()) {
            (false, Some(s)) => s,
            _ => {
                let index = index_column(&beta, ds);
                let frozen = if refresh { None } else { lambda.as_deref() };
                let s = surface_step(&index, ds.y(), &ctx, cfg, frozen)?;
                if refresh {
                    lambda = Some(s.lambda.clone());
                }
                s
            }
        };
        trace.push(step.objective);

        if step.theta.amax() < 1e-12 * y_scale {
            converged = true;
            break;
        }

        let index = index_column(&beta, ds);
        let proposal = match beta_step(ds, &ctx, &step, &index)? {
            Some(b) => b,
            None => {
                no_index_signal = true;
                converged = true;
                break;
            }
        };
        match backtrack(ds, &ctx, cfg, lambda.as_deref(), &beta, proposal, step.objective)? {
            None => {
                converged = true;
                break;
            }
            Some((next_beta, next_step)) => {
                let delta = (next_beta.as_vector() - beta.as_vector()).norm();
                beta = next_beta;
                pending = Some(next_step);
                if delta < cfg.tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    drop(pending);

    let index = index_column(&beta, ds);
    let fin = surface_step(&index, ds.y(), &ctx, cfg, None)?;
    trace.push(fin.objective);
    Ok(SimslFit {
        beta,
        theta_star: fin.theta,
        index_basis: fin.index_basis,
        dose_basis: ctx.dose_basis,
        z: ctx.z,
        dose_range: ctx.dose_range,
        lambda_index: fin.lambda[0],
        lambda_dose: fin.lambda[1],
        edf: fin.edf,
        rss: fin.rss,
        objective: fin.objective,
        iterations,
        converged,
        objective_trace: trace,
        no_index_signal,
    })
}

fn index_column(beta: &ReductionBasis, ds: &Dataset) -> Vec<f64> {
    beta.indices(ds.x()).column(0).iter().copied().collect()
}

/// Linearized index update; `None` when the surface has no index-axis slope.
fn beta_step(
    ds: &Dataset,
    ctx: &SurfaceContext,
    step: &SurfaceStep,
    index: &[f64],
) -> Result<Option<ReductionBasis>> {
    let (psi, dpsi, _) = basis_rows_with_derivative(index, &step.index_basis);
    let n = ds.n();
    let p = ds.p();
    let dz = ctx.check_star.ncols();
    let d = psi.ncols();
    let mut rtr = DMatrix::zeros(p, p);
    let mut rtz = DVector::zeros(p);
    let mut max_slope = 0.0f64;
    for i in 0..n {
        let mut g = 0.0;
        let mut dg = 0.0;
        for r in 0..d {
            let (pr, dpr) = (psi[(i, r)], dpsi[(i, r)]);
            if pr == 0.0 && dpr == 0.0 {
                continue;
            }
            for s in 0..dz {
                let w = ctx.check_star[(i, s)] * step.theta[r * dz + s];
                g += pr * w;
                dg += dpr * w;
            }
        }
        max_slope = max_slope.max(dg.abs());
        if dg == 0.0 {
            continue;
        }
        let r = ds.x().row(i).transpose() * dg;
        let z = ds.y()[i] - g + dg * index[i];
        rtr.syger(1.0, &r, &r, 1.0);
        rtz.axpy(z, &r, 1.0);
    }
    if max_slope < 1e-10 * (1.0 + step.theta.amax()) {
        return Ok(None);
    }
    let chol = Cholesky::new(rtr).ok_or_else(|| {
        Error::Numerical("singular normal equations in the index update".into())
    })?;
    Ok(Some(ReductionBasis::from_vector(chol.solve(&rtz))?))
}

fn backtrack(
    ds: &Dataset,
    ctx: &SurfaceContext,
    cfg: &FitConfig,
    lambda: Option<&[f64]>,
    beta: &ReductionBasis,
    proposal: ReductionBasis,
    objective: f64,
) -> Result<Option<(ReductionBasis, SurfaceStep)>> {
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
            let step = surface_step(&index, ds.y(), ctx, cfg, lambda)?;
            if step.objective <= objective + tol {
                return Ok(Some((cand, step)));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}
