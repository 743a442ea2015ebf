//! The constrained penalized inner fit shared by the single-index estimator's
//! g-step and the multi-index profiled objective: treatment-blocked (tensor)
//! designs with the Σ_a π_a θ_a = 0 constraint absorbed through a null-space
//! reparametrization, smoothing parameters selected per treatment by GCV.

use nalgebra::{DMatrix, DVector};

use crate::config::FitConfig;
use crate::error::{Error, Result};
use crate::spline::{
    basis_rows, difference_penalty, null_space_basis, pi_constraint_matrix, tensor_design,
    BasisSpec, PenalizedSystem,
};

/// Constraint machinery that depends only on (π, coefficient count), reused
/// across inner fits at different index bases.
pub(crate) struct ConstraintContext {
    /// Per-treatment rows of Z: block a is m×(m(L−1)).
    z_blocks: Vec<DMatrix<f64>>,
    /// Reduced per-treatment penalties S̃_a = ZᵀS_aZ.
    penalties: Vec<DMatrix<f64>>,
    /// Full Z, kept for expanding coefficients.
    z: DMatrix<f64>,
    m: usize,
    levels: usize,
}

impl ConstraintContext {
    pub fn new(pi: &[f64], axis_dims: &[usize], penalty_order: usize) -> Result<Self> {
        let levels = pi.len();
        if levels < 2 {
            return Err(Error::Validation(
                "constrained fit needs at least two treatment levels".into(),
            ));
        }
        let m: usize = axis_dims.iter().product();
        let c = pi_constraint_matrix(pi, m);
        let z = null_space_basis(&c)?.matrix().clone();
        let reduced_dim = z.ncols();
        let z_blocks: Vec<DMatrix<f64>> = (0..levels)
            .map(|a| z.rows(a * m, m).into_owned())
            .collect();

        // Summed per-axis difference-penalty Gram on the tensor coefficients.
        let mut axis_sum = DMatrix::zeros(m, m);
        for (j, &dj) in axis_dims.iter().enumerate() {
            let gram = difference_penalty(dj, penalty_order)?.gram();
            let left: usize = axis_dims[..j].iter().product();
            let right: usize = axis_dims[j + 1..].iter().product();
            axis_sum += kron_identity_sandwich(&gram, left, right);
        }
        let penalties: Vec<DMatrix<f64>> = (0..levels)
            .map(|a| {
                let za = &z_blocks[a];
                za.transpose() * &axis_sum * za
            })
            .collect();
        let _ = reduced_dim;
        Ok(Self {
            z_blocks,
            penalties,
            z,
            m,
            levels,
        })
    }

    pub fn reduced_dim(&self) -> usize {
        self.z.ncols()
    }

    /// θ = Zθ̃ split into per-treatment slices.
    pub fn expand(&self, reduced: &DVector<f64>) -> Vec<DVector<f64>> {
        let theta = &self.z * reduced;
        (0..self.levels)
            .map(|a| theta.rows(a * self.m, self.m).into_owned())
            .collect()
    }
}

/// I_left ⊗ G ⊗ I_right.
fn kron_identity_sandwich(g: &DMatrix<f64>, left: usize, right: usize) -> DMatrix<f64> {
    let d = g.nrows();
    let m = left * d * right;
    let mut out = DMatrix::zeros(m, m);
    for l in 0..left {
        for a in 0..d {
            for b in 0..d {
                let v = g[(a, b)];
                if v == 0.0 {
                    continue;
                }
                for r in 0..right {
                    let row = (l * d + a) * right + r;
                    let col = (l * d + b) * right + r;
                    out[(row, col)] = v;
                }
            }
        }
    }
    out
}

/// One solved inner fit.
#[derive(Debug, Clone)]
pub(crate) struct InnerFit {
    pub theta: Vec<DVector<f64>>,
    pub lambda: Vec<f64>,
    pub edf: f64,
    pub rss: f64,
    pub objective: f64,
    pub fitted: DVector<f64>,
    pub axis_specs: Vec<BasisSpec>,
}

/// Fits the constrained penalized tensor regression of Y on the per-axis
/// index columns, blocked by treatment. With `frozen_lambda` the smoothing
/// parameters are used as given; otherwise GCV selects them per treatment.
pub(crate) fn constrained_tensor_fit(
    index_cols: &[Vec<f64>],
    labels: &[usize],
    y: &DVector<f64>,
    ctx: &ConstraintContext,
    axis_dims: &[usize],
    cfg: &FitConfig,
    frozen_lambda: Option<&[f64]>,
) -> Result<InnerFit> {
    let n = y.len();
    let levels = ctx.levels;
    if ctx.m * levels > n {
        return Err(Error::Validation(format!(
            "coefficient count {} exceeds sample size {n}; reduce the basis dimension or q",
            ctx.m * levels
        )));
    }
    let mut axis_specs = Vec::with_capacity(index_cols.len());
    let mut rows: Option<DMatrix<f64>> = None;
    for (j, col) in index_cols.iter().enumerate() {
        let spec = BasisSpec::from_observed(col, axis_dims[j], cfg.degree)?;
        let (r, _) = basis_rows(col, &spec);
        rows = Some(match rows {
            None => r,
            Some(prev) => tensor_design(&prev, &r)?,
        });
        axis_specs.push(spec);
    }
    let rows = rows.ok_or_else(|| Error::Validation("no index axes".into()))?;

    // Reduced design D̃ = DZ assembled row-by-row through the label's block.
    let reduced_dim = ctx.reduced_dim();
    let mut design = DMatrix::zeros(n, reduced_dim);
    for i in 0..n {
        let a = labels[i];
        if a < 1 || a > levels {
            return Err(Error::Validation(format!("label {a} outside 1..{levels}")));
        }
        let zb = &ctx.z_blocks[a - 1];
        let mut out_row = design.row_mut(i);
        for k in 0..ctx.m {
            let v = rows[(i, k)];
            if v == 0.0 {
                continue;
            }
            for c in 0..reduced_dim {
                out_row[c] += v * zb[(k, c)];
            }
        }
    }

    let system = PenalizedSystem::new(&design, y, &ctx.penalties)?;
    let lambda = match frozen_lambda {
        Some(l) => {
            if l.len() != levels {
                return Err(Error::Validation(format!(
                    "{} lambdas for {levels} treatments",
                    l.len()
                )));
            }
            l.to_vec()
        }
        None => system.select_lambda(&cfg.lambda_grid)?.0,
    };
    let s = system.solve(&lambda)?;
    let fitted = system.fitted(&s.theta);
    Ok(InnerFit {
        theta: ctx.expand(&s.theta),
        lambda,
        edf: s.edf,
        rss: s.rss,
        objective: s.objective,
        fitted,
        axis_specs,
    })
}
