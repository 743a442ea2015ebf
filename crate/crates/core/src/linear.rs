//! The linear interaction theory: treatment-specific coefficient vectors,
//! the dispersion matrix H of their spread, its leading eigenbasis, GEM
//! slopes, and the modified-covariate estimator for binary treatments.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::reduction::{sign_normalize, ReductionBasis};

/// Eigenvalues below this fraction of the leading one count as zero rank.
const RANK_TOL: f64 = 1e-10;

/// Treatment-specific linear coefficients η_a with their weighted mean and
/// the marginal covariate covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCoefficients {
    pub eta: Vec<DVector<f64>>,
    pub eta_bar: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub pi: Vec<f64>,
}

/// Eigenpairs of the dispersion matrix H: the estimated basis of the
/// interaction central mean subspace under the linear model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionEigenbasis {
    /// p×(L−1), columns sign-normalized.
    pub xi: DMatrix<f64>,
    /// Nonincreasing; entries below 1e-10·λ₁ are reported as exactly zero.
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues above the rank threshold.
    pub detectable_rank: usize,
    /// Set when every eigenvalue is negligible.
    pub no_detectable_interaction: bool,
}

impl InteractionEigenbasis {
    pub fn leading(&self) -> Result<ReductionBasis> {
        if self.no_detectable_interaction {
            return Err(Error::Numerical(
                "no detectable interaction: dispersion matrix is numerically zero".into(),
            ));
        }
        ReductionBasis::from_vector(DVector::from_column_slice(self.xi.column(0).as_slice()))
    }

    /// The q leading eigenvectors as a reduction basis.
    pub fn leading_basis(&self, q: usize) -> Result<ReductionBasis> {
        if q == 0 || q > self.xi.ncols() {
            return Err(Error::Validation(format!(
                "requested {q} directions from a {}-column eigenbasis",
                self.xi.ncols()
            )));
        }
        ReductionBasis::new(self.xi.columns(0, q).into_owned())
    }
}

/// Fits η̂_a by within-treatment least squares of the centered outcome on the
/// centered covariates, exact on noise-free within-group-linear data. The
/// marginal (all-rows, n−1 divisor) Σ̂ is attached for downstream identities.
pub fn fit_group_coefficients(ds: &Dataset) -> Result<GroupCoefficients> {
    if !ds.is_standardized() || !ds.is_outcome_centered() {
        return Err(Error::Validation(
            "fit_group_coefficients requires a standardized, outcome-centered dataset".into(),
        ));
    }
    let labels = ds.labels()?;
    let levels = ds.levels()?;
    let pi = ds.pi()?;
    let (n, p) = (ds.n(), ds.p());

    let sigma = marginal_covariance(ds.x());

    let mut eta = Vec::with_capacity(levels);
    for a in 1..=levels {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == a).collect();
        let na = rows.len();
        if na < 2 {
            return Err(Error::Validation(format!(
                "treatment group {a} has {na} observation(s); need at least 2"
            )));
        }
        let mut xbar = DVector::zeros(p);
        let mut ybar = 0.0;
        for &i in &rows {
            xbar += ds.x().row(i).transpose();
            ybar += ds.y()[i];
        }
        xbar /= na as f64;
        ybar /= na as f64;
        let mut sxx = DMatrix::zeros(p, p);
        let mut sxy = DVector::zeros(p);
        for &i in &rows {
            let xc = ds.x().row(i).transpose() - &xbar;
            sxx.syger(1.0, &xc, &xc, 1.0);
            sxy.axpy(ds.y()[i] - ybar, &xc, 1.0);
        }
        let chol = Cholesky::new(sxx).ok_or_else(|| {
            Error::Numerical(format!(
                "singular covariate covariance in treatment group {a}; \
                 consider a ridge jitter or fewer covariates"
            ))
        })?;
        eta.push(chol.solve(&sxy));
    }

    let mut eta_bar = DVector::zeros(p);
    for (a, e) in eta.iter().enumerate() {
        eta_bar.axpy(pi[a], e, 1.0);
    }
    Ok(GroupCoefficients {
        eta,
        eta_bar,
        sigma,
        pi,
    })
}

/// Sample covariance of X over all rows (n−1 divisor).
pub fn marginal_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut mean = DVector::zeros(p);
    for i in 0..n {
        mean += x.row(i).transpose();
    }
    mean /= n as f64;
    let mut sigma = DMatrix::zeros(p, p);
    for i in 0..n {
        let c = x.row(i).transpose() - &mean;
        sigma.syger(1.0, &c, &c, 1.0);
    }
    sigma / (n as f64 - 1.0)
}

/// The dispersion matrix H = Σ_a π_a (η_a − η̄)(η_a − η̄)ᵀ.
pub fn dispersion_matrix(gc: &GroupCoefficients) -> DMatrix<f64> {
    let p = gc.eta_bar.len();
    let mut h = DMatrix::zeros(p, p);
    for (a, e) in gc.eta.iter().enumerate() {
        let d = e - &gc.eta_bar;
        h.syger(gc.pi[a], &d, &d, 1.0);
    }
    // syger fills one triangle; mirror it.
    for i in 0..p {
        for j in (i + 1)..p {
            h[(i, j)] = h[(j, i)];
        }
    }
    h
}

/// Top L−1 eigenpairs of the symmetric PSD dispersion matrix, eigenvalues
/// nonincreasing, eigenvectors sign-normalized. Ties are ordered by the
/// first differing eigenvector coordinate for determinism.
pub fn interaction_eigenbasis(h: &DMatrix<f64>, levels: usize) -> Result<InteractionEigenbasis> {
    let p = h.nrows();
    if h.ncols() != p {
        return Err(Error::Validation("dispersion matrix must be square".into()));
    }
    if levels < 2 {
        return Err(Error::Validation("need at least two treatment levels".into()));
    }
    if p <= levels - 1 {
        return Err(Error::Validation(format!(
            "need p > L−1 covariates, got p={p}, L={levels}"
        )));
    }
    let asym = (h - h.transpose()).abs().max();
    if asym > 1e-8 {
        return Err(Error::Validation(format!(
            "dispersion matrix is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| {
        match eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
        {
            std::cmp::Ordering::Equal => {
                for r in 0..p {
                    let (vi, vj) = (eig.eigenvectors[(r, i)], eig.eigenvectors[(r, j)]);
                    if (vi - vj).abs() > 1e-10 {
                        return vi.partial_cmp(&vj).unwrap();
                    }
                }
                std::cmp::Ordering::Equal
            }
            other => other,
        }
    });

    let keep = levels - 1;
    let mut xi = DMatrix::zeros(p, keep);
    let mut values = Vec::with_capacity(keep);
    for (k, &idx) in order.iter().take(keep).enumerate() {
        xi.set_column(k, &eig.eigenvectors.column(idx));
        values.push(eig.eigenvalues[idx].max(0.0));
    }
    let xi = sign_normalize(xi);
    let lead = values.first().copied().unwrap_or(0.0);
    let mut detectable_rank = 0;
    for v in values.iter_mut() {
        if lead <= 0.0 || *v < RANK_TOL * lead {
            *v = 0.0;
        } else {
            detectable_rank += 1;
        }
    }
    Ok(InteractionEigenbasis {
        xi,
        eigenvalues: values,
        detectable_rank,
        no_detectable_interaction: detectable_rank == 0,
    })
}

/// GEM slopes γ_a = (βᵀΣβ)⁻¹ βᵀΣ(η_a − η̄) for a fixed unit β.
pub fn gem_slopes(beta: &ReductionBasis, gc: &GroupCoefficients) -> Result<Vec<f64>> {
    if beta.dim() != 1 {
        return Err(Error::Validation("GEM slopes are defined for q = 1".into()));
    }
    let b = beta.as_vector();
    let sb = &gc.sigma * &b;
    let denom = b.dot(&sb);
    if denom <= 0.0 {
        return Err(Error::Numerical(format!(
            "βᵀΣβ = {denom:.3e} is not positive"
        )));
    }
    Ok(gc
        .eta
        .iter()
        .map(|e| sb.dot(&(e - &gc.eta_bar)) / denom)
        .collect())
}

/// The least-squares coefficient of Y on the modified covariate
/// X·(A + π₁ − 2), defined for binary treatments.
pub fn modified_covariate_fit(ds: &Dataset) -> Result<DVector<f64>> {
    let labels = ds.labels()?;
    if ds.levels()? != 2 {
        return Err(Error::Validation(
            "modified covariate defined for binary A".into(),
        ));
    }
    let pi1 = ds.pi()?[0];
    let (n, p) = (ds.n(), ds.p());
    let mut wtw = DMatrix::zeros(p, p);
    let mut wty = DVector::zeros(p);
    for i in 0..n {
        let factor = labels[i] as f64 + pi1 - 2.0;
        let w = ds.x().row(i).transpose() * factor;
        wtw.syger(1.0, &w, &w, 1.0);
        wty.axpy(ds.y()[i], &w, 1.0);
    }
    let chol = Cholesky::new(wtw).ok_or_else(|| {
        Error::Numerical("singular modified-covariate normal equations".into())
    })?;
    Ok(chol.solve(&wty))
}

/// Everything the linear pipeline produces: coefficients, H, its eigenbasis,
/// the GEM slopes at ξ₁, and (for binary treatments) the modified-covariate
/// direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearGemFit {
    pub coefficients: GroupCoefficients,
    pub h: DMatrix<f64>,
    pub eigen: InteractionEigenbasis,
    pub beta: ReductionBasis,
    pub gamma: Vec<f64>,
    pub beta_star: Option<DVector<f64>>,
}

/// Runs the full linear pipeline on a preprocessed dataset.
pub fn fit_linear_gem(ds: &Dataset) -> Result<LinearGemFit> {
    let gc = fit_group_coefficients(ds)?;
    let h = dispersion_matrix(&gc);
    let eigen = interaction_eigenbasis(&h, ds.levels()?)?;
    let beta = eigen.leading()?;
    let gamma = gem_slopes(&beta, &gc)?;
    let beta_star = if ds.levels()? == 2 {
        Some(modified_covariate_fit(ds)?)
    } else {
        None
    };
    Ok(LinearGemFit {
        coefficients: gc,
        h,
        eigen,
        beta,
        gamma,
        beta_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{center_outcome_by_treatment, standardize_covariates, Treatment};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gc_from(eta: Vec<Vec<f64>>, pi: Vec<f64>, sigma: DMatrix<f64>) -> GroupCoefficients {
        let eta: Vec<DVector<f64>> = eta.into_iter().map(DVector::from_vec).collect();
        let p = eta[0].len();
        let mut eta_bar = DVector::zeros(p);
        for (a, e) in eta.iter().enumerate() {
            eta_bar.axpy(pi[a], e, 1.0);
        }
        GroupCoefficients {
            eta,
            eta_bar,
            sigma,
            pi,
        }
    }

    /// Noise-free data from the linear interaction model with the given η_a,
    /// standardized and centered as the estimators require.
    fn linear_dataset(
        eta: &[Vec<f64>],
        n: usize,
        seed: u64,
        mu_scale: f64,
    ) -> (Dataset, Vec<DVector<f64>>) {
        let p = eta[0].len();
        let levels = eta.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=levels)).collect();
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let e = DVector::from_vec(eta[labels[i] - 1].clone());
            let row = x.row(i).transpose();
            y[i] = e.dot(&row) + mu_scale * (row[0] * 2.0).cos();
        }
        let ds = Dataset::new(x, Treatment::Discrete { labels, levels }, y).unwrap();
        let (ds, rep) = standardize_covariates(&ds).unwrap();
        let (ds, _) = center_outcome_by_treatment(&ds).unwrap();
        // η in the standardized coordinate system: scale by the column sd.
        let std = rep.standardization.unwrap();
        let eta_std: Vec<DVector<f64>> = eta
            .iter()
            .map(|e| DVector::from_fn(p, |j, _| e[j] * std.scales[j]))
            .collect();
        (ds, eta_std)
    }

    #[test]
    fn noise_free_recovery_is_exact() {
        let eta = vec![vec![1.0, 0.5, -0.3], vec![-0.5, 1.0, 0.2]];
        let (ds, eta_std) = linear_dataset(&eta, 400, 42, 0.0);
        let gc = fit_group_coefficients(&ds).unwrap();
        for a in 0..2 {
            assert!(
                (&gc.eta[a] - &eta_std[a]).amax() < 1e-8,
                "group {a}: {:?} vs {:?}",
                gc.eta[a],
                eta_std[a]
            );
        }
    }

    #[test]
    fn mu_does_not_bias_contrasts_between_groups() {
        // A shared nonlinear nuisance shifts every η̂_a equally in the limit;
        // the difference η̂₂ − η̂₁ stays near the truth.
        let eta = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (ds, eta_std) = linear_dataset(&eta, 20_000, 43, 3.0);
        let gc = fit_group_coefficients(&ds).unwrap();
        let diff_hat = &gc.eta[1] - &gc.eta[0];
        let diff_true = &eta_std[1] - &eta_std[0];
        assert!((diff_hat - diff_true).amax() < 0.1);
    }

    #[test]
    fn zero_outcome_gives_zero_coefficients() {
        let eta = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let (ds, _) = linear_dataset(&eta, 100, 44, 0.0);
        let gc = fit_group_coefficients(&ds).unwrap();
        for e in &gc.eta {
            assert!(e.amax() < 1e-12);
        }
    }

    #[test]
    fn duplicated_rows_leave_coefficients_unchanged() {
        let eta = vec![vec![1.0, -0.4], vec![0.3, 0.8]];
        let (ds, _) = linear_dataset(&eta, 120, 45, 0.0);
        let gc1 = fit_group_coefficients(&ds).unwrap();
        let doubled: Vec<usize> = (0..ds.n()).chain(0..ds.n()).collect();
        let ds2 = ds.subset(&doubled).unwrap();
        let gc2 = fit_group_coefficients(&ds2).unwrap();
        for a in 0..2 {
            assert!((&gc1.eta[a] - &gc2.eta[a]).amax() < 1e-10);
        }
    }

    #[test]
    fn eta_bar_is_pi_weighted_mean() {
        let gc = gc_from(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]],
            vec![0.2, 0.5, 0.3],
            DMatrix::identity(2, 2),
        );
        let manual = &gc.eta[0] * 0.2 + &gc.eta[1] * 0.5 + &gc.eta[2] * 0.3;
        assert!((&gc.eta_bar - manual).amax() < 1e-12);
    }

    #[test]
    fn dispersion_hand_example() {
        let gc = gc_from(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.5, 0.5],
            DMatrix::identity(2, 2),
        );
        let h = dispersion_matrix(&gc);
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((h - expected).abs().max() < 1e-14);
    }

    #[test]
    fn dispersion_zero_when_groups_agree() {
        let gc = gc_from(
            vec![vec![0.7, -0.2], vec![0.7, -0.2], vec![0.7, -0.2]],
            vec![0.3, 0.3, 0.4],
            DMatrix::identity(2, 2),
        );
        assert!(dispersion_matrix(&gc).abs().max() < 1e-14);
    }

    #[test]
    fn binary_dispersion_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..10 {
            let p = 4;
            let e1 = DVector::from_fn(p, |_, _| rng.random::<f64>() - 0.5);
            let e2 = DVector::from_fn(p, |_, _| rng.random::<f64>() - 0.5);
            let pi1 = 0.2 + 0.6 * rng.random::<f64>();
            let gc = gc_from(
                vec![e1.iter().copied().collect(), e2.iter().copied().collect()],
                vec![pi1, 1.0 - pi1],
                DMatrix::identity(p, p),
            );
            let h = dispersion_matrix(&gc);
            let d = &e2 - &e1;
            let closed = d.clone() * d.transpose() * (pi1 * (1.0 - pi1));
            assert!((h - closed).abs().max() < 1e-13);
        }
    }

    #[test]
    fn eigenbasis_hand_example() {
        let h = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        // p must exceed L−1, so embed in 3 dimensions.
        let mut h3 = DMatrix::zeros(3, 3);
        h3.view_mut((0, 0), (2, 2)).copy_from(&h);
        let eig = interaction_eigenbasis(&h3, 2).unwrap();
        assert!((eig.eigenvalues[0] - 0.5).abs() < 1e-12);
        let xi = eig.xi.column(0);
        let s = 1.0 / 2f64.sqrt();
        assert!((xi[0] - s).abs() < 1e-12);
        assert!((xi[1] + s).abs() < 1e-12);
        assert!(xi[2].abs() < 1e-12);
    }

    #[test]
    fn zero_dispersion_is_flagged() {
        let eig = interaction_eigenbasis(&DMatrix::zeros(4, 4), 3).unwrap();
        assert!(eig.no_detectable_interaction);
        assert_eq!(eig.detectable_rank, 0);
        assert!(eig.eigenvalues.iter().all(|&v| v == 0.0));
        assert!(eig.leading().is_err());
    }

    #[test]
    fn binary_leading_eigenvector_is_normalized_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let p = 5;
        let e1 = DVector::from_fn(p, |_, _| rng.random::<f64>() - 0.5);
        let e2 = DVector::from_fn(p, |_, _| rng.random::<f64>() - 0.5);
        let gc = gc_from(
            vec![e1.iter().copied().collect(), e2.iter().copied().collect()],
            vec![0.4, 0.6],
            DMatrix::identity(p, p),
        );
        let h = dispersion_matrix(&gc);
        let eig = interaction_eigenbasis(&h, 2).unwrap();
        let expected = sign_normalize(DMatrix::from_column_slice(
            p,
            1,
            ((&e2 - &e1) / (&e2 - &e1).norm()).as_slice(),
        ));
        for j in 0..p {
            assert!((eig.xi[(j, 0)] - expected[(j, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let mut h = DMatrix::zeros(3, 3);
        h[(0, 1)] = 1.0;
        assert!(interaction_eigenbasis(&h, 2).is_err());
    }

    #[test]
    fn eigen_residual_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let p = 6;
        let etas: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..p).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let gc = gc_from(etas, vec![0.3, 0.3, 0.4], DMatrix::identity(p, p));
        let h = dispersion_matrix(&gc);
        let eig = interaction_eigenbasis(&h, 3).unwrap();
        for k in 0..2 {
            let v = eig.xi.column(k).into_owned();
            let residual = (&h * &v - &v * eig.eigenvalues[k]).amax();
            assert!(residual < 1e-8 * eig.eigenvalues[0].max(1.0));
        }
        // Columns orthonormal.
        let g = eig.xi.transpose() * &eig.xi;
        assert!((g - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-10);
    }

    #[test]
    fn gem_slopes_hand_example() {
        let gc = gc_from(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.5, 0.5],
            DMatrix::identity(2, 2),
        );
        let s = 1.0 / 2f64.sqrt();
        let beta =
            ReductionBasis::new(DMatrix::from_column_slice(2, 1, &[s, -s])).unwrap();
        let gamma = gem_slopes(&beta, &gc).unwrap();
        assert!((gamma[0] - s).abs() < 1e-12);
        assert!((gamma[1] + s).abs() < 1e-12);
        // Σ π_a γ_a = 0
        let mean: f64 = gamma.iter().zip(&gc.pi).map(|(g, p)| g * p).sum();
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn gem_slopes_vanish_when_beta_orthogonal() {
        let gc = gc_from(
            vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]],
            vec![0.5, 0.5],
            DMatrix::identity(3, 3),
        );
        let beta =
            ReductionBasis::new(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0])).unwrap();
        let gamma = gem_slopes(&beta, &gc).unwrap();
        assert!(gamma.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gem_slopes_zero_for_equal_groups() {
        let gc = gc_from(
            vec![vec![0.4, 0.1], vec![0.4, 0.1], vec![0.4, 0.1]],
            vec![1.0 / 3.0; 3],
            DMatrix::identity(2, 2),
        );
        let beta =
            ReductionBasis::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let gamma = gem_slopes(&beta, &gc).unwrap();
        assert_eq!(gamma.len(), 3);
        assert!(gamma.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn variance_identity_two_routes() {
        // var(γ_A βᵀX) evaluated through the slopes and through ΣHΣ agree.
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let p = 5;
        let etas: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..p).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        // A random SPD Σ.
        let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        let sigma = &a * a.transpose() + DMatrix::<f64>::identity(p, p);
        let gc = gc_from(etas, vec![0.25, 0.45, 0.3], sigma.clone());
        let h = dispersion_matrix(&gc);
        for _ in 0..100 {
            let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let beta = ReductionBasis::from_vector(v).unwrap();
            let gamma = gem_slopes(&beta, &gc).unwrap();
            let b = beta.as_vector();
            let bsb = (&sigma * &b).dot(&b);
            let route1: f64 =
                gamma.iter().zip(&gc.pi).map(|(g, pi)| pi * g * g).sum::<f64>() * bsb;
            let sb = &sigma * &b;
            let route2 = (&h * &sb).dot(&sb) / bsb;
            assert!(
                (route1 - route2).abs() <= 1e-10 * route2.abs().max(1e-12),
                "{route1} vs {route2}"
            );
        }
    }

    #[test]
    fn leading_eigenvector_dominates_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let p = 6;
        let etas: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..p).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let sigma = DMatrix::<f64>::identity(p, p);
        let gc = gc_from(etas, vec![1.0 / 3.0; 3], sigma.clone());
        let h = dispersion_matrix(&gc);
        let eig = interaction_eigenbasis(&h, 3).unwrap();
        let criterion = |b: &DVector<f64>| {
            let sb = &sigma * b;
            (&h * &sb).dot(&sb) / (&sigma * b).dot(b)
        };
        let at_xi = criterion(&eig.xi.column(0).into_owned());
        for _ in 0..1000 {
            let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = &v / v.norm();
            assert!(criterion(&v) <= at_xi + 1e-12);
        }
    }

    #[test]
    fn contrast_agrees_between_full_and_reduced_covariates() {
        // Fit on X and on the reduced XᵀΞ; contrasts agree on noise-free data.
        let eta = vec![
            vec![1.0, 0.5, 0.0, 0.0, 0.0],
            vec![-1.0, 0.5, 0.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0, 0.0, 0.0],
        ];
        let (ds, _) = linear_dataset(&eta, 600, 51, 0.0);
        let gc = fit_group_coefficients(&ds).unwrap();
        let h = dispersion_matrix(&gc);
        let eig = interaction_eigenbasis(&h, 3).unwrap();
        let xi = eig.xi.columns(0, 2).into_owned();

        let reduced_x = ds.x() * &xi;
        let reduced_ds = Dataset::new(
            reduced_x,
            ds.treatment().clone(),
            ds.y().clone(),
        )
        .unwrap();
        let (reduced_ds, _) = standardize_covariates(&reduced_ds).unwrap();
        let (reduced_ds, _) = center_outcome_by_treatment(&reduced_ds).unwrap();
        let gc_red = fit_group_coefficients(&reduced_ds).unwrap();
        let red_std = reduced_ds.state().standardization.clone().unwrap();

        let contrasts = [vec![1.0, -1.0, 0.0], vec![0.0, 1.0, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..50 {
            let x = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z_raw = xi.transpose() * &x;
            let z = red_std.apply_row(&z_raw);
            for c in &contrasts {
                let full: f64 = (0..3).map(|a| c[a] * gc.eta[a].dot(&x)).sum();
                let red: f64 = (0..3).map(|a| c[a] * gc_red.eta[a].dot(&z)).sum();
                assert!((full - red).abs() < 1e-8, "{full} vs {red}");
            }
        }
    }

    #[test]
    fn sign_convention_tracks_covariate_flips() {
        let eta = vec![vec![1.0, 0.3, -0.2], vec![-0.6, 0.9, 0.4]];
        let (ds, _) = linear_dataset(&eta, 300, 53, 0.0);
        let gc = fit_group_coefficients(&ds).unwrap();
        let eig = interaction_eigenbasis(&dispersion_matrix(&gc), 2).unwrap();

        // Flip the sign of covariate column 1 and refit.
        let mut x2 = ds.x().clone();
        for i in 0..x2.nrows() {
            x2[(i, 1)] = -x2[(i, 1)];
        }
        let mut flipped = Dataset::new(x2, ds.treatment().clone(), ds.y().clone()).unwrap();
        // Preprocessing state is unchanged by a sign flip of a centered column.
        let (s, _) = standardize_covariates(&flipped).unwrap();
        flipped = s;
        let (flipped, _) = center_outcome_by_treatment(&flipped).unwrap();
        let gc2 = fit_group_coefficients(&flipped).unwrap();
        let eig2 = interaction_eigenbasis(&dispersion_matrix(&gc2), 2).unwrap();

        let mut expected = eig.xi.clone();
        for k in 0..expected.ncols() {
            expected[(1, k)] = -expected[(1, k)];
        }
        let expected = sign_normalize(expected);
        assert!((eig2.xi.clone() - expected).abs().max() < 1e-10);
    }

    #[test]
    fn modified_covariate_zero_outcome() {
        let eta = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let (ds, _) = linear_dataset(&eta, 80, 54, 0.0);
        let beta_star = modified_covariate_fit(&ds).unwrap();
        assert!(beta_star.amax() < 1e-12);
    }

    #[test]
    fn modified_covariate_requires_binary() {
        let eta = vec![vec![1.0], vec![0.0], vec![-1.0]];
        let (ds, _) = linear_dataset(&eta, 90, 55, 0.0);
        let err = modified_covariate_fit(&ds).unwrap_err();
        assert!(err.to_string().contains("binary"), "{err}");
    }

    #[test]
    fn modified_covariate_aligns_with_leading_eigenvector() {
        let eta = vec![vec![1.0, 0.0, 0.3], vec![0.0, 1.0, 0.3]];
        let (ds, eta_std) = linear_dataset(&eta, 5000, 56, 0.0);
        let beta_star = modified_covariate_fit(&ds).unwrap();
        let diff = &eta_std[1] - &eta_std[0];
        let cos = beta_star.dot(&diff) / (beta_star.norm() * diff.norm());
        assert!(cos.abs() > 0.999, "cos {cos}");
    }

    #[test]
    fn modified_covariate_link_reproduces_the_model() {
        // g0a(u) = (a + π₁ − 2)u as the pre-specified link.
        let pi1 = 0.5f64;
        let g = |a: usize, u: f64| (a as f64 + pi1 - 2.0) * u;
        for u in [-1.5, 0.0, 2.2] {
            // identifiability: Σ_a π_a g_a(u) = 0
            let avg = 0.5 * g(1, u) + 0.5 * g(2, u);
            assert!(avg.abs() < 1e-12);
        }
    }
}
