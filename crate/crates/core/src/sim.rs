//! Ground-truth data generators for every model family, subspace-recovery
//! metrics (principal angles), and experiment orchestration over
//! scenario × estimator × seed grids.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FitConfig;
use crate::data::{
    basis_to_raw_space, center_outcome_by_treatment, center_outcome_grand,
    standardize_covariates, Dataset, Treatment,
};
use crate::error::{Error, Result};
use crate::itr::DecisionRule;
use crate::linear::{fit_linear_gem, modified_covariate_fit};
use crate::reduction::ReductionBasis;
use crate::simml::fit_simml;
use crate::simsl::fit_simsl;
use crate::stiefel::{select_dimension, stiefel_optimize};

/// Scalar link shapes; the per-treatment sets are centered against π.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Link {
    Linear { slope: f64 },
    /// scale·(u² − 1), mean zero under a standard normal index.
    QuadraticCentered { scale: f64 },
    Sine { scale: f64, freq: f64 },
    /// scale·(max(u,0) − 1/√(2π)), a kinked shape.
    PositivePart { scale: f64 },
}

impl Link {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Link::Linear { slope } => slope * u,
            Link::QuadraticCentered { scale } => scale * (u * u - 1.0),
            Link::Sine { scale, freq } => scale * (freq * u).sin(),
            Link::PositivePart { scale } => {
                scale * (u.max(0.0) - 1.0 / (2.0 * std::f64::consts::PI).sqrt())
            }
        }
    }
}

/// The unspecified covariate main effect μ(X).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MuSpec {
    Zero,
    Linear { coef: Vec<f64> },
    /// amplitude·cos(freq·x₁), a strong nonlinear nuisance.
    CosFirst { amplitude: f64, freq: f64 },
}

impl MuSpec {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            MuSpec::Zero => 0.0,
            MuSpec::Linear { coef } => coef.iter().zip(x.iter()).map(|(c, v)| c * v).sum(),
            MuSpec::CosFirst { amplitude, freq } => amplitude * (freq * x[0]).cos(),
        }
    }
}

/// Dose-response surfaces for the continuous family, mean zero in A given X.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// scale·u·(a − ā) with ā the midpoint of the dose interval.
    Bilinear { scale: f64 },
    /// −height·[(a − κ(u))² − E_A(A − κ(u))²] with κ(u) an index-shifted
    /// interior peak; centered analytically for a uniform dose.
    QuadraticPeak { height: f64, shift: f64 },
}

impl Surface {
    pub fn eval(&self, u: f64, a: f64, lo: f64, hi: f64) -> f64 {
        let abar = 0.5 * (lo + hi);
        match self {
            Surface::Bilinear { scale } => scale * u * (a - abar),
            Surface::QuadraticPeak { height, shift } => {
                let kappa = (abar + shift * u).clamp(lo, hi);
                let var = (hi - lo) * (hi - lo) / 12.0;
                let expected = var + (abar - kappa) * (abar - kappa);
                -height * ((a - kappa) * (a - kappa) - expected)
            }
        }
    }
}

/// One additive term of a multi-index link: a shape applied to one index axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisTerm {
    pub axis: usize,
    pub link: Link,
}

/// The generating model families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// E[Y|X,a] = μ(X) + η_aᵀX.
    Linear { eta: Vec<Vec<f64>>, pi: Vec<f64> },
    /// E[Y|X,a] = μ(X) + γ_a·βᵀX with Σπγ = 0.
    GemRank1 {
        beta: Vec<f64>,
        gamma: Vec<f64>,
        pi: Vec<f64>,
    },
    /// E[Y|X,a] = μ(X) + g_a(βᵀX) with Σπg_a ≡ 0.
    SingleIndex {
        beta: Vec<f64>,
        links: Vec<Link>,
        pi: Vec<f64>,
    },
    /// E[Y|X,a] = μ(X) + Σ_terms link(β_axisᵀX), per-treatment term lists.
    MultiIndex {
        basis: Vec<Vec<f64>>,
        links: Vec<Vec<AxisTerm>>,
        pi: Vec<f64>,
    },
    /// E[Y|X,A] = μ(X) + g(βᵀX, A), A uniform on [a_lo, a_hi].
    ContinuousDose {
        beta: Vec<f64>,
        surface: Surface,
        a_lo: f64,
        a_hi: f64,
    },
}

impl Family {
    pub fn pi(&self) -> Option<&[f64]> {
        match self {
            Family::Linear { pi, .. }
            | Family::GemRank1 { pi, .. }
            | Family::SingleIndex { pi, .. }
            | Family::MultiIndex { pi, .. } => Some(pi),
            Family::ContinuousDose { .. } => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.pi().is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: Family,
    pub n: usize,
    pub p: usize,
    #[serde(default = "MuSpec::default_zero")]
    pub mu: MuSpec,
    pub noise_sd: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
    /// Center the supplied links against π instead of rejecting them.
    #[serde(default)]
    pub auto_center: bool,
}

impl MuSpec {
    fn default_zero() -> Self {
        MuSpec::Zero
    }
}

/// Probe grid for the link-centering identifiability check.
const PROBE_POINTS: usize = 1001;
const PROBE_RANGE: f64 = 4.0;
const CENTER_TOL: f64 = 1e-10;

impl GeneratorSpec {
    /// Validates the spec and returns the (possibly auto-centered) family.
    pub fn resolve(&self) -> Result<Family> {
        if self.n < 2 {
            return Err(Error::Validation("generator needs n >= 2".into()));
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return Err(Error::Validation(
                "exchangeable correlation must lie in [0, 1)".into(),
            ));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::Validation("noise sd must be nonnegative".into()));
        }
        let mut family = self.family.clone();
        if let Some(pi) = family.pi() {
            let s: f64 = pi.iter().sum();
            if pi.iter().any(|&v| !(v > 0.0)) || (s - 1.0).abs() > 1e-8 {
                return Err(Error::Validation(
                    "treatment probabilities must be positive and sum to 1".into(),
                ));
            }
        }
        match &mut family {
            Family::Linear { eta, pi } => {
                if eta.len() != pi.len() || eta.iter().any(|e| e.len() != self.p) {
                    return Err(Error::Validation(
                        "eta must hold one length-p vector per treatment".into(),
                    ));
                }
            }
            Family::GemRank1 { beta, gamma, pi } => {
                if beta.len() != self.p {
                    return Err(Error::Validation("beta must have length p".into()));
                }
                if gamma.len() != pi.len() {
                    return Err(Error::Validation(
                        "gamma must hold one slope per treatment".into(),
                    ));
                }
                let mean: f64 = gamma.iter().zip(pi.iter()).map(|(g, p)| g * p).sum();
                if mean.abs() > CENTER_TOL {
                    if self.auto_center {
                        for g in gamma.iter_mut() {
                            *g -= mean;
                        }
                    } else {
                        return Err(Error::Validation(format!(
                            "slopes violate the centering identifiability (Σπγ = {mean:.3e}); \
                             enable auto-centering or adjust them"
                        )));
                    }
                }
            }
            Family::SingleIndex { beta, links, pi } => {
                if beta.len() != self.p {
                    return Err(Error::Validation("beta must have length p".into()));
                }
                if links.len() != pi.len() {
                    return Err(Error::Validation(
                        "links must hold one shape per treatment".into(),
                    ));
                }
                check_link_centering(links, pi, self.auto_center)?;
            }
            Family::MultiIndex { basis, links, pi } => {
                let b = basis_matrix(basis, self.p)?;
                // Θ_q membership.
                ReductionBasis::new(b)?;
                if links.len() != pi.len() {
                    return Err(Error::Validation(
                        "links must hold one term list per treatment".into(),
                    ));
                }
                let q = basis.len();
                for terms in links.iter() {
                    if terms.iter().any(|t| t.axis >= q) {
                        return Err(Error::Validation("axis index outside 0..q".into()));
                    }
                }
                // Per-axis centering of the additive terms.
                for axis in 0..q {
                    let per_treatment: Vec<Vec<Link>> = links
                        .iter()
                        .map(|terms| {
                            terms
                                .iter()
                                .filter(|t| t.axis == axis)
                                .map(|t| t.link.clone())
                                .collect()
                        })
                        .collect();
                    let worst = probe_center_violation_multi(&per_treatment, pi);
                    if worst > CENTER_TOL && !self.auto_center {
                        return Err(Error::Validation(format!(
                            "axis-{axis} links violate the centering identifiability \
                             (|Σπg| up to {worst:.3e}); enable auto-centering"
                        )));
                    }
                }
            }
            Family::ContinuousDose { beta, a_lo, a_hi, .. } => {
                if beta.len() != self.p {
                    return Err(Error::Validation("beta must have length p".into()));
                }
                if !(a_hi > a_lo) {
                    return Err(Error::Validation("dose interval is empty".into()));
                }
            }
        }
        Ok(family)
    }
}

fn basis_matrix(cols: &[Vec<f64>], p: usize) -> Result<DMatrix<f64>> {
    if cols.is_empty() || cols.iter().any(|c| c.len() != p) {
        return Err(Error::Validation(
            "basis columns must all have length p".into(),
        ));
    }
    Ok(DMatrix::from_fn(p, cols.len(), |i, j| cols[j][i]))
}

fn check_link_centering(links: &[Link], pi: &[f64], auto: bool) -> Result<()> {
    let worst = probe_center_violation(links, pi);
    if worst > CENTER_TOL && !auto {
        return Err(Error::Validation(format!(
            "links violate the centering identifiability (|Σπg| up to {worst:.3e}); \
             enable auto-centering"
        )));
    }
    Ok(())
}

fn probe_center_violation(links: &[Link], pi: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..PROBE_POINTS {
        let u = -PROBE_RANGE + 2.0 * PROBE_RANGE * k as f64 / (PROBE_POINTS - 1) as f64;
        let mean: f64 = links
            .iter()
            .zip(pi.iter())
            .map(|(l, p)| p * l.eval(u))
            .sum();
        worst = worst.max(mean.abs());
    }
    worst
}

fn probe_center_violation_multi(per_treatment: &[Vec<Link>], pi: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..PROBE_POINTS {
        let u = -PROBE_RANGE + 2.0 * PROBE_RANGE * k as f64 / (PROBE_POINTS - 1) as f64;
        let mean: f64 = per_treatment
            .iter()
            .zip(pi.iter())
            .map(|(ls, p)| p * ls.iter().map(|l| l.eval(u)).sum::<f64>())
            .sum();
        worst = worst.max(mean.abs());
    }
    worst
}

/// Everything a test oracle needs about the generated data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    /// B₀ in raw covariate coordinates (None for the unstructured linear
    /// family with more than a rank-one spread).
    pub basis: Option<ReductionBasis>,
    pub family: Family,
    pub mu: MuSpec,
    pub noise_sd: f64,
    pub seed: u64,
    pub stream: u64,
}

impl TruthRecord {
    /// True interaction scores g_a(B₀ᵀx) per treatment (discrete families).
    pub fn true_links(&self, x: &DVector<f64>) -> Option<Vec<f64>> {
        match &self.family {
            Family::Linear { eta, .. } => Some(
                eta.iter()
                    .map(|e| e.iter().zip(x.iter()).map(|(a, b)| a * b).sum())
                    .collect(),
            ),
            Family::GemRank1 { beta, gamma, .. } => {
                let u: f64 = beta.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                Some(gamma.iter().map(|g| g * u).collect())
            }
            Family::SingleIndex { beta, links, pi } => {
                let u: f64 = beta.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                Some(centered_link_values(links, pi, u))
            }
            Family::MultiIndex { basis, links, pi } => {
                let us: Vec<f64> = basis
                    .iter()
                    .map(|col| col.iter().zip(x.iter()).map(|(a, b)| a * b).sum())
                    .collect();
                let raw: Vec<f64> = links
                    .iter()
                    .map(|terms| {
                        terms
                            .iter()
                            .map(|t| t.link.eval(us[t.axis]))
                            .sum::<f64>()
                    })
                    .collect();
                let mean: f64 = raw.iter().zip(pi.iter()).map(|(g, p)| g * p).sum();
                Some(raw.into_iter().map(|g| g - mean).collect())
            }
            Family::ContinuousDose { .. } => None,
        }
    }

    /// The optimal-rule oracle for discrete families.
    pub fn oracle_rule(self: &Arc<Self>) -> Option<OracleRule> {
        self.family.is_discrete().then(|| OracleRule {
            truth: Arc::clone(self),
        })
    }
}

fn centered_link_values(links: &[Link], pi: &[f64], u: f64) -> Vec<f64> {
    let raw: Vec<f64> = links.iter().map(|l| l.eval(u)).collect();
    let mean: f64 = raw.iter().zip(pi.iter()).map(|(g, p)| g * p).sum();
    raw.into_iter().map(|g| g - mean).collect()
}

/// argmax_a of the true links: the optimal individualized rule D^opt.
#[derive(Debug, Clone)]
pub struct OracleRule {
    truth: Arc<TruthRecord>,
}

impl DecisionRule for OracleRule {
    fn decide(&self, x: &DVector<f64>) -> usize {
        let scores = self.truth.true_links(x).expect("discrete truth");
        let mut best = 0usize;
        for (k, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = k;
            }
        }
        best + 1
    }

    fn provenance(&self) -> String {
        "oracle".into()
    }
}

/// Draws a dataset from the generating model. Same spec, same output, bit
/// for bit; (X, A, ε) do not depend on μ or the links, so nuisance variants
/// of one seed are exactly paired.
pub fn generate(spec: &GeneratorSpec) -> Result<(Dataset, TruthRecord)> {
    let family = spec.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.stream);
    let (n, p) = (spec.n, spec.p);

    let mut x = DMatrix::zeros(n, p);
    let sr = spec.rho.sqrt();
    let sc = (1.0 - spec.rho).sqrt();
    for i in 0..n {
        let shared: f64 = rng.sample(StandardNormal);
        for j in 0..p {
            let own: f64 = rng.sample(StandardNormal);
            x[(i, j)] = sr * shared + sc * own;
        }
    }

    let treatment = match &family {
        Family::ContinuousDose { a_lo, a_hi, .. } => {
            let doses: Vec<f64> = (0..n)
                .map(|_| a_lo + (a_hi - a_lo) * rng.random::<f64>())
                .collect();
            Treatment::Continuous(doses)
        }
        _ => {
            let pi = family.pi().expect("discrete family");
            let labels: Vec<usize> = (0..n)
                .map(|_| {
                    let r: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut label = pi.len();
                    for (k, &pk) in pi.iter().enumerate() {
                        acc += pk;
                        if r < acc {
                            label = k + 1;
                            break;
                        }
                    }
                    label
                })
                .collect();
            Treatment::Discrete {
                labels,
                levels: pi.len(),
            }
        }
    };

    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();

    let truth = TruthRecord {
        basis: truth_basis(&family, p)?,
        family: family.clone(),
        mu: spec.mu.clone(),
        noise_sd: spec.noise_sd,
        seed: spec.seed,
        stream: spec.stream,
    };

    let mut y = DVector::zeros(n);
    for i in 0..n {
        let xi = x.row(i).transpose();
        let signal = match (&family, &treatment) {
            (Family::ContinuousDose { beta, surface, a_lo, a_hi }, Treatment::Continuous(a)) => {
                let u: f64 = beta.iter().zip(xi.iter()).map(|(b, v)| b * v).sum();
                surface.eval(u, a[i], *a_lo, *a_hi)
            }
            (_, Treatment::Discrete { labels, .. }) => {
                truth.true_links(&xi).expect("discrete truth")[labels[i] - 1]
            }
            _ => unreachable!("family and treatment kinds agree"),
        };
        y[i] = spec.mu.eval(&xi) + signal + spec.noise_sd * noise[i];
    }

    let ds = Dataset::new(x, treatment, y)?;
    Ok((ds, truth))
}

/// The identified subspace implied by a family's parameters, orthonormalized.
fn truth_basis(family: &Family, p: usize) -> Result<Option<ReductionBasis>> {
    let b = match family {
        Family::GemRank1 { beta, .. }
        | Family::SingleIndex { beta, .. }
        | Family::ContinuousDose { beta, .. } => Some(DMatrix::from_fn(p, 1, |i, _| beta[i])),
        Family::MultiIndex { basis, .. } => Some(basis_matrix(basis, p)?),
        Family::Linear { eta, pi } => {
            // span{η_a − η̄}: drop negligible directions.
            let levels = eta.len();
            let mut bar = DVector::zeros(p);
            for (e, &w) in eta.iter().zip(pi.iter()) {
                bar += DVector::from_column_slice(e) * w;
            }
            let mut m = DMatrix::zeros(p, levels);
            for (a, e) in eta.iter().enumerate() {
                m.set_column(a, &(DVector::from_column_slice(e) - &bar));
            }
            let svd = m.clone().svd(true, false);
            let rank = svd
                .singular_values
                .iter()
                .filter(|&&s| s > 1e-10 * svd.singular_values[0].max(1e-300))
                .count();
            if rank == 0 {
                None
            } else {
                let u = svd.u.as_ref().expect("left singular vectors");
                Some(u.columns(0, rank).into_owned())
            }
        }
    };
    Ok(match b {
        Some(m) => Some(ReductionBasis::from_unnormalized(m)?),
        None => None,
    })
}

/// Principal angles and projection distance between two estimated subspaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    /// Degrees, sorted largest first; unmatched directions count as 90°.
    pub angles_deg: Vec<f64>,
    pub projection_frobenius: f64,
    pub dim_mismatch: bool,
}

impl RecoveryMetrics {
    pub fn largest_angle(&self) -> f64 {
        self.angles_deg.first().copied().unwrap_or(0.0)
    }
}

/// Principal angles via the singular values of B̂ᵀB₀.
pub fn subspace_distance(a: &ReductionBasis, b: &ReductionBasis) -> RecoveryMetrics {
    let (qa, qb) = (a.dim(), b.dim());
    let svd = (a.matrix().transpose() * b.matrix()).svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(0.0, 1.0).acos().to_degrees())
        .collect();
    for _ in 0..qa.abs_diff(qb) {
        angles.push(90.0);
    }
    angles.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let pa = a.matrix() * a.matrix().transpose();
    let pb = b.matrix() * b.matrix().transpose();
    RecoveryMetrics {
        angles_deg: angles,
        projection_frobenius: (pa - pb).norm(),
        dim_mismatch: qa != qb,
    }
}

/// A scenario × estimator × seed experiment description (TOML-friendly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: u64,
    #[serde(default)]
    pub base_seed: u64,
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub fit: FitOverrides,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitOverrides {
    pub basis_dim: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub qmax: Option<usize>,
}

impl FitOverrides {
    pub fn apply(&self, mut cfg: FitConfig) -> FitConfig {
        if let Some(d) = self.basis_dim {
            cfg.basis_dim = d;
        }
        if let Some(m) = self.max_iter {
            cfg.max_iter = m;
        }
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub estimators: Vec<String>,
    pub generator: GeneratorSpec,
}

/// One (scenario, estimator, seed) cell outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub scenario: String,
    pub estimator: String,
    pub seed: u64,
    pub angles_deg: Vec<f64>,
    pub aic: Option<f64>,
    pub selected_q: Option<usize>,
    pub converged: Option<bool>,
    pub runtime_ms: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub scenario: String,
    pub estimator: String,
    pub cells: usize,
    pub failures: usize,
    pub median_angle_deg: Option<f64>,
    pub q25_angle_deg: Option<f64>,
    pub q75_angle_deg: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<AggregateRecord>,
}

pub fn load_experiment_config<P: AsRef<Path>>(path: P) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

/// Runs every (scenario, estimator, seed) cell in parallel; one cell's
/// failure is recorded in its record and does not stop the run.
pub fn run_experiment(config: &ExperimentConfig, cfg: &FitConfig) -> Result<ExperimentReport> {
    if config.seeds == 0 {
        return Err(Error::Config("seeds must be at least 1".into()));
    }
    let cfg = config.fit.apply(cfg.clone());
    let mut jobs = Vec::new();
    for (s_idx, scenario) in config.scenarios.iter().enumerate() {
        for estimator in &scenario.estimators {
            for k in 0..config.seeds {
                jobs.push((s_idx, estimator.clone(), k));
            }
        }
    }
    let cells: Vec<CellRecord> = jobs
        .par_iter()
        .map(|(s_idx, estimator, k)| {
            let scenario = &config.scenarios[*s_idx];
            let start = Instant::now();
            let mut record = CellRecord {
                scenario: scenario.name.clone(),
                estimator: estimator.clone(),
                seed: *k,
                angles_deg: Vec::new(),
                aic: None,
                selected_q: None,
                converged: None,
                runtime_ms: 0,
                error: None,
            };
            let mut gen = scenario.generator.clone();
            gen.seed = config.base_seed.wrapping_add(*k);
            gen.stream = (*s_idx as u64) << 32 | *k;
            match run_cell(&gen, estimator, &cfg, &config.fit) {
                Ok(outcome) => {
                    record.angles_deg = outcome.angles_deg;
                    record.aic = outcome.aic;
                    record.selected_q = outcome.selected_q;
                    record.converged = outcome.converged;
                }
                Err(e) => record.error = Some(e.to_string()),
            }
            record.runtime_ms = start.elapsed().as_millis() as u64;
            record
        })
        .collect();

    let mut aggregates = Vec::new();
    for scenario in &config.scenarios {
        for estimator in &scenario.estimators {
            let mine: Vec<&CellRecord> = cells
                .iter()
                .filter(|c| &c.scenario == &scenario.name && &c.estimator == estimator)
                .collect();
            let mut angles: Vec<f64> = mine
                .iter()
                .filter(|c| c.error.is_none())
                .filter_map(|c| c.angles_deg.first().copied())
                .collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let quantile = |q: f64| -> Option<f64> {
                if angles.is_empty() {
                    None
                } else {
                    let idx = ((angles.len() - 1) as f64 * q).round() as usize;
                    Some(angles[idx])
                }
            };
            aggregates.push(AggregateRecord {
                scenario: scenario.name.clone(),
                estimator: estimator.clone(),
                cells: mine.len(),
                failures: mine.iter().filter(|c| c.error.is_some()).count(),
                median_angle_deg: quantile(0.5),
                q25_angle_deg: quantile(0.25),
                q75_angle_deg: quantile(0.75),
            });
        }
    }
    Ok(ExperimentReport {
        name: config.name.clone(),
        cells,
        aggregates,
    })
}

/// Writes the report as JSON plus a flat CSV of cells.
pub fn write_report<P: AsRef<Path>>(report: &ExperimentReport, dir: P) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json)?;
    let mut w = csv::Writer::from_path(dir.join("cells.csv"))?;
    w.write_record([
        "scenario",
        "estimator",
        "seed",
        "largest_angle_deg",
        "aic",
        "selected_q",
        "converged",
        "runtime_ms",
        "error",
    ])?;
    for c in &report.cells {
        w.write_record([
            c.scenario.clone(),
            c.estimator.clone(),
            c.seed.to_string(),
            c.angles_deg
                .first()
                .map(|a| a.to_string())
                .unwrap_or_default(),
            c.aic.map(|a| a.to_string()).unwrap_or_default(),
            c.selected_q.map(|q| q.to_string()).unwrap_or_default(),
            c.converged.map(|b| b.to_string()).unwrap_or_default(),
            c.runtime_ms.to_string(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct CellOutcome {
    angles_deg: Vec<f64>,
    aic: Option<f64>,
    selected_q: Option<usize>,
    converged: Option<bool>,
}

fn run_cell(
    gen: &GeneratorSpec,
    estimator: &str,
    cfg: &FitConfig,
    overrides: &FitOverrides,
) -> Result<CellOutcome> {
    let (raw, truth) = generate(gen)?;
    let truth_b = truth.basis.clone();
    let angles_for = |b: &ReductionBasis| -> Vec<f64> {
        truth_b
            .as_ref()
            .map(|t| subspace_distance(b, t).angles_deg)
            .unwrap_or_default()
    };

    if truth.family.is_discrete() {
        let (ds, report) = standardize_covariates(&raw)?;
        let (ds, _) = center_outcome_by_treatment(&ds)?;
        let std = report.standardization.expect("standardization recorded");
        match estimator {
            "linear-gem" => {
                let fit = fit_linear_gem(&ds)?;
                let b = basis_to_raw_space(&fit.beta, &std)?;
                Ok(CellOutcome {
                    angles_deg: angles_for(&b),
                    aic: None,
                    selected_q: None,
                    converged: Some(true),
                })
            }
            "modified-covariate" => {
                let v = modified_covariate_fit(&ds)?;
                let b = basis_to_raw_space(&ReductionBasis::from_vector(v)?, &std)?;
                Ok(CellOutcome {
                    angles_deg: angles_for(&b),
                    aic: None,
                    selected_q: None,
                    converged: Some(true),
                })
            }
            "simml" => {
                let fit = fit_simml(&ds, cfg)?;
                let b = basis_to_raw_space(&fit.beta, &std)?;
                Ok(CellOutcome {
                    angles_deg: angles_for(&b),
                    aic: None,
                    selected_q: None,
                    converged: Some(fit.converged),
                })
            }
            name if name.starts_with("stiefel:") => {
                let q: usize = name["stiefel:".len()..].parse().map_err(|_| {
                    Error::Config(format!("cannot parse dimension from '{name}'"))
                })?;
                let fit = stiefel_optimize(&ds, q, cfg)?;
                let b = basis_to_raw_space(&fit.basis, &std)?;
                let aic = crate::stiefel::model_aic(&fit, &ds).ok();
                Ok(CellOutcome {
                    angles_deg: angles_for(&b),
                    aic,
                    selected_q: None,
                    converged: Some(fit.converged),
                })
            }
            "select-dim" => {
                let qmax = overrides.qmax.unwrap_or(2);
                let sel = select_dimension(&ds, qmax, cfg)?;
                let chosen = sel.fits[sel.selected - 1]
                    .as_ref()
                    .expect("selected fit present");
                let b = basis_to_raw_space(&chosen.basis, &std)?;
                Ok(CellOutcome {
                    angles_deg: angles_for(&b),
                    aic: sel.aic[sel.selected - 1],
                    selected_q: Some(sel.selected),
                    converged: Some(chosen.converged),
                })
            }
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    } else {
        let (ds, report) = standardize_covariates(&raw)?;
        let (ds, _) = center_outcome_grand(&ds)?;
        let std = report.standardization.expect("standardization recorded");
        match estimator {
            "simsl" => {
                let fit = fit_simsl(&ds, cfg)?;
                let b = basis_to_raw_space(&fit.beta, &std)?;
                Ok(CellOutcome {
                    angles_deg: angles_for(&b),
                    aic: None,
                    selected_q: None,
                    converged: Some(fit.converged),
                })
            }
            other => Err(Error::Config(format!(
                "estimator '{other}' does not apply to a continuous treatment"
            ))),
        }
    }
}
