//! Individualized treatment rules from fitted models and their value
//! estimation by the inverse-probability-weighted estimator over repeated
//! random training/testing splits.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FitConfig;
use crate::data::{center_outcome_by_treatment, standardize_covariates, Dataset, Standardization};
use crate::error::{Error, Result};
use crate::linear::fit_linear_gem;
use crate::reduction::ReductionBasis;
use crate::simml::{fit_simml, SimmlFit};
use crate::stiefel::{stiefel_optimize, MultiFit};

/// How a rule maps covariates to a treatment label.
#[derive(Debug, Clone, Serialize, Deserialize)]
enum RulePolicy {
    Simml(Box<SimmlFit>),
    Multi(Box<MultiFit>),
    LinearGem {
        beta: ReductionBasis,
        gamma: Vec<f64>,
    },
    Fixed {
        label: usize,
    },
    /// Deterministic pseudo-random label per covariate vector.
    Random {
        levels: usize,
        seed: u64,
    },
}

/// Anything that deterministically assigns a treatment label to covariates.
pub trait DecisionRule: Sync + Send {
    fn decide(&self, x: &DVector<f64>) -> usize;
    fn provenance(&self) -> String;
}

/// A deterministic map from a covariate vector to a treatment label, with
/// ties broken toward the smallest label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreatmentRule {
    pub provenance: String,
    policy: RulePolicy,
}

impl DecisionRule for TreatmentRule {
    fn decide(&self, x: &DVector<f64>) -> usize {
        TreatmentRule::decide(self, x)
    }

    fn provenance(&self) -> String {
        self.provenance.clone()
    }
}

impl TreatmentRule {
    pub fn from_simml(fit: SimmlFit) -> Self {
        Self {
            provenance: "simml".into(),
            policy: RulePolicy::Simml(Box::new(fit)),
        }
    }

    pub fn from_multi(fit: MultiFit) -> Self {
        Self {
            provenance: format!("stiefel-q{}", fit.dim()),
            policy: RulePolicy::Multi(Box::new(fit)),
        }
    }

    pub fn from_linear_gem(beta: ReductionBasis, gamma: Vec<f64>) -> Self {
        Self {
            provenance: "linear-gem".into(),
            policy: RulePolicy::LinearGem { beta, gamma },
        }
    }

    pub fn fixed(label: usize) -> Self {
        Self {
            provenance: format!("always-{label}"),
            policy: RulePolicy::Fixed { label },
        }
    }

    pub fn random(levels: usize, seed: u64) -> Self {
        Self {
            provenance: "random".into(),
            policy: RulePolicy::Random { levels, seed },
        }
    }

    /// D̂(x) = argmax_a ĝ_a(B̂ᵀx); ties go to the smallest label.
    pub fn decide(&self, x: &DVector<f64>) -> usize {
        match &self.policy {
            RulePolicy::Simml(fit) => argmax_label(&fit.predict_links(x).0),
            RulePolicy::Multi(fit) => argmax_label(&fit.predict_links(x).0),
            RulePolicy::LinearGem { beta, gamma } => {
                let u = beta.as_vector().dot(x);
                let scores: Vec<f64> = gamma.iter().map(|g| g * u).collect();
                argmax_label(&scores)
            }
            RulePolicy::Fixed { label } => *label,
            RulePolicy::Random { levels, seed } => {
                let mut h = *seed ^ 0x9e37_79b9_7f4a_7c15;
                for v in x.iter() {
                    h ^= v.to_bits();
                    h = h.wrapping_mul(0x100_0000_01b3);
                    h ^= h >> 31;
                }
                1 + (h % *levels as u64) as usize
            }
        }
    }
}

fn argmax_label(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (k, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = k;
        }
    }
    best + 1
}

/// Mean raw-scale outcome among subjects whose observed assignment matches
/// the rule: V̂ = Σ yᵢ 1(aᵢ = D̂(xᵢ)) / Σ 1(aᵢ = D̂(xᵢ)).
pub fn ipwe_value<R: DecisionRule + ?Sized>(rule: &R, ds: &Dataset) -> Result<f64> {
    let labels = ds.labels()?;
    let y = ds.raw_outcome();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..ds.n() {
        let x = ds.x().row(i).transpose();
        if rule.decide(&x) == labels[i] {
            total += y[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Numerical(
            "rule matches no observed assignment".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Which estimator a split evaluation fits on each training set.
#[derive(Clone)]
pub enum EstimatorSpec {
    LinearGem,
    Simml(FitConfig),
    Multi { q: usize, cfg: FitConfig },
    Fixed(usize),
    Random,
    /// A fixed externally supplied rule operating on raw covariates;
    /// no per-split fitting or preprocessing.
    Oracle(std::sync::Arc<dyn DecisionRule>),
}

impl std::fmt::Debug for EstimatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl EstimatorSpec {
    pub fn name(&self) -> String {
        match self {
            EstimatorSpec::LinearGem => "linear-gem".into(),
            EstimatorSpec::Simml(_) => "simml".into(),
            EstimatorSpec::Multi { q, .. } => format!("stiefel-q{q}"),
            EstimatorSpec::Fixed(a) => format!("always-{a}"),
            EstimatorSpec::Random => "random".into(),
            EstimatorSpec::Oracle(r) => format!("oracle({})", r.provenance()),
        }
    }
}

/// IPWE values across repeated random splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueReport {
    pub estimator: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub ratio: f64,
    pub reps: usize,
    pub seed: u64,
}

impl ValueReport {
    fn from_values(estimator: String, values: Vec<f64>, ratio: f64, seed: u64) -> Self {
        let reps = values.len();
        let mean = values.iter().sum::<f64>() / reps as f64;
        let sd = if reps > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        Self {
            estimator,
            values,
            mean,
            sd,
            ratio,
            reps,
            seed,
        }
    }

    /// Monte Carlo standard error of the mean across splits.
    pub fn mc_standard_error(&self) -> f64 {
        if self.reps > 1 {
            self.sd / (self.reps as f64).sqrt()
        } else {
            f64::INFINITY
        }
    }
}

const MAX_REDRAWS: usize = 20;

/// Splits the raw dataset train:test = ratio:1 `reps` times; each replication
/// preprocesses the training split, fits the estimator, and evaluates the
/// resulting rule by IPWE on the raw-scale testing split.
pub fn split_evaluate(
    ds: &Dataset,
    spec: &EstimatorSpec,
    ratio: f64,
    reps: usize,
    seed: u64,
) -> Result<ValueReport> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Validation("split ratio must be positive".into()));
    }
    if reps == 0 {
        return Err(Error::Validation("need at least one replication".into()));
    }
    if ds.is_standardized() || ds.is_outcome_centered() {
        return Err(Error::Validation(
            "split_evaluate expects the raw dataset; preprocessing is re-estimated per split"
                .into(),
        ));
    }
    let n = ds.n();
    let n_train = ((ratio / (ratio + 1.0)) * n as f64).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let levels = ds.levels()?;

    let values: Vec<Result<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| evaluate_one_split(ds, spec, n_train, levels, seed, rep as u64))
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(ValueReport::from_values(spec.name(), values, ratio, seed))
}

fn evaluate_one_split(
    ds: &Dataset,
    spec: &EstimatorSpec,
    n_train: usize,
    levels: usize,
    seed: u64,
    rep: u64,
) -> Result<f64> {
    let n = ds.n();
    let labels = ds.labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep + 1);

    let mut idx: Vec<usize> = (0..n).collect();
    let mut chosen: Option<(Vec<usize>, Vec<usize>)> = None;
    for _ in 0..MAX_REDRAWS {
        idx.shuffle(&mut rng);
        let train = &idx[..n_train];
        let mut counts = vec![0usize; levels];
        for &i in train {
            counts[labels[i] - 1] += 1;
        }
        // Every group must appear in training with at least L subjects.
        if counts.iter().all(|&c| c >= levels) {
            chosen = Some((train.to_vec(), idx[n_train..].to_vec()));
            break;
        }
    }
    let (train_idx, test_idx) = chosen.ok_or_else(|| {
        Error::Validation(format!(
            "could not draw a training split covering every treatment group in {MAX_REDRAWS} tries"
        ))
    })?;

    let test = ds.subset(&test_idx)?;
    match spec {
        EstimatorSpec::Oracle(rule) => ipwe_value(rule.as_ref(), &test),
        EstimatorSpec::Fixed(a) => ipwe_value(&TreatmentRule::fixed(*a), &test),
        EstimatorSpec::Random => {
            let rule = TreatmentRule::random(levels, seed ^ (rep + 1));
            ipwe_value(&rule, &test)
        }
        _ => {
            let train = ds.subset(&train_idx)?;
            let (train, report) = standardize_covariates(&train)?;
            let (train, _) = center_outcome_by_treatment(&train)?;
            let std = report.standardization.expect("standardization recorded");
            let rule = fit_rule(&train, spec)?;
            let value = ipwe_on_standardized(&rule, &test, &std)?;
            Ok(value)
        }
    }
}

fn fit_rule(train: &Dataset, spec: &EstimatorSpec) -> Result<TreatmentRule> {
    match spec {
        EstimatorSpec::LinearGem => {
            let fit = fit_linear_gem(train)?;
            Ok(TreatmentRule::from_linear_gem(fit.beta, fit.gamma))
        }
        EstimatorSpec::Simml(cfg) => Ok(TreatmentRule::from_simml(fit_simml(train, cfg)?)),
        EstimatorSpec::Multi { q, cfg } => {
            Ok(TreatmentRule::from_multi(stiefel_optimize(train, *q, cfg)?))
        }
        _ => unreachable!("non-fitting estimators handled by the caller"),
    }
}

/// IPWE on a raw testing split for a rule fitted in standardized coordinates.
fn ipwe_on_standardized(
    rule: &TreatmentRule,
    test: &Dataset,
    std: &Standardization,
) -> Result<f64> {
    let labels = test.labels()?;
    let y = test.raw_outcome();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..test.n() {
        let x = std.apply_row(&test.x().row(i).transpose());
        if rule.decide(&x) == labels[i] {
            total += y[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Numerical(
            "rule matches no observed assignment".into(),
        ));
    }
    Ok(total / count as f64)
}
