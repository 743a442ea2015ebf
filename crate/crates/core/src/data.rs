//! Loading, validation, and preprocessing of trial-style datasets into the
//! canonical form every estimator assumes: standardized covariates and
//! treatment-wise (or grand-mean) centered outcomes, with the preprocessing
//! recorded so it can be inverted exactly.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment assignments: integer labels 1..=L or values on a compact interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Treatment {
    Discrete { labels: Vec<usize>, levels: usize },
    Continuous(Vec<f64>),
}

impl Treatment {
    pub fn len(&self) -> usize {
        match self {
            Treatment::Discrete { labels, .. } => labels.len(),
            Treatment::Continuous(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Treatment::Discrete { .. })
    }
}

/// Column means and scales removed by standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    /// Applies the stored transform to new covariate rows.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for j in 0..out.ncols() {
            let (m, s) = (self.means[j], self.scales[j]);
            for i in 0..out.nrows() {
                out[(i, j)] = (out[(i, j)] - m) / s;
            }
        }
        out
    }

    pub fn apply_row(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - self.means[j]) / self.scales[j]),
        )
    }
}

/// Outcome means removed by centering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutcomeCentering {
    /// One mean per treatment level, indexed by label−1.
    ByTreatment(Vec<f64>),
    /// A single grand mean (continuous treatments).
    Grand(f64),
}

/// Which preprocessing steps have been applied to a Dataset, with enough
/// information to invert them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub standardization: Option<Standardization>,
    pub centering: Option<OutcomeCentering>,
}

/// Report returned by a preprocessing operation: the removed quantities plus
/// the estimated treatment probabilities at the time of the operation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub standardization: Option<Standardization>,
    pub centering: Option<OutcomeCentering>,
    pub pi: Option<Vec<f64>>,
}

/// A loaded dataset: n×p covariates, treatments, outcomes, and optional
/// supplied randomization probabilities. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: DMatrix<f64>,
    treatment: Treatment,
    y: DVector<f64>,
    supplied_pi: Option<Vec<f64>>,
    state: PreprocessState,
    covariate_names: Vec<String>,
    /// Original treatment value per remapped label, when the loader remapped.
    label_map: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, treatment: Treatment, y: DVector<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, treatment, y, names, None)
    }

    fn with_names(
        x: DMatrix<f64>,
        treatment: Treatment,
        y: DVector<f64>,
        covariate_names: Vec<String>,
        label_map: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::Validation(format!("need n >= 2 observations, got {n}")));
        }
        if x.ncols() < 1 {
            return Err(Error::Validation("need at least one covariate".into()));
        }
        if treatment.len() != n || y.len() != n {
            return Err(Error::Validation(format!(
                "row counts disagree: X has {n}, treatment {}, outcome {}",
                treatment.len(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite entries in covariates or outcome".into()));
        }
        match &treatment {
            Treatment::Discrete { labels, levels } => {
                if *levels == 0 {
                    return Err(Error::Validation("no treatment levels".into()));
                }
                let mut counts = vec![0usize; *levels];
                for &a in labels {
                    if a < 1 || a > *levels {
                        return Err(Error::Validation(format!(
                            "treatment label {a} outside 1..{levels}"
                        )));
                    }
                    counts[a - 1] += 1;
                }
                if let Some(a) = counts.iter().position(|&c| c == 0) {
                    return Err(Error::Validation(format!(
                        "empty treatment group {}",
                        a + 1
                    )));
                }
            }
            Treatment::Continuous(a) => {
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation("non-finite treatment values".into()));
                }
            }
        }
        Ok(Self {
            x,
            treatment,
            y,
            supplied_pi: None,
            state: PreprocessState::default(),
            covariate_names,
            label_map,
        })
    }

    /// Overrides the empirical treatment probabilities with a known
    /// randomization vector (discrete treatments only).
    pub fn with_probs(mut self, pi: Vec<f64>) -> Result<Self> {
        let levels = match &self.treatment {
            Treatment::Discrete { levels, .. } => *levels,
            Treatment::Continuous(_) => {
                return Err(Error::Validation(
                    "randomization probabilities apply to discrete treatments only".into(),
                ))
            }
        };
        if pi.len() != levels {
            return Err(Error::Validation(format!(
                "probability vector has {} entries for {} treatment levels",
                pi.len(),
                levels
            )));
        }
        if pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Validation("probabilities must be positive".into()));
        }
        let s: f64 = pi.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::Validation(format!("probabilities sum to {s}, not 1")));
        }
        self.supplied_pi = Some(pi.iter().map(|p| p / s).collect());
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn treatment(&self) -> &Treatment {
        &self.treatment
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn label_map(&self) -> Option<&[String]> {
        self.label_map.as_deref()
    }

    pub fn state(&self) -> &PreprocessState {
        &self.state
    }

    pub fn is_standardized(&self) -> bool {
        self.state.standardization.is_some()
    }

    pub fn is_outcome_centered(&self) -> bool {
        self.state.centering.is_some()
    }

    /// Number of treatment levels L (discrete only).
    pub fn levels(&self) -> Result<usize> {
        match &self.treatment {
            Treatment::Discrete { levels, .. } => Ok(*levels),
            Treatment::Continuous(_) => Err(Error::Validation(
                "operation requires a discrete treatment".into(),
            )),
        }
    }

    pub fn labels(&self) -> Result<&[usize]> {
        match &self.treatment {
            Treatment::Discrete { labels, .. } => Ok(labels),
            Treatment::Continuous(_) => Err(Error::Validation(
                "operation requires a discrete treatment".into(),
            )),
        }
    }

    pub fn doses(&self) -> Result<&[f64]> {
        match &self.treatment {
            Treatment::Continuous(a) => Ok(a),
            Treatment::Discrete { .. } => Err(Error::Validation(
                "operation requires a continuous treatment".into(),
            )),
        }
    }

    /// Supplied randomization probabilities if any, else the empirical π̂.
    pub fn pi(&self) -> Result<Vec<f64>> {
        match &self.supplied_pi {
            Some(pi) => Ok(pi.clone()),
            None => estimate_treatment_probs(self),
        }
    }

    /// Row subset in the given order, carrying preprocessing state along.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let n = idx.len();
        if n < 2 {
            return Err(Error::Validation("subset needs at least 2 rows".into()));
        }
        let mut x = DMatrix::zeros(n, self.p());
        let mut y = DVector::zeros(n);
        for (r, &i) in idx.iter().enumerate() {
            x.set_row(r, &self.x.row(i));
            y[r] = self.y[i];
        }
        let treatment = match &self.treatment {
            Treatment::Discrete { labels, levels } => Treatment::Discrete {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                levels: *levels,
            },
            Treatment::Continuous(a) => {
                Treatment::Continuous(idx.iter().map(|&i| a[i]).collect())
            }
        };
        let mut ds = Dataset::with_names(
            x,
            treatment,
            y,
            self.covariate_names.clone(),
            self.label_map.clone(),
        )?;
        ds.supplied_pi = self.supplied_pi.clone();
        ds.state = self.state.clone();
        Ok(ds)
    }

    /// Outcome on the raw scale (centering inverted); covariates untouched.
    pub fn raw_outcome(&self) -> DVector<f64> {
        let mut y = self.y.clone();
        match &self.state.centering {
            None => {}
            Some(OutcomeCentering::Grand(m)) => y.iter_mut().for_each(|v| *v += m),
            Some(OutcomeCentering::ByTreatment(means)) => {
                if let Treatment::Discrete { labels, .. } = &self.treatment {
                    for (i, &a) in labels.iter().enumerate() {
                        y[i] += means[a - 1];
                    }
                }
            }
        }
        y
    }

    /// Inverts all recorded preprocessing, recovering the raw dataset.
    pub fn invert_preprocess(&self) -> Dataset {
        let mut out = self.clone();
        out.y = self.raw_outcome();
        out.state.centering = None;
        if let Some(std) = &self.state.standardization {
            for j in 0..out.x.ncols() {
                let (m, s) = (std.means[j], std.scales[j]);
                for i in 0..out.x.nrows() {
                    out.x[(i, j)] = out.x[(i, j)] * s + m;
                }
            }
            out.state.standardization = None;
        }
        out
    }
}

/// Column roles for CSV loading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    pub treatment_continuous: bool,
}

/// Loads a CSV file under the given schema. Discrete vs. continuous treatment
/// comes from the schema, never from guessing.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    if schema.covariates.is_empty() {
        return Err(Error::Schema("schema names no covariate columns".into()));
    }
    let y_col = col_index(&schema.outcome)?;
    let a_col = col_index(&schema.treatment)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<Vec<_>>>()?;

    let mut y_vals = Vec::new();
    let mut a_raw: Vec<String> = Vec::new();
    let mut x_vals: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1; // 1-based, excluding header
        let parse = |col: usize| -> Result<f64> {
            let cell = record.get(col).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::Parse {
                    row,
                    message: format!("missing value in column '{}'", headers[col]),
                });
            }
            cell.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("non-numeric cell '{}' in column '{}'", cell, headers[col]),
            })
        };
        y_vals.push(parse(y_col)?);
        for &c in &x_cols {
            x_vals.push(parse(c)?);
        }
        a_raw.push(record.get(a_col).unwrap_or("").to_string());
    }
    let n = y_vals.len();
    if n == 0 {
        return Err(Error::Validation("empty dataset".into()));
    }
    let p = x_cols.len();
    let x = DMatrix::from_fn(n, p, |i, j| x_vals[i * p + j]);
    let y = DVector::from_vec(y_vals);

    let treatment = if schema.treatment_continuous {
        let doses = a_raw
            .iter()
            .enumerate()
            .map(|(r, s)| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    row: r + 1,
                    message: format!("non-numeric treatment value '{s}'"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        (Treatment::Continuous(doses), None)
    } else {
        parse_discrete_labels(&a_raw)?
    };
    let (treatment, label_map) = treatment;
    Dataset::with_names(x, treatment, y, schema.covariates.clone(), label_map)
}

/// Numeric labels must be contiguous 1..L as given; string labels are
/// remapped to 1..L in first-appearance order with the mapping recorded.
fn parse_discrete_labels(raw: &[String]) -> Result<(Treatment, Option<Vec<String>>)> {
    let all_numeric = raw.iter().all(|s| s.parse::<i64>().is_ok());
    if all_numeric {
        let values: Vec<i64> = raw.iter().map(|s| s.parse::<i64>().unwrap()).collect();
        let mut distinct: Vec<i64> = values.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let levels = distinct.len();
        let contiguous = distinct
            .iter()
            .enumerate()
            .all(|(k, &v)| v == (k + 1) as i64);
        if !contiguous {
            return Err(Error::Validation(
                "treatment labels must be contiguous 1..L".into(),
            ));
        }
        let labels = values.into_iter().map(|v| v as usize).collect();
        Ok((Treatment::Discrete { labels, levels }, None))
    } else {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        let mut labels = Vec::with_capacity(raw.len());
        for s in raw {
            let next = order.len() + 1;
            let label = *seen.entry(s.clone()).or_insert_with(|| {
                order.push(s.clone());
                next
            });
            labels.push(label);
        }
        let levels = order.len();
        Ok((Treatment::Discrete { labels, levels }, Some(order)))
    }
}

/// Standardizes every covariate column to zero mean and unit sample variance
/// (n−1 divisor). Errors on a constant column, naming it.
pub fn standardize_covariates(ds: &Dataset) -> Result<(Dataset, PreprocessReport)> {
    if ds.is_standardized() {
        return Err(Error::Validation("dataset is already standardized".into()));
    }
    let n = ds.n() as f64;
    let mut means = Vec::with_capacity(ds.p());
    let mut scales = Vec::with_capacity(ds.p());
    let mut x = ds.x.clone();
    for j in 0..ds.p() {
        let col = x.column(j);
        let m = col.sum() / n;
        let ss: f64 = col.iter().map(|v| (v - m) * (v - m)).sum();
        let var = ss / (n - 1.0);
        if var <= 0.0 || !var.is_finite() {
            return Err(Error::Validation(format!(
                "zero-variance covariate '{}'",
                ds.covariate_names[j]
            )));
        }
        let s = var.sqrt();
        for i in 0..ds.n() {
            x[(i, j)] = (x[(i, j)] - m) / s;
        }
        means.push(m);
        scales.push(s);
    }
    let std = Standardization { means, scales };
    let mut out = ds.clone();
    out.x = x;
    out.state.standardization = Some(std.clone());
    let pi = out.treatment.is_discrete().then(|| out.pi()).transpose()?;
    let report = PreprocessReport {
        standardization: Some(std),
        centering: None,
        pi,
    };
    Ok((out, report))
}

/// Removes the treatment-specific outcome means (discrete treatments only).
pub fn center_outcome_by_treatment(ds: &Dataset) -> Result<(Dataset, PreprocessReport)> {
    if ds.is_outcome_centered() {
        return Err(Error::Validation("outcome is already centered".into()));
    }
    let labels = ds.labels().map_err(|_| {
        Error::Validation(
            "treatment-wise centering requires a discrete treatment; use grand-mean centering"
                .into(),
        )
    })?;
    let levels = ds.levels()?;
    let mut sums = vec![0.0; levels];
    let mut counts = vec![0usize; levels];
    for (i, &a) in labels.iter().enumerate() {
        sums[a - 1] += ds.y[i];
        counts[a - 1] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let mut y = ds.y.clone();
    for (i, &a) in labels.iter().enumerate() {
        y[i] -= means[a - 1];
    }
    let mut out = ds.clone();
    out.y = y;
    out.state.centering = Some(OutcomeCentering::ByTreatment(means.clone()));
    let report = PreprocessReport {
        standardization: None,
        centering: Some(OutcomeCentering::ByTreatment(means)),
        pi: Some(out.pi()?),
    };
    Ok((out, report))
}

/// Removes the grand outcome mean (the centering used for continuous
/// treatments, where treatment-specific means are undefined).
pub fn center_outcome_grand(ds: &Dataset) -> Result<(Dataset, PreprocessReport)> {
    if ds.is_outcome_centered() {
        return Err(Error::Validation("outcome is already centered".into()));
    }
    let mean = ds.y.sum() / ds.n() as f64;
    let mut out = ds.clone();
    out.y = ds.y.map(|v| v - mean);
    out.state.centering = Some(OutcomeCentering::Grand(mean));
    let report = PreprocessReport {
        standardization: None,
        centering: Some(OutcomeCentering::Grand(mean)),
        pi: None,
    };
    Ok((out, report))
}

/// Empirical treatment probabilities π̂_a = n_a/n.
pub fn estimate_treatment_probs(ds: &Dataset) -> Result<Vec<f64>> {
    let labels = ds.labels()?;
    let levels = ds.levels()?;
    let mut counts = vec![0usize; levels];
    for &a in labels {
        counts[a - 1] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / n).collect())
}

/// Maps a basis estimated on standardized covariates back to the raw scale
/// (row j divided by the column scale), re-orthonormalized.
pub fn basis_to_raw_space(
    basis: &crate::reduction::ReductionBasis,
    std: &Standardization,
) -> Result<crate::reduction::ReductionBasis> {
    let mut b = basis.matrix().clone();
    for j in 0..b.nrows() {
        for k in 0..b.ncols() {
            b[(j, k)] /= std.scales[j];
        }
    }
    crate::reduction::ReductionBasis::from_unnormalized(b)
}
