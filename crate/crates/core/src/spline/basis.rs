//! B-spline bases on clamped, equally spaced knot sequences, evaluated by the
//! de Boor triangular scheme, with analytic first derivatives.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How far outside the domain a point may fall before strict evaluation
/// refuses to clamp it.
const EXTRAPOLATION_TOL: f64 = 1e-9;

/// A d-dimensional spline basis on [lo, hi]: degree+1 repeated boundary knots
/// on each side and d−degree−1 equally spaced interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    dim: usize,
    degree: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

impl BasisSpec {
    pub fn new(dim: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        if dim < degree + 1 {
            return Err(Error::Validation(format!(
                "basis dimension {dim} must be at least degree+1 = {}",
                degree + 1
            )));
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Validation(format!(
                "invalid basis domain [{lo}, {hi}]"
            )));
        }
        let nseg = dim - degree;
        let h = (hi - lo) / nseg as f64;
        let mut knots = Vec::with_capacity(dim + degree + 1);
        for _ in 0..=degree {
            knots.push(lo);
        }
        for j in 1..nseg {
            knots.push(lo + j as f64 * h);
        }
        for _ in 0..=degree {
            knots.push(hi);
        }
        Ok(Self {
            dim,
            degree,
            lo,
            hi,
            knots,
        })
    }

    /// Basis over the observed range of `values`, expanded by 1% on each side.
    pub fn from_observed(values: &[f64], dim: usize, degree: usize) -> Result<Self> {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Validation("no finite values to derive a domain".into()));
        }
        let range = hi - lo;
        if range < 1e-12 * lo.abs().max(1.0) {
            return Err(Error::Numerical(
                "degenerate index range: all values coincide".into(),
            ));
        }
        Self::new(dim, degree, lo - 0.01 * range, hi + 0.01 * range)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Strict evaluation: points outside the domain by more than 1e-9 are an
    /// extrapolation error; closer ones are clamped with the flag set.
    pub fn evaluate(&self, u: f64) -> Result<(DVector<f64>, bool)> {
        if u < self.lo - EXTRAPOLATION_TOL || u > self.hi + EXTRAPOLATION_TOL {
            return Err(Error::Validation(format!(
                "evaluation point {u} outside basis domain [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(self.evaluate_clamped(u))
    }

    /// Evaluation that clamps any point to the domain, reporting whether it did.
    pub fn evaluate_clamped(&self, u: f64) -> (DVector<f64>, bool) {
        let clamped = u < self.lo || u > self.hi;
        let u = u.clamp(self.lo, self.hi);
        let (span, vals) = self.nonzero_values(u);
        let mut out = DVector::zeros(self.dim);
        for (r, &v) in vals.iter().enumerate() {
            out[span - self.degree + r] = v;
        }
        (out, clamped)
    }

    /// Basis values and first derivatives at a clamped point.
    pub fn evaluate_with_derivative(&self, u: f64) -> (DVector<f64>, DVector<f64>, bool) {
        let clamped = u < self.lo || u > self.hi;
        let u = u.clamp(self.lo, self.hi);
        let (span, vals) = self.nonzero_values(u);
        let mut basis = DVector::zeros(self.dim);
        for (r, &v) in vals.iter().enumerate() {
            basis[span - self.degree + r] = v;
        }
        let mut deriv = DVector::zeros(self.dim);
        let k = self.degree;
        if k == 0 {
            return (basis, deriv, clamped);
        }
        // Nonzero degree-(k−1) values at u are functions span−k+1 ..= span.
        let lower = self.nonzero_values_of_degree(u, span, k - 1);
        let t = &self.knots;
        for local in 0..=k {
            let i = span - k + local;
            let a = if local >= 1 {
                let denom = t[i + k] - t[i];
                if denom > 0.0 {
                    lower[local - 1] / denom
                } else {
                    0.0
                }
            } else {
                0.0
            };
            let b = if local <= k - 1 {
                let denom = t[i + k + 1] - t[i + 1];
                if denom > 0.0 {
                    lower[local] / denom
                } else {
                    0.0
                }
            } else {
                0.0
            };
            deriv[i] = k as f64 * (a - b);
        }
        (basis, deriv, clamped)
    }

    /// Index of the knot span containing u (rightmost span at u = hi).
    fn find_span(&self, u: f64) -> usize {
        let k = self.degree;
        if u >= self.knots[self.dim] {
            return self.dim - 1;
        }
        let mut lo = k;
        let mut hi = self.dim;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if u < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// The degree+1 (possibly) nonzero basis values at u, with their span.
    fn nonzero_values(&self, u: f64) -> (usize, Vec<f64>) {
        let span = self.find_span(u);
        (span, self.nonzero_values_of_degree(u, span, self.degree))
    }

    /// Triangular de Boor scheme up to the requested degree (≤ self.degree),
    /// returning the deg+1 nonzero values of that degree at u within `span`.
    fn nonzero_values_of_degree(&self, u: f64, span: usize, deg: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut vals = vec![0.0; deg + 1];
        vals[0] = 1.0;
        let mut left = vec![0.0; deg + 1];
        let mut right = vec![0.0; deg + 1];
        for j in 1..=deg {
            left[j] = u - t[span + 1 - j];
            right[j] = t[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        vals
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent Cox–de Boor recursion, the oracle for the triangular scheme.
    fn cox_de_boor(t: &[f64], i: usize, k: usize, u: f64, domain_hi: f64) -> f64 {
        if k == 0 {
            let closes = u == domain_hi && t[i] < t[i + 1] && t[i + 1] == domain_hi;
            return if (t[i] <= u && u < t[i + 1]) || closes {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        if t[i + k] > t[i] {
            v += (u - t[i]) / (t[i + k] - t[i]) * cox_de_boor(t, i, k - 1, u, domain_hi);
        }
        if t[i + k + 1] > t[i + 1] {
            v += (t[i + k + 1] - u) / (t[i + k + 1] - t[i + 1])
                * cox_de_boor(t, i + 1, k - 1, u, domain_hi);
        }
        v
    }

    #[test]
    fn partition_of_unity_and_nonnegativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(d, k) in &[(4usize, 3usize), (8, 3), (6, 2), (5, 1), (8, 0)] {
            let spec = BasisSpec::new(d, k, -2.0, 3.5).unwrap();
            for _ in 0..200 {
                let u = -2.0 + 5.5 * rng.random::<f64>();
                let (v, clamped) = spec.evaluate(u).unwrap();
                assert!(!clamped);
                assert!((v.sum() - 1.0).abs() < 1e-12, "d={d} k={k} u={u}");
                assert!(v.iter().all(|&b| b >= 0.0));
                let nonzero = v.iter().filter(|&&b| b > 0.0).count();
                assert!(nonzero <= k + 1);
            }
        }
    }

    #[test]
    fn matches_recursive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(d, k) in &[(8usize, 3usize), (5, 2), (4, 3), (7, 1)] {
            let spec = BasisSpec::new(d, k, 0.0, 1.0).unwrap();
            let mut points: Vec<f64> = (0..100).map(|_| rng.random()).collect();
            points.push(0.0);
            points.push(1.0);
            for u in points {
                let (v, _) = spec.evaluate(u).unwrap();
                for i in 0..d {
                    let oracle = cox_de_boor(spec.knots(), i, k, u, 1.0);
                    assert!(
                        (v[i] - oracle).abs() < 1e-12,
                        "d={d} k={k} i={i} u={u}: {} vs {}",
                        v[i],
                        oracle
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_mass_sits_on_first_function() {
        let spec = BasisSpec::new(8, 3, -1.0, 1.0).unwrap();
        let (v, _) = spec.evaluate(-1.0).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v.iter().skip(1).all(|&b| b.abs() < 1e-12));
    }

    #[test]
    fn single_span_cubic_is_bernstein() {
        let (lo, hi) = (2.0, 5.0);
        let spec = BasisSpec::new(4, 3, lo, hi).unwrap();
        let binom = [1.0, 3.0, 3.0, 1.0];
        for step in 0..=20 {
            let u = lo + (hi - lo) * step as f64 / 20.0;
            let s = (u - lo) / (hi - lo);
            let (v, _) = spec.evaluate(u).unwrap();
            for i in 0..4 {
                let bern = binom[i] * s.powi(i as i32) * (1.0 - s).powi(3 - i as i32);
                assert!((v[i] - bern).abs() < 1e-12, "i={i} u={u}");
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let spec = BasisSpec::new(8, 3, 0.0, 1.0).unwrap();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = 0.01 + 0.98 * rng.random::<f64>();
            let (_, d, _) = spec.evaluate_with_derivative(u);
            let (hi_v, _) = spec.evaluate(u + h).unwrap();
            let (lo_v, _) = spec.evaluate(u - h).unwrap();
            for i in 0..8 {
                let fd = (hi_v[i] - lo_v[i]) / (2.0 * h);
                assert!((d[i] - fd).abs() < 1e-5, "i={i} u={u}: {} vs {}", d[i], fd);
            }
        }
    }

    #[test]
    fn degree_zero_is_bin_indicators() {
        let spec = BasisSpec::new(4, 0, 0.0, 4.0).unwrap();
        let (v, _) = spec.evaluate(2.5).unwrap();
        assert_eq!(v.iter().map(|&b| b as i64).collect::<Vec<_>>(), vec![0, 0, 1, 0]);
        let (v_hi, _) = spec.evaluate(4.0).unwrap();
        assert_eq!(v_hi[3], 1.0);
    }

    #[test]
    fn extrapolation_policy() {
        let spec = BasisSpec::new(6, 3, 0.0, 1.0).unwrap();
        let (_, clamped) = spec.evaluate(1.0 + 5e-10).unwrap();
        assert!(clamped);
        assert!(spec.evaluate(1.1).is_err());
        let (v, clamped) = spec.evaluate_clamped(1.1);
        assert!(clamped);
        assert!((v.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn from_observed_expands_range() {
        let spec = BasisSpec::from_observed(&[0.0, 1.0, 2.0], 5, 3).unwrap();
        let (lo, hi) = spec.domain();
        assert!((lo + 0.02).abs() < 1e-12);
        assert!((hi - 2.02).abs() < 1e-12);
        assert!(BasisSpec::from_observed(&[1.0, 1.0], 5, 3).is_err());
    }

    #[test]
    fn dim_must_cover_degree() {
        assert!(BasisSpec::new(3, 3, 0.0, 1.0).is_err());
    }
}
