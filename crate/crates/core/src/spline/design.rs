//! Design-matrix assembly: basis evaluation rows, treatment-blocked designs,
//! and row-wise tensor products.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::basis::BasisSpec;

/// Evaluates the basis at each value, one row per observation. Out-of-domain
/// values are clamped and counted.
pub fn basis_rows(values: &[f64], spec: &BasisSpec) -> (DMatrix<f64>, usize) {
    let n = values.len();
    let mut rows = DMatrix::zeros(n, spec.dim());
    let mut clamped = 0;
    for (i, &u) in values.iter().enumerate() {
        let (v, c) = spec.evaluate_clamped(u);
        if c {
            clamped += 1;
        }
        rows.row_mut(i).copy_from(&v.transpose());
    }
    (rows, clamped)
}

/// Basis values and derivatives at each value as two n×d matrices.
pub fn basis_rows_with_derivative(
    values: &[f64],
    spec: &BasisSpec,
) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let n = values.len();
    let mut rows = DMatrix::zeros(n, spec.dim());
    let mut drows = DMatrix::zeros(n, spec.dim());
    let mut clamped = 0;
    for (i, &u) in values.iter().enumerate() {
        let (v, d, c) = spec.evaluate_with_derivative(u);
        if c {
            clamped += 1;
        }
        rows.row_mut(i).copy_from(&v.transpose());
        drows.row_mut(i).copy_from(&d.transpose());
    }
    (rows, drows, clamped)
}

/// Places each row of an n×m evaluation matrix into the treatment block of
/// its label: the result is n×(m·L) with zeros outside block a_i on row i.
pub fn block_rows(rows: &DMatrix<f64>, labels: &[usize], levels: usize) -> Result<DMatrix<f64>> {
    let (n, m) = (rows.nrows(), rows.ncols());
    if labels.len() != n {
        return Err(Error::Validation("label count does not match rows".into()));
    }
    let mut out = DMatrix::zeros(n, m * levels);
    for (i, &a) in labels.iter().enumerate() {
        if a < 1 || a > levels {
            return Err(Error::Validation(format!("label {a} outside 1..{levels}")));
        }
        let offset = (a - 1) * m;
        for j in 0..m {
            out[(i, offset + j)] = rows[(i, j)];
        }
    }
    Ok(out)
}

/// The treatment-blocked design D = (D₁; …; D_L) for a univariate basis on
/// the given index values.
pub fn block_design(
    index: &[f64],
    labels: &[usize],
    levels: usize,
    spec: &BasisSpec,
) -> Result<(DMatrix<f64>, usize)> {
    let (rows, clamped) = basis_rows(index, spec);
    Ok((block_rows(&rows, labels, levels)?, clamped))
}

/// Row-wise Kronecker product: row i of the result is row i of `a` ⊗ row i
/// of `b`, giving the tensor-product model matrix.
pub fn tensor_design(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Validation(format!(
            "tensor factors have {} and {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let (n, da, db) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(n, da * db);
    for i in 0..n {
        for r in 0..da {
            let av = a[(i, r)];
            if av == 0.0 {
                continue;
            }
            for s in 0..db {
                out[(i, r * db + s)] = av * b[(i, s)];
            }
        }
    }
    Ok(out)
}
