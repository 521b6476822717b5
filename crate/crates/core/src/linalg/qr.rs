use rand_distr::Distribution;

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};
use crate::rng::{rng_for, SimRng};

/// Orthonormalize the columns of `m` in place order with two passes of
/// modified Gram-Schmidt. Columns that collapse numerically are replaced by
/// the deterministic axis completion used everywhere else in the crate.
pub fn orthonormalize_columns(m: &Matrix) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::contract(format!(
            "cannot orthonormalize {cols} columns in dimension {rows}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v = m.col(j);
        let start = super::matrix::norm(&v);
        for _ in 0..2 {
            for q in &basis {
                let p = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= p * qi);
            }
        }
        let n = super::matrix::norm(&v);
        if n > 1e-10 * start.max(f64::MIN_POSITIVE) && n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        } else {
            v = complete_one(&basis, rows);
        }
        basis.push(v);
    }
    let mut out = Matrix::zeros(rows, cols);
    for (j, v) in basis.iter().enumerate() {
        out.set_col(j, v);
    }
    Ok(out)
}

/// A unit vector orthogonal to every vector in `basis`, built from the axis
/// vector with the largest residual after projection. Deterministic.
pub(crate) fn complete_one(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    assert!(basis.len() < dim, "basis already spans the space");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for axis in 0..dim {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        for _ in 0..2 {
            for q in basis {
                let p = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= p * qi);
            }
        }
        let n = super::matrix::norm(&v);
        // strict comparison keeps the lowest axis index on ties
        if best.as_ref().is_none_or(|(bn, _)| n > *bn + 1e-12) {
            best = Some((n, v));
        }
    }
    let (n, mut v) = best.expect("dim > 0");
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// `rows x cols` matrix with orthonormal columns: the Q factor of an i.i.d.
/// standard Gaussian matrix, deterministic per `seed`.
pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    let mut rng = rng_for(seed, 0);
    orthonormal_columns_from(rows, cols, &mut rng)
}

pub(crate) fn orthonormal_columns_from(
    rows: usize,
    cols: usize,
    rng: &mut SimRng,
) -> Result<Matrix> {
    if rows < cols || cols == 0 {
        return Err(Error::contract(format!(
            "semi-orthogonal {rows}x{cols} matrix needs rows >= cols >= 1"
        )));
    }
    let g = Matrix::gaussian(rows, cols, 1.0, rng);
    orthonormalize_columns(&g)
}

/// Orthonormalized columns of a matrix with entries drawn from `dist`.
pub(crate) fn orthonormal_columns_with<D: Distribution<f64>>(
    rows: usize,
    cols: usize,
    dist: D,
    rng: &mut SimRng,
) -> Result<Matrix> {
    if rows < cols || cols == 0 {
        return Err(Error::contract(format!(
            "semi-orthogonal {rows}x{cols} matrix needs rows >= cols >= 1"
        )));
    }
    let g = Matrix::from_fn(rows, cols, |_, _| dist.sample(rng));
    orthonormalize_columns(&g)
}

/// `||MᵀM - I||_F`.
pub fn orthonormality_defect(m: &Matrix) -> f64 {
    let g = m.gram();
    let n = g.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    s.sqrt()
}
