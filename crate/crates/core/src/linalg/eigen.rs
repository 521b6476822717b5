use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigenvalues in descending order; row `i` of `vectors` is the unit
/// eigenvector for `values[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `Pᵀ Λ P` using every pair.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        for (l, &lambda) in self.values.iter().enumerate() {
            if lambda == 0.0 {
                continue;
            }
            let v = self.vectors.row(l);
            for i in 0..n {
                let vi = lambda * v[i];
                for j in 0..n {
                    out[(i, j)] += vi * v[j];
                }
            }
        }
        out
    }
}

/// Scale-relative PSD tolerance `1e-10 · trace(q) / dim`.
pub fn default_psd_tol(q: &Matrix) -> f64 {
    1e-10 * q.trace().max(0.0) / q.rows() as f64
}

/// Eigendecomposition of a symmetric PSD matrix.
///
/// The input is symmetrized before the cyclic Jacobi sweeps. Eigenvalues at or
/// below `psd_tol` are clamped to exactly zero; anything below `-psd_tol` is
/// rejected as not PSD.
pub fn sym_eig(q: &Matrix, psd_tol: f64) -> Result<EigenPair> {
    if !q.is_square() {
        return Err(Error::contract(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            q.rows(),
            q.cols()
        )));
    }
    if !q.is_finite() {
        return Err(Error::contract(
            "eigendecomposition input has non-finite entries",
        ));
    }
    let norm = q.frobenius_norm();
    let asym = q.asymmetry();
    let limit = 1e-9 * norm;
    if asym > limit {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            limit,
        });
    }
    let mut pair = symmetric_eigen(&symmetrize(q))?;
    if let Some(&min) = pair.values.last() {
        if min < -psd_tol {
            return Err(Error::NotPsd {
                eigenvalue: min,
                tol: psd_tol,
            });
        }
    }
    for v in &mut pair.values {
        if *v <= psd_tol {
            *v = 0.0;
        }
    }
    Ok(pair)
}

fn symmetrize(q: &Matrix) -> Matrix {
    Matrix::from_fn(q.rows(), q.cols(), |i, j| 0.5 * (q[(i, j)] + q[(j, i)]))
}

/// Cyclic Jacobi on an exactly symmetric matrix. No clamping.
pub fn symmetric_eigen(sym: &Matrix) -> Result<EigenPair> {
    let n = sym.rows();
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    let mut converged = scale == 0.0 || n == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        if off_diagonal(&a) <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal(&a) > 1e-13 * scale {
        return Err(Error::Internal(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap().then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (row, &i) in order.iter().enumerate() {
        let mut col = v.col(i);
        canonical_sign(&mut col);
        vectors.row_mut(row).copy_from_slice(&col);
    }
    Ok(EigenPair { values, vectors })
}

/// `A ← PᵀAP`, `V ← VP` for the plane rotation on `(p, q)`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

fn off_diagonal(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Flip `v` so its largest-magnitude entry (lowest index on ties) is positive.
/// Returns whether a flip happened.
pub(crate) fn canonical_sign(v: &mut [f64]) -> bool {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
        return true;
    }
    false
}
