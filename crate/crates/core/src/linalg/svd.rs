use super::eigen::canonical_sign;
use super::matrix::{dot, Matrix};
use super::qr::complete_one;

const MAX_SWEEPS: usize = 80;
/// Singular values below this fraction of the largest are exact zeros.
pub const ZERO_SIGMA_RATIO: f64 = 1e-12;

/// Thin SVD `m = u · diag(sigma) · vᵀ` with `min(rows, cols)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let (rows, p) = self.u.shape();
        let cols = self.v.rows();
        Matrix::from_fn(rows, cols, |i, j| {
            (0..p)
                .map(|l| self.u[(i, l)] * self.sigma[l] * self.v[(j, l)])
                .sum()
        })
    }

    /// Number of nonzero singular values.
    pub fn rank(&self) -> usize {
        self.sigma.iter().filter(|&&s| s > 0.0).count()
    }

    /// Smallest strictly positive singular value, or 0 if there is none.
    pub fn sigma_min_positive(&self) -> f64 {
        self.sigma
            .iter()
            .copied()
            .filter(|&s| s > 0.0)
            .fold(0.0, |m, s| if m == 0.0 { s } else { m.min(s) })
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi, which is cyclic Jacobi applied
/// implicitly to the smaller Gram matrix `mᵀm` (or `m mᵀ`).
///
/// Singular vectors for zero singular values are completed to an orthonormal
/// basis from axis vectors, so `u` and `v` are always orthonormal and the
/// result is a deterministic function of the input.
pub fn thin_svd(m: &Matrix) -> SvdResult {
    debug_assert!(m.is_finite(), "thin_svd on non-finite input");
    if m.rows() >= m.cols() {
        one_sided(m)
    } else {
        let t = one_sided(&m.transpose());
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    }
}

fn one_sided(m: &Matrix) -> SvdResult {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols.saturating_sub(1) {
            for j in i + 1..cols {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));
    let sigma_max = norms[order[0]];
    let cutoff = ZERO_SIGMA_RATIO * sigma_max;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    for &j in &order {
        let s = norms[j];
        if s > cutoff && s > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            u_cols.push(complete_one(&u_cols, rows));
            sigma.push(0.0);
        }
        v_cols.push(v[j].clone());
    }
    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if canonical_sign(vc) {
            uc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let mut u = Matrix::zeros(rows, cols);
    let mut vm = Matrix::zeros(cols, cols);
    for l in 0..cols {
        u.set_col(l, &u_cols[l]);
        vm.set_col(l, &v_cols[l]);
    }
    SvdResult { u, sigma, v: vm }
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}
