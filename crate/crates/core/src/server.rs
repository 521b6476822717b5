//! Server-side pipeline for the single-matrix scheme.
//!
//! Per round and per layer: average the client Gram matrices `AₙᵀAₙ`,
//! eigendecompose the average into the canonical factor `Λ^{1/2}P`, cut it to
//! the target rank, and rotate it onto the previous round's `A` with the
//! orthogonal Procrustes solution `S* = UVᵀ`.

use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::linalg::{sym_eig, thin_svd, EigenPair, Matrix};

/// Aggregated Gram matrix with its eigendecomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct GramAggregate {
    pub q: Matrix,
    pub eigen: EigenPair,
    /// Number of eigenvalues above `psd_tol` (r′).
    pub effective_rank: usize,
    pub psd_tol: f64,
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `Dₙ / Σ Dₘ`.
pub fn size_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// `q = Σ wₙ AₙᵀAₙ`, reduced in client-index order.
pub fn aggregate_gram(locals: &[Matrix], weights: &[f64]) -> Result<GramAggregate> {
    let first = locals
        .first()
        .ok_or_else(|| Error::contract("Gram aggregation needs at least one client"))?;
    if weights.len() != locals.len() {
        return Err(Error::contract(format!(
            "{} weights for {} clients",
            weights.len(),
            locals.len()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-12 || weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::contract(format!(
            "aggregation weights must be non-negative and sum to 1, got {wsum}"
        )));
    }
    let (r, k) = first.shape();
    let mut q = Matrix::zeros(k, k);
    for (a, &w) in locals.iter().zip(weights) {
        if a.shape() != (r, k) {
            return Err(Error::shape("aggregate_gram", a.shape(), (r, k)));
        }
        q.axpy(w, &a.gram())?;
    }
    if !q.is_finite() {
        return Err(Error::Internal(
            "aggregated Gram matrix has non-finite entries".into(),
        ));
    }
    let psd_tol = 1e-10 * q.trace().max(0.0) / k as f64;
    let eigen = sym_eig(&q, psd_tol).map_err(|e| match e {
        Error::NotPsd { .. } | Error::NotSymmetric { .. } => {
            Error::Internal(format!("aggregated Gram failed PSD check: {e}"))
        }
        other => other,
    })?;
    let effective_rank = eigen.values.iter().filter(|&&v| v > 0.0).count();
    let bound = k.min(locals.len() * r);
    if effective_rank > bound {
        return Err(Error::Internal(format!(
            "effective rank {effective_rank} exceeds min(k, N·r) = {bound}"
        )));
    }
    Ok(GramAggregate {
        q,
        eigen,
        effective_rank,
        psd_tol,
    })
}

/// Canonical square-root factor `Ã = Λ^{1/2} P` of a Gram matrix, rows in
/// descending eigenvalue order.
///
/// A zero Gram matrix is represented by a single zero row so that the factor
/// always has a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalFactor {
    pub a_tilde: Matrix,
    /// Eigenvalue behind each row of `a_tilde`.
    pub eigenvalues: Vec<f64>,
    /// Gram energy `Σ λⱼ` dropped by truncation.
    pub truncation_loss: f64,
}

impl CanonicalFactor {
    /// Number of nonzero rows (r′).
    pub fn rank(&self) -> usize {
        self.eigenvalues.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn rows(&self) -> usize {
        self.a_tilde.rows()
    }

    /// `ÃᵀÃ`.
    pub fn gram(&self) -> Matrix {
        self.a_tilde.gram()
    }
}

pub fn decompose(agg: &GramAggregate) -> CanonicalFactor {
    let k = agg.q.rows();
    let r_eff = agg.effective_rank;
    if r_eff == 0 {
        return CanonicalFactor {
            a_tilde: Matrix::zeros(1, k),
            eigenvalues: vec![0.0],
            truncation_loss: 0.0,
        };
    }
    let mut a_tilde = Matrix::zeros(r_eff, k);
    for j in 0..r_eff {
        let s = agg.eigen.values[j].sqrt();
        for (dst, &p) in a_tilde.row_mut(j).iter_mut().zip(agg.eigen.vectors.row(j)) {
            *dst = s * p;
        }
    }
    CanonicalFactor {
        a_tilde,
        eigenvalues: agg.eigen.values[..r_eff].to_vec(),
        truncation_loss: 0.0,
    }
}

/// Keep the `target_r` highest-energy rows.
pub fn truncate_factor(factor: &CanonicalFactor, target_r: usize) -> Result<CanonicalFactor> {
    if target_r == 0 {
        return Err(Error::contract("target rank must be at least 1"));
    }
    if factor.rows() <= target_r {
        return Ok(factor.clone());
    }
    let dropped: f64 = factor.eigenvalues[target_r..].iter().sum();
    Ok(CanonicalFactor {
        a_tilde: factor.a_tilde.row_block(0, target_r),
        eigenvalues: factor.eigenvalues[..target_r].to_vec(),
        truncation_loss: factor.truncation_loss + dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesResult {
    /// `r x r′` alignment.
    pub s_star: Matrix,
    /// `S·Ã`, the next global `A` (`r x k`).
    pub a_next: Matrix,
    /// `||S·Ã - A_prev||²_F`.
    pub residual: f64,
    /// Excess residual over the optimal alignment; zero for `S*` itself.
    pub delta_proc: f64,
    /// Smallest positive singular value of `Ã·A_prevᵀ`, or 0 if none.
    pub sigma_min_cross: f64,
    /// `Tr(A_prev·Ãᵀ·Sᵀ)`.
    pub objective: f64,
    /// `Σⱼ σⱼ(A_prev·Ãᵀ)`, the maximum of the trace objective.
    pub sigma_sum: f64,
}

/// Rotate the canonical factor onto `a_prev`: the SVD `A_prev·Ãᵀ = UΣVᵀ`
/// gives `S* = UVᵀ` and `A_next = S*·Ã`.
///
/// Requires `factor.rows() <= a_prev.rows()`; truncate first otherwise.
pub fn procrustes_align(a_prev: &Matrix, factor: &CanonicalFactor) -> Result<ProcrustesResult> {
    let a_tilde = &factor.a_tilde;
    check_alignable(a_prev, a_tilde)?;
    let m = a_prev.matmul_t(a_tilde)?;
    let svd = thin_svd(&m);
    let s_star = svd.u.matmul_t(&svd.v)?;
    let a_next = s_star.matmul(a_tilde)?;
    let residual = a_next.sub(a_prev)?.frobenius_norm_sq();
    let objective = trace_product(&m, &s_star);
    Ok(ProcrustesResult {
        s_star,
        a_next,
        residual,
        delta_proc: 0.0,
        sigma_min_cross: svd.sigma_min_positive(),
        objective,
        sigma_sum: svd.sigma.iter().sum(),
    })
}

/// Evaluate an arbitrary alignment `s` against the optimum `best`.
pub fn align_with(
    a_prev: &Matrix,
    factor: &CanonicalFactor,
    s: &Matrix,
    best: &ProcrustesResult,
) -> Result<ProcrustesResult> {
    let a_tilde = &factor.a_tilde;
    check_alignable(a_prev, a_tilde)?;
    if s.shape() != best.s_star.shape() {
        return Err(Error::shape("align_with", s.shape(), best.s_star.shape()));
    }
    let a_next = s.matmul(a_tilde)?;
    let residual = a_next.sub(a_prev)?.frobenius_norm_sq();
    let m = a_prev.matmul_t(a_tilde)?;
    Ok(ProcrustesResult {
        s_star: s.clone(),
        a_next,
        residual,
        // non-negative by optimality; clamp round-off
        delta_proc: (residual - best.residual).max(0.0),
        sigma_min_cross: best.sigma_min_cross,
        objective: trace_product(&m, s),
        sigma_sum: best.sigma_sum,
    })
}

/// `[I_{r′}; 0]`, the alignment that leaves the canonical factor in place.
pub fn trivial_alignment(r: usize, r_prime: usize) -> Matrix {
    Matrix::from_fn(r, r_prime, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// `||S·Ã - A||²_F`.
pub fn alignment_residual(a_prev: &Matrix, a_tilde: &Matrix, s: &Matrix) -> Result<f64> {
    Ok(s.matmul(a_tilde)?.sub(a_prev)?.frobenius_norm_sq())
}

/// `Tr(A·Ãᵀ·Sᵀ)`.
pub fn alignment_objective(a_prev: &Matrix, a_tilde: &Matrix, s: &Matrix) -> Result<f64> {
    let m = a_prev.matmul_t(a_tilde)?;
    if m.shape() != s.shape() {
        return Err(Error::shape("alignment_objective", s.shape(), m.shape()));
    }
    Ok(trace_product(&m, s))
}

fn trace_product(m: &Matrix, s: &Matrix) -> f64 {
    m.as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

fn check_alignable(a_prev: &Matrix, a_tilde: &Matrix) -> Result<()> {
    if a_prev.cols() != a_tilde.cols() {
        return Err(Error::shape(
            "procrustes_align",
            a_prev.shape(),
            a_tilde.shape(),
        ));
    }
    if a_tilde.rows() > a_prev.rows() {
        return Err(Error::contract(format!(
            "factor rank {} exceeds target rank {}; truncate before aligning",
            a_tilde.rows(),
            a_prev.rows()
        )));
    }
    Ok(())
}

/// `W⁰ + (α/r)·L·A_nextᵀA_next·R`.
pub fn assemble_full(state: &AdapterState, a_next: &Matrix) -> Result<Matrix> {
    if a_next.shape() != state.a.shape() {
        return Err(Error::shape(
            "assemble_full",
            a_next.shape(),
            state.a.shape(),
        ));
    }
    state.w0().add(&state.delta_w_for(a_next)?)
}

/// Relative Gram mismatch `||A_nextᵀA_next - ÃᵀÃ||_F / ||q||_F`.
pub fn gram_preservation_error(a_next: &Matrix, factor: &CanonicalFactor, q: &Matrix) -> f64 {
    let qn = q.frobenius_norm();
    let d = a_next.gram().distance(&factor.gram()).expect("same k");
    if qn == 0.0 {
        d
    } else {
        d / qn
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_adapter, AdapterConfig, InitScheme};
    use crate::linalg::orthonormality_defect;
    use crate::rng::rng_for;

    #[test]
    fn single_client_gram_is_exact() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]);
        let agg = aggregate_gram(std::slice::from_ref(&a), &[1.0]).unwrap();
        assert_eq!(agg.q, a.gram());
        assert_eq!(agg.effective_rank, 2);
    }

    #[test]
    fn two_orthogonal_clients() {
        let a1 = Matrix::from_rows(&[[1.0, 0.0]]);
        let a2 = Matrix::from_rows(&[[0.0, 1.0]]);
        let agg = aggregate_gram(&[a1, a2], &uniform_weights(2)).unwrap();
        assert_eq!(agg.q, Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]));
        assert_eq!(agg.effective_rank, 2);
    }

    #[test]
    fn rank_bound_on_many_clients() {
        let mut rng = rng_for(9, 0);
        let locals: Vec<Matrix> = (0..20)
            .map(|_| Matrix::gaussian(4, 64, 1.0, &mut rng))
            .collect();
        let agg = aggregate_gram(&locals, &uniform_weights(20)).unwrap();
        assert!(agg.effective_rank <= 64);
        let few: Vec<Matrix> = locals[..3].to_vec();
        let agg = aggregate_gram(&few, &uniform_weights(3)).unwrap();
        assert_eq!(agg.effective_rank, 12);
    }

    #[test]
    fn mismatched_locals_and_bad_weights_are_rejected() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(matches!(
            aggregate_gram(&[a.clone(), b], &uniform_weights(2)),
            Err(Error::Shape { .. })
        ));
        assert!(aggregate_gram(&[a.clone(), a.clone()], &[0.7, 0.7]).is_err());
        assert!(aggregate_gram(&[], &[]).is_err());
    }

    #[test]
    fn nan_contamination_is_internal_error() {
        let mut a = Matrix::zeros(1, 2);
        a[(0, 0)] = f64::NAN;
        assert!(matches!(
            aggregate_gram(&[a], &[1.0]),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn identity_gram_gives_orthogonal_factor() {
        let agg = aggregate_gram(&[Matrix::identity(2)], &[1.0]).unwrap();
        let f = decompose(&agg);
        assert_eq!(f.a_tilde.shape(), (2, 2));
        assert!(orthonormality_defect(&f.a_tilde.transpose()) <= 1e-12);
    }

    #[test]
    fn rank_one_diagonal_gram() {
        // q = diag(4, 0) from a single row [2, 0]
        let agg = aggregate_gram(&[Matrix::from_rows(&[[2.0, 0.0]])], &[1.0]).unwrap();
        assert_eq!(agg.q, Matrix::from_diag(&[4.0, 0.0]));
        let f = decompose(&agg);
        assert_eq!(f.a_tilde, Matrix::from_rows(&[[2.0, 0.0]]));
        assert_eq!(f.rank(), 1);
    }

    #[test]
    fn zero_gram_decomposes_to_zero_row() {
        let agg = aggregate_gram(&[Matrix::zeros(2, 3)], &[1.0]).unwrap();
        assert_eq!(agg.effective_rank, 0);
        let f = decompose(&agg);
        assert_eq!(f.a_tilde, Matrix::zeros(1, 3));
        assert_eq!(f.rank(), 0);
    }

    #[test]
    fn random_factor_reconstructs_gram() {
        let mut rng = rng_for(21, 0);
        let locals: Vec<Matrix> = (0..5)
            .map(|_| Matrix::gaussian(3, 8, 0.7, &mut rng))
            .collect();
        let agg = aggregate_gram(&locals, &uniform_weights(5)).unwrap();
        let f = decompose(&agg);
        let err = f.gram().distance(&agg.q).unwrap() / agg.q.frobenius_norm();
        assert!(err <= 1e-9, "{err:e}");
        // rows mutually orthogonal
        let rr = f.a_tilde.matmul_t(&f.a_tilde).unwrap();
        for i in 0..rr.rows() {
            for j in 0..rr.cols() {
                if i != j {
                    assert!(rr[(i, j)].abs() <= 1e-12 * agg.q.frobenius_norm());
                }
            }
        }
    }

    #[test]
    fn truncation_keeps_energy_dominant_rows() {
        let q_rows = Matrix::from_diag(&[2.0, 1.0, 0.1]);
        let agg = aggregate_gram(&[q_rows], &[1.0]).unwrap();
        let f = decompose(&agg);
        let t = truncate_factor(&f, 2).unwrap();
        assert_eq!(t.eigenvalues, vec![4.0, 1.0]);
        assert!((t.truncation_loss - 0.01).abs() < 1e-15);
        let same = truncate_factor(&f, 4).unwrap();
        assert_eq!(same, f);
        assert_eq!(same.truncation_loss, 0.0);
        assert!(truncate_factor(&f, 0).is_err());
    }

    #[test]
    fn self_alignment_is_a_fixed_point() {
        let a = Matrix::from_rows(&[[3.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let f = CanonicalFactor {
            a_tilde: a.clone(),
            eigenvalues: vec![10.0, 1.0],
            truncation_loss: 0.0,
        };
        let p = procrustes_align(&a, &f).unwrap();
        assert!(p.a_next.distance(&a).unwrap() <= 1e-12);
        assert!(p.residual <= 1e-24);
        assert!(p.s_star.distance(&Matrix::identity(2)).unwrap() <= 1e-12);
    }

    #[test]
    fn one_dimensional_sign_flip() {
        let a_prev = Matrix::from_rows(&[[2.0, 0.0]]);
        let f = CanonicalFactor {
            a_tilde: Matrix::from_rows(&[[-2.0, 0.0]]),
            eigenvalues: vec![4.0],
            truncation_loss: 0.0,
        };
        let p = procrustes_align(&a_prev, &f).unwrap();
        assert_eq!(p.s_star, Matrix::from_rows(&[[-1.0]]));
        assert_eq!(p.a_next, a_prev);
        assert_eq!(p.residual, 0.0);
        assert_eq!(p.sigma_sum, 4.0);
    }

    #[test]
    fn orthogonal_row_spaces_use_degenerate_rule() {
        let a_prev = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
        let f = CanonicalFactor {
            a_tilde: Matrix::from_rows(&[[0.0, 2.0, 0.0]]),
            eigenvalues: vec![4.0],
            truncation_loss: 0.0,
        };
        let p = procrustes_align(&a_prev, &f).unwrap();
        assert_eq!(p.sigma_min_cross, 0.0);
        assert!(orthonormality_defect(&p.s_star) <= 1e-12);
        assert!((p.residual - 5.0).abs() < 1e-12);
        assert_eq!(procrustes_align(&a_prev, &f).unwrap(), p);
    }

    #[test]
    fn wider_factor_than_target_is_rejected() {
        let a_prev = Matrix::zeros(1, 3);
        let f = CanonicalFactor {
            a_tilde: Matrix::zeros(2, 3),
            eigenvalues: vec![0.0, 0.0],
            truncation_loss: 0.0,
        };
        assert!(matches!(
            procrustes_align(&a_prev, &f),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn trivial_alignment_has_nonnegative_drift() {
        let mut rng = rng_for(4, 0);
        let a_prev = Matrix::gaussian(3, 6, 1.0, &mut rng);
        let agg = aggregate_gram(&[Matrix::gaussian(2, 6, 1.0, &mut rng)], &[1.0]).unwrap();
        let f = decompose(&agg);
        let best = procrustes_align(&a_prev, &f).unwrap();
        let off = align_with(&a_prev, &f, &trivial_alignment(3, f.rows()), &best).unwrap();
        assert!(off.delta_proc > 0.0);
        assert!(best.objective >= off.objective);
    }

    #[test]
    fn assembled_weights() {
        let c = AdapterConfig {
            d_out: 2,
            d_in: 2,
            rank: 1,
            alpha: 1.0,
            init_scheme: InitScheme::SemiOrthogonal,
            seed: 0,
        };
        let w0 = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0]]);
        let s = AdapterState::from_parts(
            c,
            w0.clone(),
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::zeros(1, 2),
        )
        .unwrap();
        assert_eq!(assemble_full(&s, &Matrix::zeros(1, 2)).unwrap(), w0);
        let w = assemble_full(&s, &Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        assert_eq!(w, Matrix::from_rows(&[[1.5, -1.0], [2.0, 0.0]]));
        assert!(assemble_full(&s, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn square_layer_update_norm_is_unitarily_invariant() {
        let c = AdapterConfig {
            d_out: 6,
            d_in: 6,
            rank: 2,
            alpha: 16.0,
            init_scheme: InitScheme::SemiOrthogonal,
            seed: 8,
        };
        let s = init_adapter(c, Matrix::zeros(6, 6)).unwrap();
        let w = assemble_full(&s, &s.a).unwrap();
        let expect = c.scale() * s.a.gram().frobenius_norm();
        assert!((w.frobenius_norm() - expect).abs() <= 1e-12 * expect);
    }
}
