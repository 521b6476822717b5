//! Single-matrix low-rank adapter.
//!
//! One adapted linear layer carries a frozen weight `W⁰`, frozen
//! semi-orthogonal bases `L` (`d_out x k`) and `R` (`k x d_in`), and a single
//! trainable `A` (`r x k`), where `k = min(d_in, d_out)`. The update is
//!
//! ```text
//! ΔW = (α / r) · L · AᵀA · R
//! ```
//!
//! so every client and the server only ever exchange `A`, and averaging
//! `AᵀA` across clients is linear.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::linalg::{orthonormal_columns_from, orthonormal_columns_with, thin_svd, Matrix};
use crate::rng::{rng_for, stream};

/// How the frozen bases `L` and `R` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Q factor of an i.i.d. Gaussian matrix.
    #[default]
    SemiOrthogonal,
    /// Kaiming-uniform entries, then column-orthonormalized.
    Kaiming,
    /// Leading singular subspaces of `W⁰`.
    Svd,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::SemiOrthogonal => "semi_orthogonal",
            InitScheme::Kaiming => "kaiming",
            InitScheme::Svd => "svd",
        })
    }
}

impl FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "semi_orthogonal" | "semiorthogonal" | "orthogonal" => Ok(InitScheme::SemiOrthogonal),
            "kaiming" => Ok(InitScheme::Kaiming),
            "svd" => Ok(InitScheme::Svd),
            other => Err(format!(
                "unknown init scheme `{other}` (expected semi_orthogonal, kaiming or svd)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub alpha: f64,
    pub init_scheme: InitScheme,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn k(&self) -> usize {
        self.d_in.min(self.d_out)
    }

    /// `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.d_in == 0 {
            return Err(Error::contract("adapter dimensions must be positive"));
        }
        if self.rank == 0 || self.rank > self.k() {
            return Err(Error::contract(format!(
                "adapter rank {} must lie in 1..={}",
                self.rank,
                self.k()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::contract(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-layer adapter state. The frozen parts are shared behind `Arc` and are
/// never mutated; only `a` is replaced between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    config: AdapterConfig,
    w0: Arc<Matrix>,
    l_basis: Arc<Matrix>,
    r_basis: Arc<Matrix>,
    pub a: Matrix,
}

/// Build the frozen bases and the initial `A`.
///
/// `A` starts Gaussian with standard deviation `1/√k`; the origin is a
/// stationary point of `A ↦ A(H + Hᵀ)`, so a zero start would never move.
pub fn init_adapter(config: AdapterConfig, w0: Matrix) -> Result<AdapterState> {
    config.validate()?;
    if w0.shape() != (config.d_out, config.d_in) {
        return Err(Error::shape(
            "init_adapter",
            w0.shape(),
            (config.d_out, config.d_in),
        ));
    }
    if !w0.is_finite() {
        return Err(Error::contract("frozen weight has non-finite entries"));
    }
    let k = config.k();
    let (l_basis, r_basis) = match config.init_scheme {
        InitScheme::SemiOrthogonal => {
            let l = orthonormal_columns_from(
                config.d_out,
                k,
                &mut rng_for(config.seed, stream::BASIS_LEFT),
            )?;
            let r = orthonormal_columns_from(
                config.d_in,
                k,
                &mut rng_for(config.seed, stream::BASIS_RIGHT),
            )?;
            (l, r.transpose())
        }
        InitScheme::Kaiming => {
            let l = kaiming_orthonormal(config.d_out, k, k, config.seed, stream::BASIS_LEFT)?;
            let r = kaiming_orthonormal(
                config.d_in,
                k,
                config.d_in,
                config.seed,
                stream::BASIS_RIGHT,
            )?;
            (l, r.transpose())
        }
        InitScheme::Svd => {
            let svd = thin_svd(&w0);
            (svd.u, svd.v.transpose())
        }
    };
    let a = Matrix::gaussian(
        config.rank,
        k,
        1.0 / (k as f64).sqrt(),
        &mut rng_for(config.seed, stream::ADAPTER_INIT),
    );
    Ok(AdapterState {
        config,
        w0: Arc::new(w0),
        l_basis: Arc::new(l_basis),
        r_basis: Arc::new(r_basis),
        a,
    })
}

fn kaiming_orthonormal(
    rows: usize,
    cols: usize,
    fan_in: usize,
    seed: u64,
    stream_id: u64,
) -> Result<Matrix> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound).map_err(|e| Error::Internal(e.to_string()))?;
    orthonormal_columns_with(rows, cols, dist, &mut rng_for(seed, stream_id))
}

impl AdapterState {
    /// Reassemble a state from its parts, checking shapes and orthonormality.
    pub fn from_parts(
        config: AdapterConfig,
        w0: Matrix,
        l_basis: Matrix,
        r_basis: Matrix,
        a: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.k();
        let expect = [
            ("w0", w0.shape(), (config.d_out, config.d_in)),
            ("l_basis", l_basis.shape(), (config.d_out, k)),
            ("r_basis", r_basis.shape(), (k, config.d_in)),
            ("a", a.shape(), (config.rank, k)),
        ];
        for (_, got, want) in expect {
            if got != want {
                return Err(Error::shape("AdapterState::from_parts", got, want));
            }
        }
        Ok(AdapterState {
            config,
            w0: Arc::new(w0),
            l_basis: Arc::new(l_basis),
            r_basis: Arc::new(r_basis),
            a,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn l_basis(&self) -> &Matrix {
        &self.l_basis
    }

    pub fn r_basis(&self) -> &Matrix {
        &self.r_basis
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    /// Same frozen parts, different trainable matrix.
    pub fn with_a(&self, a: Matrix) -> Result<Self> {
        if a.shape() != self.a.shape() {
            return Err(Error::shape(
                "AdapterState::with_a",
                a.shape(),
                self.a.shape(),
            ));
        }
        Ok(AdapterState {
            config: self.config,
            w0: Arc::clone(&self.w0),
            l_basis: Arc::clone(&self.l_basis),
            r_basis: Arc::clone(&self.r_basis),
            a,
        })
    }

    /// `ΔW` for an arbitrary `r x k` matrix in place of `self.a`.
    pub fn delta_w_for(&self, a: &Matrix) -> Result<Matrix> {
        if a.cols() != self.k() {
            return Err(Error::shape("delta_w", a.shape(), (self.rank(), self.k())));
        }
        // L·AᵀA·R evaluated as (L·Aᵀ)·(A·R); same product, r-dimensional middle
        let left = self.l_basis.matmul_t(a)?;
        let right = a.matmul(&self.r_basis)?;
        let mut dw = left.matmul(&right)?;
        dw.scale_in_place(self.config.scale());
        Ok(dw)
    }
}

/// `(α/r) · L · AᵀA · R`.
pub fn delta_w(state: &AdapterState) -> Matrix {
    state
        .delta_w_for(&state.a)
        .expect("state shapes are consistent")
}

/// Gradient with respect to `A` given the loss gradient `g_full` with respect
/// to the full weight: `(α/r) · A(H + Hᵀ)` with `H = Lᵀ · g_full · Rᵀ`.
pub fn grad_a(state: &AdapterState, g_full: &Matrix) -> Result<Matrix> {
    grad_a_at(state, &state.a, g_full)
}

pub(crate) fn grad_a_at(state: &AdapterState, a: &Matrix, g_full: &Matrix) -> Result<Matrix> {
    let c = &state.config;
    if g_full.shape() != (c.d_out, c.d_in) {
        return Err(Error::shape("grad_a", g_full.shape(), (c.d_out, c.d_in)));
    }
    let l = &*state.l_basis;
    let r = &*state.r_basis;
    // A·H = ((A·Lᵀ)·G)·Rᵀ and A·Hᵀ = ((A·R)·Gᵀ)·L, never forming the k x k H
    let al = a.matmul_t(l)?;
    let a_h = al.matmul(g_full)?.matmul_t(r)?;
    let ar = a.matmul(r)?;
    let a_ht = ar.matmul_t(g_full)?.matmul(l)?;
    let mut g = a_h.add(&a_ht)?;
    g.scale_in_place(c.scale());
    Ok(g)
}

/// One SGD step `A - η ∇_A F`. Returns the new `A`; `state` is untouched.
pub fn local_update(state: &AdapterState, g_full: &Matrix, eta: f64) -> Result<Matrix> {
    sgd_step(state, &state.a, g_full, eta)
}

pub(crate) fn sgd_step(
    state: &AdapterState,
    a: &Matrix,
    g_full: &Matrix,
    eta: f64,
) -> Result<Matrix> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::contract(format!(
            "learning rate must be non-negative, got {eta}"
        )));
    }
    let g = grad_a_at(state, a, g_full)?;
    if !g.is_finite() {
        return Err(Error::diverged("non-finite gradient of A"));
    }
    let mut next = a.clone();
    next.axpy(-eta, &g)?;
    if !next.is_finite() {
        return Err(Error::diverged("non-finite A after local step"));
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_defect;

    fn config(d_out: usize, d_in: usize, rank: usize) -> AdapterConfig {
        AdapterConfig {
            d_out,
            d_in,
            rank,
            alpha: 16.0,
            init_scheme: InitScheme::SemiOrthogonal,
            seed: 3,
        }
    }

    #[test]
    fn tall_layer_shapes_and_orthogonality() {
        let s = init_adapter(config(8, 6, 2), Matrix::zeros(8, 6)).unwrap();
        assert_eq!(s.k(), 6);
        assert_eq!(s.l_basis().shape(), (8, 6));
        assert_eq!(s.r_basis().shape(), (6, 6));
        assert_eq!(s.a.shape(), (2, 6));
        assert!(orthonormality_defect(s.l_basis()) <= 1e-10);
        assert!(orthonormality_defect(&s.r_basis().transpose()) <= 1e-10);
    }

    #[test]
    fn wide_layer_shapes_and_orthogonality() {
        let s = init_adapter(config(6, 8, 2), Matrix::zeros(6, 8)).unwrap();
        assert_eq!(s.k(), 6);
        assert_eq!(s.l_basis().shape(), (6, 6));
        assert_eq!(s.r_basis().shape(), (6, 8));
        assert!(orthonormality_defect(&s.r_basis().transpose()) <= 1e-10);
    }

    #[test]
    fn every_scheme_gives_orthonormal_bases() {
        let w0 = Matrix::from_fn(7, 5, |i, j| ((i * 5 + j) as f64).sin());
        for scheme in [
            InitScheme::SemiOrthogonal,
            InitScheme::Kaiming,
            InitScheme::Svd,
        ] {
            let mut c = config(7, 5, 2);
            c.init_scheme = scheme;
            let s = init_adapter(c, w0.clone()).unwrap();
            assert!(orthonormality_defect(s.l_basis()) <= 1e-10, "{scheme}");
            assert!(
                orthonormality_defect(&s.r_basis().transpose()) <= 1e-10,
                "{scheme}"
            );
        }
    }

    #[test]
    fn kaiming_differs_from_gaussian_bases() {
        let mut c = config(6, 6, 2);
        let a = init_adapter(c, Matrix::zeros(6, 6)).unwrap();
        c.init_scheme = InitScheme::Kaiming;
        let b = init_adapter(c, Matrix::zeros(6, 6)).unwrap();
        assert_ne!(a.l_basis(), b.l_basis());
    }

    #[test]
    fn svd_scheme_spans_leading_singular_subspace() {
        let w0 = Matrix::from_fn(6, 6, |i, j| {
            if i == j {
                10.0 - i as f64
            } else {
                0.01 * (i + j) as f64
            }
        });
        let mut c = config(6, 6, 2);
        c.init_scheme = InitScheme::Svd;
        let s = init_adapter(c, w0.clone()).unwrap();
        let svd = thin_svd(&w0);
        // columns of L agree with U up to sign
        for j in 0..6 {
            let d: f64 = (0..6).map(|i| s.l_basis()[(i, j)] * svd.u[(i, j)]).sum();
            assert!((d.abs() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_a_gives_zero_update_and_gradient() {
        let mut s = init_adapter(config(5, 5, 2), Matrix::zeros(5, 5)).unwrap();
        s.a = Matrix::zeros(2, 5);
        assert_eq!(delta_w(&s), Matrix::zeros(5, 5));
        let g = Matrix::from_fn(5, 5, |i, j| (i as f64) - (j as f64) * 0.3);
        assert_eq!(grad_a(&s, &g).unwrap(), Matrix::zeros(2, 5));
    }

    #[test]
    fn identity_bases_hand_computed_update() {
        let c = AdapterConfig {
            d_out: 2,
            d_in: 2,
            rank: 1,
            alpha: 1.0,
            init_scheme: InitScheme::SemiOrthogonal,
            seed: 0,
        };
        let s = AdapterState::from_parts(
            c,
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::from_rows(&[[1.0, 0.0]]),
        )
        .unwrap();
        assert_eq!(delta_w(&s), Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]));
    }

    #[test]
    fn update_is_psd_congruent() {
        let s = init_adapter(config(6, 4, 2), Matrix::zeros(6, 4)).unwrap();
        let back = s
            .l_basis()
            .t_matmul(&delta_w(&s))
            .unwrap()
            .matmul_t(s.r_basis())
            .unwrap()
            .scale(1.0 / s.config().scale());
        assert!(back.distance(&s.a.gram()).unwrap() <= 1e-12 * s.a.gram().frobenius_norm());
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let s = init_adapter(config(4, 4, 2), Matrix::zeros(4, 4)).unwrap();
        let next = local_update(&s, &Matrix::zeros(4, 4), 0.1).unwrap();
        assert_eq!(next, s.a);
    }

    #[test]
    fn step_length_is_eta_times_gradient_norm() {
        let s = init_adapter(config(4, 4, 2), Matrix::zeros(4, 4)).unwrap();
        let g_full = Matrix::from_fn(4, 4, |i, j| ((i + 2 * j) as f64).cos());
        let mut grad = grad_a(&s, &g_full).unwrap();
        let norm = grad.frobenius_norm();
        let g_unit = g_full.scale(1.0 / norm);
        grad.scale_in_place(1.0 / norm);
        assert!((grad.frobenius_norm() - 1.0).abs() < 1e-12);
        let eta = 5e-5;
        let next = local_update(&s, &g_unit, eta).unwrap();
        let moved = next.distance(&s.a).unwrap();
        assert!((moved - eta).abs() <= 1e-12 * eta, "{moved}");
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let s = init_adapter(config(3, 3, 1), Matrix::zeros(3, 3)).unwrap();
        let mut g = Matrix::zeros(3, 3);
        g[(0, 0)] = f64::INFINITY;
        assert!(local_update(&s, &g, 0.1).unwrap_err().is_divergence());
    }

    #[test]
    fn w0_shape_is_checked() {
        assert!(matches!(
            init_adapter(config(4, 3, 1), Matrix::zeros(3, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        assert!(init_adapter(config(4, 3, 4), Matrix::zeros(4, 3)).is_err());
        assert!(init_adapter(config(4, 3, 0), Matrix::zeros(4, 3)).is_err());
    }
}
