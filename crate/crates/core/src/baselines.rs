//! Two-matrix LoRA (`ΔW = (α/r)·B·A`) and the comparison aggregation rules.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{thin_svd, Matrix};
use crate::rng::{rng_for, stream};

/// Federation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeId {
    Florg,
    FedIt,
    FeDeRa,
    FfaLora,
    FedSaLora,
    FedExLora,
}

impl SchemeId {
    pub const ALL: [SchemeId; 6] = [
        SchemeId::Florg,
        SchemeId::FedIt,
        SchemeId::FeDeRa,
        SchemeId::FfaLora,
        SchemeId::FedSaLora,
        SchemeId::FedExLora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::Florg => "florg",
            SchemeId::FedIt => "fedit",
            SchemeId::FeDeRa => "federa",
            SchemeId::FfaLora => "ffa",
            SchemeId::FedSaLora => "fedsa",
            SchemeId::FedExLora => "fedex",
        }
    }

    pub fn is_lora(self) -> bool {
        self != SchemeId::Florg
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match key.as_str() {
            "florg" => SchemeId::Florg,
            "fedit" => SchemeId::FedIt,
            "federa" => SchemeId::FeDeRa,
            "ffa" | "ffalora" => SchemeId::FfaLora,
            "fedsa" | "fedsalora" => SchemeId::FedSaLora,
            "fedex" | "fedexlora" => SchemeId::FedExLora,
            _ => {
                return Err(format!(
                    "unknown scheme `{s}` (expected florg, fedit, federa, ffa, fedsa or fedex)"
                ))
            }
        })
    }
}

/// One LoRA-adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraState {
    w0: Arc<Matrix>,
    pub b: Matrix,
    pub a: Matrix,
    alpha: f64,
    rank: usize,
}

/// `b = 0`, `a` Gaussian with standard deviation `1/√d_in`, so `ΔW = 0`.
pub fn init_lora(w0: Matrix, rank: usize, alpha: f64, seed: u64) -> Result<LoraState> {
    let (d_out, d_in) = w0.shape();
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::contract(format!(
            "LoRA rank {rank} must lie in 1..={}",
            d_out.min(d_in)
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::contract(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let a = Matrix::gaussian(
        rank,
        d_in,
        1.0 / (d_in as f64).sqrt(),
        &mut rng_for(seed, stream::LORA_INIT),
    );
    Ok(LoraState {
        w0: Arc::new(w0),
        b: Matrix::zeros(d_out, rank),
        a,
        alpha,
        rank,
    })
}

impl LoraState {
    pub fn from_parts(w0: Matrix, b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        let rank = a.rows();
        if b.shape() != (d_out, rank) {
            return Err(Error::shape(
                "LoraState::from_parts",
                b.shape(),
                (d_out, rank),
            ));
        }
        if a.shape() != (rank, d_in) {
            return Err(Error::shape(
                "LoraState::from_parts",
                a.shape(),
                (rank, d_in),
            ));
        }
        Ok(LoraState {
            w0: Arc::new(w0),
            b,
            a,
            alpha,
            rank,
        })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    /// `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta_w(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("consistent LoRA shapes")
            .scale(self.scale())
    }

    /// `W⁰ + ΔW`.
    pub fn full_weight(&self) -> Matrix {
        self.w0
            .add(&self.delta_w())
            .expect("consistent LoRA shapes")
    }

    /// Same `W⁰`, new factors.
    pub fn with_factors(&self, b: Matrix, a: Matrix) -> Result<Self> {
        if b.shape() != self.b.shape() || a.shape() != self.a.shape() {
            return Err(Error::shape(
                "LoraState::with_factors",
                b.shape(),
                self.b.shape(),
            ));
        }
        Ok(LoraState {
            w0: Arc::clone(&self.w0),
            b,
            a,
            alpha: self.alpha,
            rank: self.rank,
        })
    }

    /// Fold `(α/r)·residual` into the frozen weight.
    pub fn fold_residual(&self, residual: &Matrix) -> Result<Self> {
        let mut w0 = (*self.w0).clone();
        w0.axpy(self.scale(), residual)?;
        Ok(LoraState {
            w0: Arc::new(w0),
            b: self.b.clone(),
            a: self.a.clone(),
            alpha: self.alpha,
            rank: self.rank,
        })
    }

    fn same_shape(&self, other: &LoraState) -> bool {
        self.b.shape() == other.b.shape() && self.a.shape() == other.a.shape()
    }
}

/// `(∇_B, ∇_A) = ((α/r)·G·Aᵀ, (α/r)·Bᵀ·G)`.
pub fn lora_grads(state: &LoraState, g_full: &Matrix) -> Result<(Matrix, Matrix)> {
    let want = state.w0.shape();
    if g_full.shape() != want {
        return Err(Error::shape("lora_grads", g_full.shape(), want));
    }
    let s = state.scale();
    let gb = g_full.matmul_t(&state.a)?.scale(s);
    let ga = state.b.t_matmul(g_full)?.scale(s);
    Ok((gb, ga))
}

/// SGD on both factors.
pub fn lora_step(state: &LoraState, g_full: &Matrix, eta: f64) -> Result<LoraState> {
    step(state, g_full, eta, true)
}

/// SGD on `b` only; `a` is carried over untouched.
pub fn ffa_step(state: &LoraState, g_full: &Matrix, eta: f64) -> Result<LoraState> {
    step(state, g_full, eta, false)
}

fn step(state: &LoraState, g_full: &Matrix, eta: f64, update_a: bool) -> Result<LoraState> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::contract(format!(
            "learning rate must be non-negative, got {eta}"
        )));
    }
    let (gb, ga) = lora_grads(state, g_full)?;
    if !gb.is_finite() || !ga.is_finite() {
        return Err(Error::diverged("non-finite LoRA gradient"));
    }
    let mut b = state.b.clone();
    b.axpy(-eta, &gb)?;
    let a = if update_a {
        let mut a = state.a.clone();
        a.axpy(-eta, &ga)?;
        a
    } else {
        state.a.clone()
    };
    if !b.is_finite() || !a.is_finite() {
        return Err(Error::diverged("non-finite LoRA factors after local step"));
    }
    state.with_factors(b, a)
}

fn check_states(states: &[LoraState], weights: &[f64]) -> Result<()> {
    let first = states
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one client"))?;
    if weights.len() != states.len() {
        return Err(Error::contract(format!(
            "{} weights for {} clients",
            weights.len(),
            states.len()
        )));
    }
    if let Some(bad) = states.iter().find(|s| !first.same_shape(s)) {
        return Err(Error::shape("aggregate", bad.b.shape(), first.b.shape()));
    }
    Ok(())
}

fn weighted_mean<'a>(mats: impl Iterator<Item = &'a Matrix>, weights: &[f64]) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for (m, &w) in mats.zip(weights) {
        match acc.as_mut() {
            None => acc = Some(m.scale(w)),
            Some(acc) => acc.axpy(w, m)?,
        }
    }
    acc.ok_or_else(|| Error::contract("aggregation needs at least one client"))
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Mean of the per-client products `bₙ·aₙ`.
pub fn mean_product(states: &[LoraState], weights: &[f64]) -> Result<Matrix> {
    check_states(states, weights)?;
    let products = states
        .iter()
        .map(|s| s.b.matmul(&s.a))
        .collect::<Result<Vec<_>>>()?;
    weighted_mean(products.iter(), weights)
}

/// Average `b` and `a` separately.
pub fn fedit_aggregate(states: &[LoraState]) -> Result<LoraState> {
    fedit_aggregate_weighted(states, &uniform(states.len()))
}

pub fn fedit_aggregate_weighted(states: &[LoraState], weights: &[f64]) -> Result<LoraState> {
    check_states(states, weights)?;
    let b = weighted_mean(states.iter().map(|s| &s.b), weights)?;
    let a = weighted_mean(states.iter().map(|s| &s.a), weights)?;
    states[0].with_factors(b, a)
}

/// Refactor the mean product by truncated SVD, splitting `Σ^{1/2}` between
/// the factors.
pub fn federa_aggregate(states: &[LoraState], target_r: usize) -> Result<LoraState> {
    federa_aggregate_weighted(states, target_r, &uniform(states.len()))
}

pub fn federa_aggregate_weighted(
    states: &[LoraState],
    target_r: usize,
    weights: &[f64],
) -> Result<LoraState> {
    let p = mean_product(states, weights)?;
    let rank = states[0].rank();
    if target_r == 0 || target_r > rank {
        return Err(Error::contract(format!(
            "target rank {target_r} must lie in 1..={rank}"
        )));
    }
    let svd = thin_svd(&p);
    let (d_out, d_in) = p.shape();
    let mut b = Matrix::zeros(d_out, rank);
    let mut a = Matrix::zeros(rank, d_in);
    for j in 0..target_r.min(svd.sigma.len()) {
        let root = svd.sigma[j].sqrt();
        for i in 0..d_out {
            b[(i, j)] = svd.u[(i, j)] * root;
        }
        for i in 0..d_in {
            a[(j, i)] = root * svd.v[(i, j)];
        }
    }
    states[0].with_factors(b, a)
}

/// Average `b`; the shared frozen `a` is taken from the first client.
pub fn ffa_aggregate(states: &[LoraState]) -> Result<LoraState> {
    ffa_aggregate_weighted(states, &uniform(states.len()))
}

pub fn ffa_aggregate_weighted(states: &[LoraState], weights: &[f64]) -> Result<LoraState> {
    check_states(states, weights)?;
    if states.iter().any(|s| s.a != states[0].a) {
        return Err(Error::contract(
            "frozen-A aggregation received clients with different A",
        ));
    }
    let b = weighted_mean(states.iter().map(|s| &s.b), weights)?;
    states[0].with_factors(b, states[0].a.clone())
}

/// Average `a` and broadcast it; every client keeps its own `b`.
pub fn fedsa_aggregate(states: &[LoraState]) -> Result<Vec<LoraState>> {
    fedsa_aggregate_weighted(states, &uniform(states.len()))
}

pub fn fedsa_aggregate_weighted(states: &[LoraState], weights: &[f64]) -> Result<Vec<LoraState>> {
    check_states(states, weights)?;
    let a = weighted_mean(states.iter().map(|s| &s.a), weights)?;
    states
        .iter()
        .map(|s| s.with_factors(s.b.clone(), a.clone()))
        .collect()
}

/// FedIT averages plus the product-space residual `mean(bₙaₙ) − b̄·ā`.
pub fn fedex_aggregate(states: &[LoraState]) -> Result<(LoraState, Matrix)> {
    fedex_aggregate_weighted(states, &uniform(states.len()))
}

pub fn fedex_aggregate_weighted(
    states: &[LoraState],
    weights: &[f64],
) -> Result<(LoraState, Matrix)> {
    let avg = fedit_aggregate_weighted(states, weights)?;
    let p = mean_product(states, weights)?;
    let residual = p.sub(&avg.b.matmul(&avg.a)?)?;
    Ok((avg, residual))
}

/// `||mean(bₙ)·mean(aₙ) − mean(bₙ·aₙ)||_F`.
pub fn aggregation_error(states: &[LoraState]) -> Result<f64> {
    aggregation_error_weighted(states, &uniform(states.len()))
}

pub fn aggregation_error_weighted(states: &[LoraState], weights: &[f64]) -> Result<f64> {
    let p = mean_product(states, weights)?;
    let b = weighted_mean(states.iter().map(|s| &s.b), weights)?;
    let a = weighted_mean(states.iter().map(|s| &s.a), weights)?;
    b.matmul(&a)?.distance(&p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(b: &[[f64; 1]], a: &[[f64; 2]]) -> LoraState {
        LoraState::from_parts(
            Matrix::zeros(2, 2),
            Matrix::from_rows(b),
            Matrix::from_rows(a),
            1.0,
        )
        .unwrap()
    }

    fn bias_pair() -> Vec<LoraState> {
        vec![
            state(&[[1.0], [0.0]], &[[1.0, 0.0]]),
            state(&[[0.0], [1.0]], &[[0.0, 1.0]]),
        ]
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in SchemeId::ALL {
            assert_eq!(s.to_string().parse::<SchemeId>().unwrap(), s);
        }
        assert_eq!("FFA-LoRA".parse::<SchemeId>().unwrap(), SchemeId::FfaLora);
        assert!("fedavg".parse::<SchemeId>().is_err());
    }

    #[test]
    fn init_has_zero_update() {
        let s = init_lora(Matrix::identity(4), 2, 16.0, 1).unwrap();
        assert_eq!(s.delta_w(), Matrix::zeros(4, 4));
        assert_eq!(s.full_weight(), Matrix::identity(4));
        assert!(s.a.frobenius_norm() > 0.0);
        assert!(init_lora(Matrix::identity(4), 5, 16.0, 1).is_err());
    }

    #[test]
    fn gradients_at_zero_b() {
        let s = init_lora(Matrix::zeros(3, 4), 2, 2.0, 5).unwrap();
        let g = Matrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64);
        let (gb, ga) = lora_grads(&s, &g).unwrap();
        assert_eq!(ga, Matrix::zeros(2, 4));
        assert_eq!(gb, g.matmul_t(&s.a).unwrap());
        let (gb, ga) = lora_grads(&s, &Matrix::zeros(3, 4)).unwrap();
        assert_eq!(gb.max_abs() + ga.max_abs(), 0.0);
        assert!(lora_grads(&s, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn ffa_step_freezes_a() {
        let s = init_lora(Matrix::zeros(3, 3), 1, 1.0, 2).unwrap();
        let g = Matrix::from_fn(3, 3, |i, j| (i as f64) - (j as f64) * 0.5);
        let mut cur = s.clone();
        for _ in 0..5 {
            cur = ffa_step(&cur, &g, 0.1).unwrap();
        }
        assert_eq!(cur.a, s.a);
        assert_ne!(cur.b, s.b);
        assert_eq!(ffa_step(&s, &Matrix::zeros(3, 3), 0.1).unwrap(), s);
    }

    #[test]
    fn identical_clients_aggregate_to_themselves() {
        let s = state(&[[1.0], [2.0]], &[[0.5, -1.0]]);
        let group = vec![s.clone(), s.clone(), s.clone()];
        assert_eq!(fedit_aggregate(&group).unwrap(), s);
        assert_eq!(aggregation_error(&group).unwrap(), 0.0);
        let (avg, res) = fedex_aggregate(&group).unwrap();
        assert_eq!(avg, s);
        assert_eq!(res, Matrix::zeros(2, 2));
        assert_eq!(fedsa_aggregate(&group).unwrap(), group);
    }

    #[test]
    fn bias_of_separate_averaging() {
        // mean(BA) = I/2, mean(B)·mean(A) = ones/4
        let err = aggregation_error(&bias_pair()).unwrap();
        let oracle = (2.0 * 0.25f64.powi(2) + 2.0 * 0.25f64.powi(2)).sqrt();
        assert!((err - oracle).abs() < 1e-15);
        assert!((err - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fedex_residual_restores_mean_product() {
        let group = bias_pair();
        let (avg, res) = fedex_aggregate(&group).unwrap();
        let total = avg.b.matmul(&avg.a).unwrap().add(&res).unwrap();
        assert!(total.distance(&Matrix::from_diag(&[0.5, 0.5])).unwrap() <= 1e-12);
        let folded = avg.fold_residual(&res).unwrap();
        assert!(
            folded
                .full_weight()
                .distance(&Matrix::from_diag(&[0.5, 0.5]))
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn federa_single_client_is_lossless() {
        let s = LoraState::from_parts(
            Matrix::zeros(3, 2),
            Matrix::from_rows(&[[1.0], [2.0], [-1.0]]),
            Matrix::from_rows(&[[3.0, 1.0]]),
            1.0,
        )
        .unwrap();
        let out = federa_aggregate(std::slice::from_ref(&s), 1).unwrap();
        let p = out.b.matmul(&out.a).unwrap();
        assert!(p.distance(&s.b.matmul(&s.a).unwrap()).unwrap() <= 1e-9);
    }

    #[test]
    fn federa_zero_clients_give_zero() {
        let z = LoraState::from_parts(
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 1),
            Matrix::zeros(1, 2),
            1.0,
        )
        .unwrap();
        let out = federa_aggregate(&[z.clone(), z], 1).unwrap();
        assert_eq!(out.b.max_abs() + out.a.max_abs(), 0.0);
    }

    #[test]
    fn ffa_aggregation_is_unbiased() {
        let a = Matrix::from_rows(&[[1.0, -2.0]]);
        let s1 = LoraState::from_parts(
            Matrix::zeros(2, 2),
            Matrix::from_rows(&[[1.0], [0.0]]),
            a.clone(),
            1.0,
        )
        .unwrap();
        let s2 = LoraState::from_parts(
            Matrix::zeros(2, 2),
            Matrix::from_rows(&[[0.0], [3.0]]),
            a.clone(),
            1.0,
        )
        .unwrap();
        let group = [s1, s2];
        let out = ffa_aggregate(&group).unwrap();
        assert_eq!(out.a, a);
        assert_eq!(aggregation_error(&group).unwrap(), 0.0);
        let mixed = [group[0].clone(), bias_pair()[1].clone()];
        assert!(ffa_aggregate(&mixed).is_err());
    }

    #[test]
    fn fedsa_keeps_local_b() {
        let group = bias_pair();
        let out = fedsa_aggregate(&group).unwrap();
        for (o, s) in out.iter().zip(&group) {
            assert_eq!(o.b, s.b);
            assert_eq!(o.a, Matrix::from_rows(&[[0.5, 0.5]]));
        }
    }

    #[test]
    fn empty_and_mixed_shapes_are_rejected() {
        assert!(fedit_aggregate(&[]).is_err());
        assert!(fedex_aggregate(&[]).is_err());
        let other = LoraState::from_parts(
            Matrix::zeros(3, 2),
            Matrix::zeros(3, 1),
            Matrix::zeros(1, 2),
            1.0,
        )
        .unwrap();
        assert!(fedit_aggregate(&[bias_pair()[0].clone(), other]).is_err());
    }
}
