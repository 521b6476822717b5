//! Runtime evaluation of the convergence bound's terms.
//!
//! The bound's constants are not known for a concrete run, so they are
//! replaced by running empirical estimates: `ψ` by the largest observed
//! `‖∇_A F‖²`, `C_A` and `C̃_A` by the largest `‖Aᵗ‖_F` and `‖Ãᵗ‖_F`, the
//! smoothness `L` by the task's curvature estimate, and `f*` by 0.

use crate::error::{Error, Result};

/// Below this the drift denominator is treated as zero.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// What the round loop measured in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundObservation {
    pub round: usize,
    /// Smallest positive eigenvalue of `(Aᵗ)ᵀAᵗ` at the start of the round.
    pub lambda_min: f64,
    pub delta_proc: f64,
    pub sigma_min_cross: f64,
    pub grad_norm_sq: f64,
    /// `max(‖Aᵗ‖_F, ‖Aᵗ⁺¹‖_F)`.
    pub a_norm: f64,
    pub a_tilde_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub eta: f64,
    pub smoothness: f64,
    pub num_clients: usize,
    /// `f(W¹)`.
    pub initial_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRecord {
    pub round: usize,
    pub lambda_min: f64,
    pub running_lambda_min: f64,
    /// `4η·min_t λ_min − η²/2 − η/2`.
    pub omega: f64,
    pub delta_proc: f64,
    pub sigma_min_cross: f64,
    pub psi: f64,
    pub c_a: f64,
    pub c_tilde_a: f64,
    /// `(f(W¹) − f*) / (TΩ)`.
    pub gap_term: Option<f64>,
    /// `η²ψ²/(2Ω) + 3Lη²ψ(η²ψ + 2C_A²)/(2Ω)`.
    pub residual_term: Option<f64>,
    /// `(1/(TΩ)) Σₜ 2ηψ C̃_A² Δₜ / (N σₜ)`.
    pub drift_term: Option<f64>,
    /// `false` flags a vacuous bound.
    pub omega_positive: bool,
    /// `false` once some round had drift with a denominator below
    /// [`SIGMA_FLOOR`].
    pub drift_defined: bool,
}

pub fn omega(eta: f64, lambda_min: f64) -> f64 {
    4.0 * eta * lambda_min - eta * eta / 2.0 - eta / 2.0
}

/// One record per observed round; the bound terms use constants estimated
/// from rounds `1..=t`.
pub fn bound_diagnostics(
    history: &[RoundObservation],
    consts: &BoundConstants,
) -> Result<Vec<BoundRecord>> {
    if history.is_empty() {
        return Err(Error::contract(
            "bound diagnostics need at least one completed round",
        ));
    }
    let eta = consts.eta;
    let n = consts.num_clients as f64;
    let mut out = Vec::with_capacity(history.len());
    let mut min_lambda = f64::INFINITY;
    let (mut psi, mut c_a, mut c_tilde) = (0.0f64, 0.0f64, 0.0f64);
    // drift sum without the ψ C̃_A² factor, which is applied with the current estimates
    let mut drift_ratio_sum = 0.0;
    let mut drift_defined = true;
    for (t, obs) in history.iter().enumerate() {
        if obs.lambda_min.is_finite() {
            min_lambda = min_lambda.min(obs.lambda_min);
        }
        psi = psi.max(obs.grad_norm_sq);
        c_a = c_a.max(obs.a_norm);
        c_tilde = c_tilde.max(obs.a_tilde_norm);
        if obs.delta_proc > 0.0 {
            if obs.sigma_min_cross >= SIGMA_FLOOR {
                drift_ratio_sum += obs.delta_proc / obs.sigma_min_cross;
            } else {
                drift_defined = false;
            }
        }
        let lam = if min_lambda.is_finite() {
            min_lambda
        } else {
            0.0
        };
        let om = omega(eta, lam);
        let rounds = (t + 1) as f64;
        let positive = om > 0.0;
        let (gap, residual, drift) = if positive {
            let gap = consts.initial_loss.max(0.0) / (rounds * om);
            let l = consts.smoothness;
            let residual = eta * eta * psi * psi / (2.0 * om)
                + 3.0 * l * eta * eta * psi * (eta * eta * psi + 2.0 * c_a * c_a) / (2.0 * om);
            let drift = drift_defined
                .then(|| 2.0 * eta * psi * c_tilde * c_tilde * drift_ratio_sum / (n * rounds * om));
            (Some(gap), Some(residual), drift)
        } else {
            (None, None, None)
        };
        out.push(BoundRecord {
            round: obs.round,
            lambda_min: obs.lambda_min,
            running_lambda_min: lam,
            omega: om,
            delta_proc: obs.delta_proc,
            sigma_min_cross: obs.sigma_min_cross,
            psi,
            c_a,
            c_tilde_a: c_tilde,
            gap_term: gap,
            residual_term: residual,
            drift_term: drift,
            omega_positive: positive,
            drift_defined,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(round: usize, delta: f64, sigma: f64) -> RoundObservation {
        RoundObservation {
            round,
            lambda_min: 0.5,
            delta_proc: delta,
            sigma_min_cross: sigma,
            grad_norm_sq: 4.0,
            a_norm: 1.0,
            a_tilde_norm: 1.0,
        }
    }

    const CONSTS: BoundConstants = BoundConstants {
        eta: 0.1,
        smoothness: 2.0,
        num_clients: 2,
        initial_loss: 3.0,
    };

    #[test]
    fn omega_formula() {
        assert!((omega(0.1, 0.5) - (0.2 - 0.005 - 0.05)).abs() < 1e-15);
        assert_eq!(omega(0.0, 1.0), 0.0);
    }

    #[test]
    fn hand_evaluated_terms() {
        let r = bound_diagnostics(&[obs(1, 0.2, 0.5)], &CONSTS).unwrap();
        let om = 0.145;
        let r = r[0];
        assert!(r.omega_positive);
        assert!((r.gap_term.unwrap() - 3.0 / om).abs() < 1e-12);
        let residual =
            0.01 * 16.0 / (2.0 * om) + 3.0 * 2.0 * 0.01 * 4.0 * (0.01 * 4.0 + 2.0) / (2.0 * om);
        assert!((r.residual_term.unwrap() - residual).abs() < 1e-12);
        let drift = 2.0 * 0.1 * 4.0 * 1.0 * (0.2 / 0.5) / (2.0 * om);
        assert!((r.drift_term.unwrap() - drift).abs() < 1e-12);
    }

    #[test]
    fn zero_drift_gives_zero_term() {
        let r = bound_diagnostics(&[obs(1, 0.0, 0.0), obs(2, 0.0, 0.3)], &CONSTS).unwrap();
        assert!(r.iter().all(|x| x.drift_term == Some(0.0)));
    }

    #[test]
    fn drift_with_vanishing_denominator_is_undefined() {
        let r = bound_diagnostics(&[obs(1, 0.1, 1e-12), obs(2, 0.0, 1.0)], &CONSTS).unwrap();
        assert!(r.iter().all(|x| !x.drift_defined && x.drift_term.is_none()));
        assert!(r[0].gap_term.is_some());
    }

    #[test]
    fn zero_learning_rate_is_flagged() {
        let c = BoundConstants { eta: 0.0, ..CONSTS };
        let r = bound_diagnostics(&[obs(1, 0.0, 1.0)], &c).unwrap();
        assert!(!r[0].omega_positive);
        assert!(r[0].gap_term.is_none());
    }

    #[test]
    fn empty_history_is_rejected() {
        assert!(bound_diagnostics(&[], &CONSTS).is_err());
    }
}
