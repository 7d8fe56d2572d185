//! Smooth projection and the three weight-estimate update laws.
//!
//! Each law has the form `θ̂̇ = proj(γ(Φ′ᵀ·v − σθ̂))` where `v = e` for the
//! drift and cross-term networks and `v = ½eᵀe` for the scalar diffusion
//! network.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, Matrix};

/// Learning rates, forgetting factors and projection radii of the three
/// networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptGains {
    pub gamma: [f64; 3],
    pub sigma: [f64; 3],
    pub theta_bar: [f64; 3],
    #[serde(default = "default_eps_proj")]
    pub eps_proj: f64,
}

fn default_eps_proj() -> f64 {
    0.1
}

impl AdaptGains {
    pub fn validate(&self) -> Result<()> {
        let all = self.gamma.iter().chain(&self.sigma).chain(&self.theta_bar);
        if all.clone().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "learning rates, forgetting factors and projection radii must be positive".into(),
            ));
        }
        if !(self.eps_proj > 0.0 && self.eps_proj <= 0.5) {
            return Err(Error::InvalidParameter(format!(
                "eps_proj must lie in (0, 0.5], got {}",
                self.eps_proj
            )));
        }
        Ok(())
    }

    /// Hard bound `θ̄(1 + ε)` kept by the projection for network `l`.
    pub fn outer_radius(&self, l: usize) -> f64 {
        self.theta_bar[l] * (1.0 + self.eps_proj)
    }
}

/// Current weight estimates `θ̂_1, θ̂_2, θ̂_3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub theta: [Vec<f64>; 3],
}

impl ControllerState {
    pub fn new(theta1: Vec<f64>, theta2: Vec<f64>, theta3: Vec<f64>) -> Self {
        ControllerState {
            theta: [theta1, theta2, theta3],
        }
    }

    pub fn norms(&self) -> [f64; 3] {
        [
            linalg::norm(&self.theta[0]),
            linalg::norm(&self.theta[1]),
            linalg::norm(&self.theta[2]),
        ]
    }

    /// `θ̃_l = θ*_l − θ̂_l`
    pub fn estimation_error(&self, ideal: &[Vec<f64>; 3]) -> Result<[Vec<f64>; 3]> {
        let mut out: [Vec<f64>; 3] = Default::default();
        for l in 0..3 {
            check_len("estimation_error", self.theta[l].len(), ideal[l].len())?;
            out[l] = ideal[l]
                .iter()
                .zip(&self.theta[l])
                .map(|(s, h)| s - h)
                .collect();
        }
        Ok(out)
    }
}

/// Smooth radial projection.
///
/// With the convex boundary function `f(θ) = (θᵀθ − θ̄²)/(εθ̄²(2+ε))`,
/// which is `0` on `‖θ‖ = θ̄` and `1` on `‖θ‖ = θ̄(1+ε)`, returns `μ` unless
/// `f(θ̂) > 0` and `θ̂ᵀμ > 0`, in which case the outward radial component
/// of `μ` is scaled down by `1 − f(θ̂)`.
pub fn proj(theta_hat: &[f64], mu: &[f64], theta_bar: f64, eps: f64) -> Vec<f64> {
    let mut out = mu.to_vec();
    proj_in_place(theta_hat, &mut out, theta_bar, eps);
    out
}

/// In-place form of [`proj`]: `mu` is overwritten with `proj(θ̂, μ)`.
pub fn proj_in_place(theta_hat: &[f64], mu: &mut [f64], theta_bar: f64, eps: f64) {
    debug_assert_eq!(theta_hat.len(), mu.len());
    let nsq = linalg::norm_sq(theta_hat);
    let bar_sq = theta_bar * theta_bar;
    let f = (nsq - bar_sq) / (eps * bar_sq * (2.0 + eps));
    if f <= 0.0 {
        return;
    }
    // ∇f ∝ θ̂, so ∇f∇fᵀ/‖∇f‖² = θ̂θ̂ᵀ/‖θ̂‖².
    let radial = linalg::dot(theta_hat, mu);
    if radial <= 0.0 {
        return;
    }
    linalg::axpy(-f * radial / nsq, theta_hat, mu);
}

/// Update-law rates from explicit gradient matrices `Φ′_1` (`n×p_1`),
/// `Φ′_2` (`1×p_2`) and `Φ′_3` (`n×p_3`).
pub fn update_rates(
    state: &ControllerState,
    e: &[f64],
    grads: [&Matrix; 3],
    gains: &AdaptGains,
) -> Result<[Vec<f64>; 3]> {
    check_len("update_rates Φ′_1 rows", e.len(), grads[0].rows())?;
    check_len("update_rates Φ′_2 rows", 1, grads[1].rows())?;
    check_len("update_rates Φ′_3 rows", e.len(), grads[2].rows())?;
    let half_e_sq = [0.5 * linalg::norm_sq(e)];
    let weights: [&[f64]; 3] = [e, &half_e_sq, e];
    let mut rates: [Vec<f64>; 3] = Default::default();
    for l in 0..3 {
        check_len("update_rates parameters", state.theta[l].len(), grads[l].cols())?;
        let signal = grads[l].tr_mul_vec(weights[l])?;
        rates[l] = vec![0.0; signal.len()];
        rate_from_signal(l, &state.theta[l], &signal, gains, &mut rates[l]);
    }
    Ok(rates)
}

/// `out ← proj(γ_l·signal − γ_l·σ_l·θ̂_l)` where `signal = Φ′_lᵀ·v`.
pub fn rate_from_signal(
    l: usize,
    theta_hat: &[f64],
    signal: &[f64],
    gains: &AdaptGains,
    out: &mut [f64],
) {
    let g = gains.gamma[l];
    let gs = g * gains.sigma[l];
    for ((o, &s), &t) in out.iter_mut().zip(signal).zip(theta_hat) {
        *o = g * s - gs * t;
    }
    proj_in_place(theta_hat, out, gains.theta_bar[l], gains.eps_proj);
}

/// Explicit Euler step `θ̂ ← θ̂ + Δt·θ̂̇` followed by a radial clamp to
/// `‖θ̂‖ ≤ θ̄(1+ε)`. The clamp is inactive away from the outer shell.
pub fn step_weights(
    state: &ControllerState,
    rates: &[Vec<f64>; 3],
    dt: f64,
    gains: &AdaptGains,
) -> ControllerState {
    let mut next = state.clone();
    step_weights_in_place(&mut next, rates, dt, gains);
    next
}

pub fn step_weights_in_place(
    state: &mut ControllerState,
    rates: &[Vec<f64>; 3],
    dt: f64,
    gains: &AdaptGains,
) {
    for l in 0..3 {
        let theta = &mut state.theta[l];
        linalg::axpy(dt, &rates[l], theta);
        clamp_norm(theta, gains.outer_radius(l));
    }
}

fn clamp_norm(theta: &mut [f64], radius: f64) {
    let n = linalg::norm(theta);
    if n > radius {
        let s = radius / n;
        theta.iter_mut().for_each(|t| *t *= s);
    }
}
