//! Tracking error and the DNN-compensated feedback law
//! `u = g₁⁺(ẋ_d − k_e·e − Φ₁ − ½e·Φ₂ − Φ₃)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, Matrix};

/// A smooth reference `x_d(t)` with known bounds on `‖x_d‖` and `‖ẋ_d‖`.
pub trait DesiredTrajectory: Send + Sync {
    fn dim(&self) -> usize;
    fn position(&self, t: f64, out: &mut [f64]);
    fn velocity(&self, t: f64, out: &mut [f64]);
    /// `(x̄_d, x̄̇_d)`
    fn bounds(&self) -> (f64, f64);

    fn position_vec(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.position(t, &mut v);
        v
    }

    fn velocity_vec(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.velocity(t, &mut v);
        v
    }
}

/// Checks the declared bounds on a uniform grid over `[0, horizon]`.
/// Returns the observed maxima of `‖x_d‖` and `‖ẋ_d‖` when they hold.
pub fn check_trajectory_bounds(
    traj: &dyn DesiredTrajectory,
    horizon: f64,
    step: f64,
) -> Result<(f64, f64)> {
    let (xb, vb) = traj.bounds();
    let n = (horizon / step).ceil() as usize;
    let mut p = vec![0.0; traj.dim()];
    let mut v = vec![0.0; traj.dim()];
    let (mut pmax, mut vmax) = (0.0_f64, 0.0_f64);
    for i in 0..=n {
        let t = (i as f64 * step).min(horizon);
        traj.position(t, &mut p);
        traj.velocity(t, &mut v);
        pmax = pmax.max(linalg::norm(&p));
        vmax = vmax.max(linalg::norm(&v));
    }
    let slack = 1e-12;
    if pmax > xb + slack || vmax > vb + slack {
        return Err(Error::InvalidParameter(format!(
            "desired trajectory exceeds its bounds: ‖x_d‖ ≤ {pmax} (bound {xb}), ‖ẋ_d‖ ≤ {vmax} (bound {vb})"
        )));
    }
    Ok((pmax, vmax))
}

/// Constant set-point; mostly useful for regulation tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantTrajectory(pub Vec<f64>);

impl DesiredTrajectory for ConstantTrajectory {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn position(&self, _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }

    fn velocity(&self, _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn bounds(&self) -> (f64, f64) {
        (linalg::norm(&self.0), 0.0)
    }
}

/// One `amplitude·sin(frequency·t + phase)` term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineTerm {
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Per-component sums of sinusoids plus an offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidComponent {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub terms: Vec<SineTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SinusoidTrajectory {
    pub components: Vec<SinusoidComponent>,
}

impl DesiredTrajectory for SinusoidTrajectory {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn position(&self, t: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.offset
                + c.terms
                    .iter()
                    .map(|s| s.amplitude * (s.frequency * t + s.phase).sin())
                    .sum::<f64>();
        }
    }

    fn velocity(&self, t: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c
                .terms
                .iter()
                .map(|s| s.amplitude * s.frequency * (s.frequency * t + s.phase).cos())
                .sum();
        }
    }

    fn bounds(&self) -> (f64, f64) {
        let p: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.offset.abs() + c.terms.iter().map(|s| s.amplitude.abs()).sum::<f64>())
            .collect();
        let v: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.terms.iter().map(|s| (s.amplitude * s.frequency).abs()).sum())
            .collect();
        (linalg::norm(&p), linalg::norm(&v))
    }
}

/// Outputs of the three networks at the current state and estimates.
#[derive(Clone, Copy, Debug)]
pub struct NetworkOutputs<'a> {
    pub phi1: &'a [f64],
    pub phi2: f64,
    pub phi3: &'a [f64],
}

/// `e = x − x_d`
pub fn tracking_error(x: &[f64], x_d: &[f64]) -> Result<Vec<f64>> {
    check_len("tracking_error", x.len(), x_d.len())?;
    Ok(x.iter().zip(x_d).map(|(a, b)| a - b).collect())
}

/// Lb-DNN controller. Computes `g₁⁺` on every call; the simulator caches it
/// and uses [`control_input_with_pinv`].
pub fn control_input(
    x: &[f64],
    x_d: &[f64],
    x_d_dot: &[f64],
    k_e: f64,
    nets: NetworkOutputs<'_>,
    g1: &Matrix,
) -> Result<Vec<f64>> {
    let e = tracking_error(x, x_d)?;
    check_len("control_input x_d_dot", e.len(), x_d_dot.len())?;
    check_len("control_input Φ₁", e.len(), nets.phi1.len())?;
    check_len("control_input Φ₃", e.len(), nets.phi3.len())?;
    check_len("control_input g₁ rows", e.len(), g1.rows())?;
    let pinv = linalg::pinv_right(g1)?;
    let mut u = vec![0.0; g1.cols()];
    let mut scratch = vec![0.0; e.len()];
    control_input_with_pinv(&e, x_d_dot, k_e, nets, &pinv, &mut scratch, &mut u);
    Ok(u)
}

/// Hot-path form: `e` precomputed, `pinv = g₁⁺` (`r×n`), `scratch` of
/// length `n`, result in `u` (length `r`).
pub fn control_input_with_pinv(
    e: &[f64],
    x_d_dot: &[f64],
    k_e: f64,
    nets: NetworkOutputs<'_>,
    pinv: &Matrix,
    scratch: &mut [f64],
    u: &mut [f64],
) {
    let half_phi2 = 0.5 * nets.phi2;
    for i in 0..e.len() {
        scratch[i] = x_d_dot[i] - k_e * e[i] - nets.phi1[i] - half_phi2 * e[i] - nets.phi3[i];
    }
    u.iter_mut().for_each(|v| *v = 0.0);
    for (k, &s) in scratch.iter().enumerate() {
        for (ui, &p) in u.iter_mut().zip(pinv.column(k)) {
            *ui += p * s;
        }
    }
}
