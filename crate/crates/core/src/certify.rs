//! Stability-certificate arithmetic and a Monte-Carlo check of the
//! sup-exceedance probability bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptGains;
use crate::control::DesiredTrajectory;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::sde::SystemModel;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

/// `V_L = ½eᵀe + ½Σ_ℓ θ̃_ℓᵀθ̃_ℓ/γ_ℓ`
pub fn lyapunov_value(e: &[f64], theta_tilde: [&[f64]; 3], gamma: [f64; 3]) -> f64 {
    let mut v = 0.5 * linalg::norm_sq(e);
    for l in 0..3 {
        v += 0.5 * linalg::norm_sq(theta_tilde[l]) / gamma[l];
    }
    v
}

/// `(α₁, α₂)` with `α₁‖z‖² ≤ V_L(z) ≤ α₂‖z‖²`.
pub fn alpha_bounds(gamma: [f64; 3]) -> (f64, f64) {
    let inv = gamma.map(|g| 1.0 / g);
    let lo = inv.iter().fold(1.0_f64, |a, &b| a.min(b));
    let hi = inv.iter().fold(1.0_f64, |a, &b| a.max(b));
    (0.5 * lo, hi)
}

/// User-supplied bounds on quantities that are only known to exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundEstimates {
    /// `Δ₁, Δ₂, Δ₃`
    pub delta: [f64; 3],
    /// `ε̄₁, ε̄₂, ε̄₃`
    pub eps_bar: [f64; 3],
    /// bound on `‖vec(g₂(x_d))‖`
    pub g_bar: f64,
    /// `‖ΣΣᵀ‖_∞`
    pub sigma_inf: f64,
    /// `‖Σ‖²_{F∞}`
    pub sigma_f_inf_sq: f64,
    /// domain radius `χ`
    pub chi: f64,
}

impl BoundEstimates {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .delta
            .iter()
            .chain(&self.eps_bar)
            .chain([&self.g_bar, &self.sigma_inf, &self.sigma_f_inf_sq]);
        if all.into_iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("bound estimates must be non-negative".into()));
        }
        if !(self.chi.is_finite() && self.chi > 0.0) {
            return Err(Error::InvalidParameter(format!("chi must be positive, got {}", self.chi)));
        }
        Ok(())
    }
}

/// Which `α` divides the minimum in `c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CDivisor {
    #[default]
    Alpha1,
    Alpha2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub b: f64,
    pub c: f64,
}

pub fn check_gain_condition(k_e: f64, delta2: f64, eps_bar2: f64) -> bool {
    k_e > 0.5 + 0.5 * (delta2 + eps_bar2)
}

/// `b = ½(Δ₁+Δ₃)² + ½‖ΣΣᵀ‖_∞ḡ² + Σσ_ℓθ̄_ℓ²/2` and
/// `c = min{k_e − ½ − ½(Δ₂+ε̄₂), σ₁, σ₂}/α`.
pub fn compute_constants(
    est: &BoundEstimates,
    gains: &AdaptGains,
    k_e: f64,
    divisor: CDivisor,
) -> Result<Constants> {
    let b = constant_b(est, gains);
    let margin = k_e - 0.5 - 0.5 * (est.delta[1] + est.eps_bar[1]);
    let (a1, a2) = alpha_bounds(gains.gamma);
    let alpha = match divisor {
        CDivisor::Alpha1 => a1,
        CDivisor::Alpha2 => a2,
    };
    let c = margin.min(gains.sigma[0]).min(gains.sigma[1]) / alpha;
    if c > 0.0 {
        Ok(Constants { b, c })
    } else {
        Err(Error::Infeasible(format!(
            "gain condition violated: k_e − ½ − ½(Δ₂+ε̄₂) = {margin}, so c = {c} ≤ 0"
        )))
    }
}

fn constant_b(est: &BoundEstimates, gains: &AdaptGains) -> f64 {
    let d13 = est.delta[0] + est.delta[2];
    let forgetting: f64 = (0..3)
        .map(|l| 0.5 * gains.sigma[l] * gains.theta_bar[l] * gains.theta_bar[l])
        .sum();
    0.5 * d13 * d13 + 0.5 * est.sigma_inf * est.g_bar * est.g_bar + forgetting
}

/// Smallest `χ` passing [`check_feasibility`].
pub fn feasibility_threshold(alpha1: f64, alpha2: f64, b: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Infeasible(format!("c must be positive, got {c}")));
    }
    let ratio = alpha2 / alpha1;
    Ok((ratio * b / c).sqrt() * (ratio + 1.0).sqrt())
}

/// `χ ≥ √((α₂/α₁)(b/c))·√(α₂/α₁ + 1)`
pub fn check_feasibility(chi: f64, alpha1: f64, alpha2: f64, b: f64, c: f64) -> Result<bool> {
    Ok(chi >= feasibility_threshold(alpha1, alpha2, b, c)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetRadii {
    /// stabilizing initial conditions
    pub s: f64,
    /// ultimate ball
    pub b: f64,
    /// domain
    pub d: f64,
}

impl SetRadii {
    pub fn chain_holds(&self) -> bool {
        self.b <= self.s && self.s <= self.d
    }
}

/// `r_S = √(1/α₂)·√((α₁/α₂)χ² − b/c)`, `r_B = √(λ/α₁)`, `r_D = χ`.
pub fn set_radii(chi: f64, alpha1: f64, alpha2: f64, b: f64, c: f64, lambda: f64) -> Result<SetRadii> {
    if !(c > 0.0) {
        return Err(Error::Infeasible(format!("c must be positive, got {c}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let radicand = alpha1 / alpha2 * chi * chi - b / c;
    if radicand < 0.0 {
        return Err(Error::Infeasible(format!(
            "set S is empty: (α₁/α₂)χ² − b/c = {radicand}"
        )));
    }
    Ok(SetRadii {
        s: (radicand / alpha2).sqrt(),
        b: (lambda / alpha1).sqrt(),
        d: chi,
    })
}

/// `ϑ(t) = V₀/m + (V₀/λ)e^{−ct} + b/(cλ)`
pub fn escape_risk(v0: f64, m: f64, lambda: f64, b: f64, c: f64, t: f64) -> f64 {
    v0 / m + v0 / lambda * (-c * t).exp() + b / (c * lambda)
}

/// `V₀/m + (V₀/λ)e^{−κ₁t} + κ₂/(κ₁λ)`, unclipped.
pub fn lemma1_bound(v0: f64, m: f64, lambda: f64, kappa1: f64, kappa2: f64, t: f64) -> f64 {
    v0 / m + v0 / lambda * (-kappa1 * t).exp() + kappa2 / (kappa1 * lambda)
}

pub fn clip_probability(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Time-grid maxima of `‖Σ(t)Σ(t)ᵀ‖₂` and `‖Σ(t)‖²_F` over `[0, horizon]`.
pub fn covariance_norms(model: &dyn SystemModel, horizon: f64, step: f64) -> Result<(f64, f64)> {
    let s = model.noise_dim();
    let mut sigma = Matrix::zeros(s, s);
    let n = (horizon / step).round() as usize;
    let (mut inf, mut fro) = (0.0_f64, 0.0_f64);
    for i in 0..=n {
        model.covariance(i as f64 * step, &mut sigma);
        let sst = sigma.matmul(&sigma.transpose())?;
        let (eig, _) = linalg::symmetric_eigen(&sst)?;
        inf = inf.max(eig.iter().fold(0.0_f64, |a, &b| a.max(b.abs())));
        fro = fro.max(linalg::norm_sq(sigma.as_slice()));
    }
    Ok((inf, fro))
}

/// `max_t ‖vec(g₂(x_d(t)))‖` on a uniform grid over `[0, horizon]`.
pub fn g_bar(model: &dyn SystemModel, traj: &dyn DesiredTrajectory, horizon: f64, step: f64) -> f64 {
    let mut g2 = Matrix::zeros(model.state_dim(), model.noise_dim());
    let mut xd = vec![0.0; traj.dim()];
    let n = (horizon / step).round() as usize;
    (0..=n)
        .map(|i| {
            traj.position(i as f64 * step, &mut xd);
            model.diffusion(&xd, &mut g2);
            linalg::frobenius_norm(&g2)
        })
        .fold(0.0, f64::max)
}

/// Conservative `V_L(z(0))` when `θ*` is unknown: `‖θ̃_ℓ‖ ≤ θ̄_ℓ + ‖θ̂_ℓ(0)‖`.
pub fn initial_lyapunov_upper(e0: &[f64], theta0_norms: [f64; 3], gains: &AdaptGains) -> f64 {
    let mut v = 0.5 * linalg::norm_sq(e0);
    for l in 0..3 {
        let r = gains.theta_bar[l] + theta0_norms[l];
        v += 0.5 * r * r / gains.gamma[l];
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateInputs {
    pub estimates: BoundEstimates,
    pub gains: AdaptGains,
    pub k_e: f64,
    /// `V_L(z(0))`
    pub v0: f64,
    /// defaults to `b/c`
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub c_divisor: CDivisor,
    /// final time of the `ϑ(t)` curve
    pub curve_horizon: f64,
    pub curve_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub t: f64,
    pub escape_risk: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub alpha1: f64,
    pub alpha2: f64,
    pub b: Option<f64>,
    pub c: Option<f64>,
    pub m: f64,
    pub lambda: Option<f64>,
    pub chi_min: Option<f64>,
    pub radius_s: Option<f64>,
    pub radius_b: Option<f64>,
    pub radius_d: f64,
    pub escape_risk: Vec<RiskPoint>,
    /// `ϑ > 1` somewhere on the curve
    pub vacuous: bool,
    pub gain_ok: bool,
    pub feasibility_ok: bool,
    pub inclusion_ok: bool,
    pub notes: Vec<String>,
    pub inputs: CertificateInputs,
}

/// Assembles every certificate quantity. Failures of individual conditions
/// are recorded as flags and notes, not errors.
pub fn certificate(inputs: &CertificateInputs) -> Result<CertificateReport> {
    inputs.estimates.validate()?;
    inputs.gains.validate()?;
    let est = &inputs.estimates;
    let (alpha1, alpha2) = alpha_bounds(inputs.gains.gamma);
    let m = alpha1 * est.chi * est.chi;
    let gain_ok = check_gain_condition(inputs.k_e, est.delta[1], est.eps_bar[1]);
    let mut notes = Vec::new();
    let mut report = CertificateReport {
        alpha1,
        alpha2,
        b: Some(constant_b(est, &inputs.gains)),
        c: None,
        m,
        lambda: None,
        chi_min: None,
        radius_s: None,
        radius_b: None,
        radius_d: est.chi,
        escape_risk: Vec::new(),
        vacuous: false,
        gain_ok,
        feasibility_ok: false,
        inclusion_ok: false,
        notes: Vec::new(),
        inputs: inputs.clone(),
    };
    let Constants { b, c } = match compute_constants(est, &inputs.gains, inputs.k_e, inputs.c_divisor) {
        Ok(k) => k,
        Err(e) => {
            notes.push(e.to_string());
            report.notes = notes;
            return Ok(report);
        }
    };
    report.c = Some(c);
    let lambda = inputs.lambda.unwrap_or(b / c);
    report.lambda = Some(lambda);
    if lambda < b / c || lambda > m {
        notes.push(format!("lambda = {lambda} lies outside [b/c, m] = [{}, {m}]", b / c));
    }
    let chi_min = feasibility_threshold(alpha1, alpha2, b, c)?;
    report.chi_min = Some(chi_min);
    report.feasibility_ok = est.chi >= chi_min;
    if !report.feasibility_ok {
        notes.push(format!("feasibility fails: chi = {} < {chi_min}", est.chi));
    }
    match set_radii(est.chi, alpha1, alpha2, b, c, lambda) {
        Ok(r) => {
            report.radius_s = Some(r.s);
            report.radius_b = Some(r.b);
            report.inclusion_ok = report.feasibility_ok && r.chain_holds();
        }
        Err(e) => notes.push(e.to_string()),
    }
    let n = inputs.curve_points.max(2);
    report.escape_risk = (0..n)
        .map(|i| {
            let t = inputs.curve_horizon * i as f64 / (n - 1) as f64;
            let v = escape_risk(inputs.v0, m, lambda, b, c, t);
            RiskPoint {
                t,
                escape_risk: v,
                probability: clip_probability(v),
            }
        })
        .collect();
    report.vacuous = report.escape_risk.iter().any(|p| p.escape_risk > 1.0);
    if report.vacuous {
        notes.push("escape risk exceeds 1 on part of the curve; the bound is vacuous there".into());
    }
    report.notes = notes;
    Ok(report)
}

/// An Itô process `dz = a(z)dt + B(z)dω`.
pub trait ItoProcess: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, z: &[f64], out: &mut [f64]);
    /// `dim × noise_dim`
    fn diffusion(&self, z: &[f64], out: &mut Matrix);
}

/// Scalar `dz = −a z dt + σ dω`. With `V = ½z²`,
/// `ℒV = −2aV + σ²/2`, so `κ₁ = 2a`, `κ₂ = σ²/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrnsteinUhlenbeck {
    pub a: f64,
    pub sigma: f64,
}

impl OrnsteinUhlenbeck {
    pub fn kappa(&self) -> (f64, f64) {
        (2.0 * self.a, 0.5 * self.sigma * self.sigma)
    }
}

impl ItoProcess for OrnsteinUhlenbeck {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, z: &[f64], out: &mut [f64]) {
        out[0] = -self.a * z[0];
    }

    fn diffusion(&self, _z: &[f64], out: &mut Matrix) {
        out[(0, 0)] = self.sigma;
    }
}

/// A threshold `λ` and the set `Q_m = {V < m}` paths are stopped on leaving.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceLevel {
    pub lambda: f64,
    pub m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceEstimate {
    pub lambda: f64,
    pub m: f64,
    pub hits: usize,
    pub paths: usize,
    pub empirical: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McSettings {
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
}

/// Estimates `P(sup_{0≤s≤T} V(z(s)) ≥ λ)` for each level, where a path
/// stops counting once it leaves `Q_m`. Path `i` draws from stream `i` of
/// the seed, so the counts do not depend on scheduling.
pub fn mc_sup_exceedance<P, V>(
    process: &P,
    v: V,
    z0: &[f64],
    levels: &[ExceedanceLevel],
    mc: McSettings,
) -> Result<Vec<ExceedanceEstimate>>
where
    P: ItoProcess,
    V: Fn(&[f64]) -> f64 + Sync,
{
    if z0.len() != process.dim() {
        return Err(Error::DimensionMismatch {
            context: "mc_sup_exceedance initial state",
            expected: process.dim(),
            found: z0.len(),
        });
    }
    if !(mc.dt > 0.0 && mc.horizon > 0.0) || mc.paths == 0 {
        return Err(Error::InvalidParameter(
            "Monte-Carlo horizon, step and path count must be positive".into(),
        ));
    }
    for lv in levels {
        if !(lv.lambda > 0.0 && lv.lambda <= lv.m) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < lambda ≤ m, got lambda = {}, m = {}",
                lv.lambda, lv.m
            )));
        }
    }
    let steps = (mc.horizon / mc.dt).round() as usize;
    let hits = (0..mc.paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
            rng.set_stream(i as u64);
            simulate_path(process, &v, z0, levels, steps, mc.dt, &mut rng)
        })
        .reduce(
            || vec![0usize; levels.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(levels
        .iter()
        .zip(hits)
        .map(|(lv, k)| {
            let (ci_lo, ci_hi) = wilson_interval(k, mc.paths, Z95);
            ExceedanceEstimate {
                lambda: lv.lambda,
                m: lv.m,
                hits: k,
                paths: mc.paths,
                empirical: k as f64 / mc.paths as f64,
                ci_lo,
                ci_hi,
            }
        })
        .collect())
}

fn simulate_path<P: ItoProcess, V: Fn(&[f64]) -> f64>(
    process: &P,
    v: &V,
    z0: &[f64],
    levels: &[ExceedanceLevel],
    steps: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = process.dim();
    let s = process.noise_dim();
    let mut z = z0.to_vec();
    let mut a = vec![0.0; n];
    let mut b = Matrix::zeros(n, s);
    let mut dw = vec![0.0; s];
    let sqrt_dt = dt.sqrt();
    let mut hit = vec![0usize; levels.len()];
    // a level is live until it is hit or the path leaves its Q_m
    let mut live = vec![true; levels.len()];
    let mut remaining = levels.len();
    for k in 0..=steps {
        let val = v(&z);
        let val = if val.is_finite() { val } else { f64::INFINITY };
        for (j, lv) in levels.iter().enumerate() {
            if live[j] && val >= lv.lambda {
                hit[j] = 1;
            }
            if live[j] && (hit[j] == 1 || val >= lv.m) {
                live[j] = false;
                remaining -= 1;
            }
        }
        if remaining == 0 || k == steps {
            break;
        }
        process.drift(&z, &mut a);
        process.diffusion(&z, &mut b);
        for w in dw.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *w = sqrt_dt * xi;
        }
        for (zi, ai) in z.iter_mut().zip(&a) {
            *zi += ai * dt;
        }
        for (c, &w) in dw.iter().enumerate() {
            linalg::axpy(w, b.column(c), &mut z);
        }
    }
    hit
}

/// One row of a bound-vs-empirical comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCell {
    pub a: f64,
    pub sigma: f64,
    pub estimate: ExceedanceEstimate,
    pub bound: f64,
}

impl LemmaCell {
    /// The bound is contradicted when even the lower confidence limit lies above it.
    pub fn violated(&self) -> bool {
        self.estimate.ci_lo > self.bound
    }
}

/// Checks the bound for `V = ½z²` on OU processes started at `z₀ = 0`,
/// at every `λ = f·m` for the given `m` values and fractions.
pub fn lemma_check_ou(
    processes: &[OrnsteinUhlenbeck],
    ms: &[f64],
    fractions: &[f64],
    mc: McSettings,
) -> Result<Vec<LemmaCell>> {
    let levels: Vec<ExceedanceLevel> = ms
        .iter()
        .flat_map(|&m| fractions.iter().map(move |&f| ExceedanceLevel { lambda: f * m, m }))
        .collect();
    let v = |z: &[f64]| 0.5 * z[0] * z[0];
    let mut cells = Vec::new();
    for ou in processes {
        let (k1, k2) = ou.kappa();
        let est = mc_sup_exceedance(ou, v, &[0.0], &levels, mc)?;
        for e in est {
            cells.push(LemmaCell {
                a: ou.a,
                sigma: ou.sigma,
                bound: lemma1_bound(0.0, e.m, e.lambda, k1, k2, 0.0),
                estimate: e,
            });
        }
    }
    Ok(cells)
}

pub fn lemma_cells_to_csv(cells: &[LemmaCell]) -> String {
    let mut out = String::from("a,sigma,m,lambda,empirical,ci_lo,ci_hi,bound\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.a,
            c.sigma,
            c.estimate.m,
            c.estimate.lambda,
            c.estimate.empirical,
            c.estimate.ci_lo,
            c.estimate.ci_hi,
            clip_probability(c.bound)
        ));
    }
    out
}
