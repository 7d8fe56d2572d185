//! Control-affine stochastic plants `dx = (f(x) + g₁(x)u)dt + g₂(x)Σ(t)dω`
//! and their Euler–Maruyama closed-loop simulation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, AdaptGains, ControllerState};
use crate::certify;
use crate::control::{self, DesiredTrajectory, NetworkOutputs};
use crate::dnn::{self, DnnSpec, Network};
use crate::error::{check_len, Error, Result};
use crate::linalg::{self, Matrix};

/// RNG stream used for the Wiener increments; streams `1..=3` seed the
/// initial weights of the three networks.
pub const NOISE_STREAM: u64 = 0;

pub trait SystemModel: Send + Sync {
    /// `n`
    fn state_dim(&self) -> usize;
    /// `r`
    fn input_dim(&self) -> usize;
    /// `s`
    fn noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// `g₁(x)`, `n × r`
    fn control_effectiveness(&self, x: &[f64], out: &mut Matrix);
    /// `g₂(x)`, `n × s`
    fn diffusion(&self, x: &[f64], out: &mut Matrix);
    /// `Σ(t)`, `s × s`
    fn covariance(&self, t: f64, out: &mut Matrix);

    /// When true the simulator computes `g₁⁺` once.
    fn constant_control_effectiveness(&self) -> bool {
        false
    }
}

/// `dx = (Ax + Bu)dt + GΣdω` with constant matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystem {
    /// Row-major `n × n`.
    pub a: Vec<Vec<f64>>,
    /// Row-major `n × r`.
    pub b: Vec<Vec<f64>>,
    /// Row-major `n × s`.
    pub g: Vec<Vec<f64>>,
    /// Row-major `s × s`.
    pub sigma: Vec<Vec<f64>>,
    #[serde(skip)]
    cache: Option<LinearCache>,
}

#[derive(Clone, Debug, PartialEq)]
struct LinearCache {
    a: Matrix,
    b: Matrix,
    g: Matrix,
    sigma: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix, g: Matrix, sigma: Matrix) -> Result<Self> {
        let rows = |m: &Matrix| (0..m.rows()).map(|i| m.row(i)).collect::<Vec<_>>();
        let mut sys = LinearSystem {
            a: rows(&a),
            b: rows(&b),
            g: rows(&g),
            sigma: rows(&sigma),
            cache: None,
        };
        sys.prepare()?;
        Ok(sys)
    }

    /// Validates shapes and builds the matrix cache. Must be called after
    /// deserializing.
    pub fn prepare(&mut self) -> Result<()> {
        let parse = |rows: &[Vec<f64>], what: &str| {
            if rows.is_empty() || rows[0].is_empty() {
                return Err(Error::Config(format!("linear system matrix `{what}` is empty")));
            }
            Matrix::from_rows(rows)
                .map_err(|e| Error::Config(format!("linear system matrix `{what}`: {e}")))
        };
        let a = parse(&self.a, "a")?;
        let b = parse(&self.b, "b")?;
        let g = parse(&self.g, "g")?;
        let sigma = parse(&self.sigma, "sigma")?;
        let n = a.rows();
        check_len("linear system a columns", n, a.cols())?;
        check_len("linear system b rows", n, b.rows())?;
        check_len("linear system g rows", n, g.rows())?;
        check_len("linear system sigma rows", g.cols(), sigma.rows())?;
        check_len("linear system sigma columns", g.cols(), sigma.cols())?;
        if !sigma.is_symmetric(1e-12) {
            return Err(Error::Config("linear system sigma must be symmetric".into()));
        }
        self.cache = Some(LinearCache { a, b, g, sigma });
        Ok(())
    }

    fn cache(&self) -> &LinearCache {
        self.cache
            .as_ref()
            .expect("LinearSystem::prepare must be called before use")
    }
}

impl SystemModel for LinearSystem {
    fn state_dim(&self) -> usize {
        self.cache().a.rows()
    }

    fn input_dim(&self) -> usize {
        self.cache().b.cols()
    }

    fn noise_dim(&self) -> usize {
        self.cache().g.cols()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let a = &self.cache().a;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &xj) in x.iter().enumerate() {
            linalg::axpy(xj, a.column(j), out);
        }
    }

    fn control_effectiveness(&self, _x: &[f64], out: &mut Matrix) {
        out.clone_from(&self.cache().b);
    }

    fn diffusion(&self, _x: &[f64], out: &mut Matrix) {
        out.clone_from(&self.cache().g);
    }

    fn covariance(&self, _t: f64, out: &mut Matrix) {
        out.clone_from(&self.cache().sigma);
    }

    fn constant_control_effectiveness(&self) -> bool {
        true
    }
}

/// Drifted, scaled Wiener increments `Δω = m·Δt + √(c·Δt)·ξ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub mean: f64,
    pub cov: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn standard(seed: u64) -> Self {
        NoiseConfig {
            mean: 0.0,
            cov: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite() && self.cov.is_finite() && self.cov >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise mean must be finite and covariance non-negative, got ({}, {})",
                self.mean, self.cov
            )));
        }
        Ok(())
    }
}

pub fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    rng
}

pub fn wiener_increment<R: Rng + ?Sized>(rng: &mut R, s: usize, dt: f64, noise: &NoiseConfig) -> Vec<f64> {
    let mut out = vec![0.0; s];
    wiener_increment_into(rng, dt, noise, &mut out);
    out
}

pub fn wiener_increment_into<R: Rng + ?Sized>(rng: &mut R, dt: f64, noise: &NoiseConfig, out: &mut [f64]) {
    let drift = noise.mean * dt;
    let scale = (noise.cov * dt).sqrt();
    for o in out.iter_mut() {
        let xi: f64 = rng.sample(StandardNormal);
        *o = drift + scale * xi;
    }
}

/// Reusable buffers for [`em_step_into`].
#[derive(Clone, Debug)]
pub struct EmScratch {
    f: Vec<f64>,
    g1: Matrix,
    g2: Matrix,
    sigma: Matrix,
    sdw: Vec<f64>,
}

impl EmScratch {
    pub fn new(model: &dyn SystemModel) -> Self {
        let (n, r, s) = (model.state_dim(), model.input_dim(), model.noise_dim());
        EmScratch {
            f: vec![0.0; n],
            g1: Matrix::zeros(n, r),
            g2: Matrix::zeros(n, s),
            sigma: Matrix::zeros(s, s),
            sdw: vec![0.0; s],
        }
    }
}

/// `x⁺ = x + (f(x) + g₁(x)u)Δt + g₂(x)Σ(t)Δω`
pub fn em_step(
    model: &dyn SystemModel,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>> {
    check_len("em_step state", model.state_dim(), x.len())?;
    check_len("em_step input", model.input_dim(), u.len())?;
    check_len("em_step increment", model.noise_dim(), dw.len())?;
    let mut scratch = EmScratch::new(model);
    let mut out = x.to_vec();
    em_step_into(model, u, t, dt, dw, &mut scratch, &mut out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("em_step result"))
    }
}

/// In-place Euler–Maruyama step; `x` is overwritten with `x⁺`.
pub fn em_step_into(
    model: &dyn SystemModel,
    u: &[f64],
    t: f64,
    dt: f64,
    dw: &[f64],
    s: &mut EmScratch,
    x: &mut [f64],
) {
    model.drift(x, &mut s.f);
    model.control_effectiveness(x, &mut s.g1);
    model.diffusion(x, &mut s.g2);
    model.covariance(t, &mut s.sigma);
    for (k, &uk) in u.iter().enumerate() {
        linalg::axpy(uk, s.g1.column(k), &mut s.f);
    }
    s.sdw.iter_mut().for_each(|v| *v = 0.0);
    for (k, &w) in dw.iter().enumerate() {
        linalg::axpy(w, s.sigma.column(k), &mut s.sdw);
    }
    for (xi, fi) in x.iter_mut().zip(&s.f) {
        *xi += fi * dt;
    }
    for (k, &w) in s.sdw.iter().enumerate() {
        linalg::axpy(w, s.g2.column(k), x);
    }
}

/// How the three weight vectors start.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum InitialWeights {
    /// Kaiming normal from the run seed.
    #[default]
    Kaiming,
    Zero,
    Given([Vec<f64>; 3]),
}

/// Everything a closed-loop run needs besides the plant and the reference.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub k_e: f64,
    pub gains: AdaptGains,
    /// Φ₁ and Φ₂ take `x`; Φ₃ takes `[x; x_d]`.
    pub dnn: [DnnSpec; 3],
    pub x0: Vec<f64>,
    pub noise: NoiseConfig,
    pub init: InitialWeights,
    /// `θ*`, when known, enables the `V_L` column.
    pub ideal: Option<[Vec<f64>; 3]>,
    /// Keeps `θ̂` at its initial value.
    pub freeze_weights: bool,
}

impl SimConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// `Δt·k_e ≥ 2` makes the explicit feedback term unstable.
    pub fn stiffness_ratio(&self) -> f64 {
        self.dt * self.k_e
    }

    pub fn validate(&self, model: &dyn SystemModel, traj: &dyn DesiredTrajectory) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.k_e.is_finite() && self.k_e >= 0.0) {
            return Err(Error::InvalidParameter(format!("k_e must be non-negative, got {}", self.k_e)));
        }
        self.gains.validate()?;
        self.noise.validate()?;
        let n = model.state_dim();
        check_len("initial state", n, self.x0.len())?;
        check_len("desired trajectory", n, traj.dim())?;
        let inputs = [n, n, 2 * n];
        let outputs = [n, 1, n];
        for l in 0..3 {
            self.dnn[l].validate()?;
            check_len("network input width", inputs[l], self.dnn[l].input_dim)?;
            check_len("network output width", outputs[l], self.dnn[l].output_dim)?;
        }
        let p: Vec<usize> = self.dnn.iter().map(|s| s.param_count()).collect();
        for ws in [&self.ideal, &given(&self.init)].into_iter().flatten() {
            for l in 0..3 {
                check_len("weight vector", p[l], ws[l].len())?;
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> ControllerState {
        let theta = match &self.init {
            InitialWeights::Kaiming => std::array::from_fn(|l| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.noise.seed);
                rng.set_stream(1 + l as u64);
                dnn::init_kaiming_with(&self.dnn[l], &mut rng).to_theta()
            }),
            InitialWeights::Zero => std::array::from_fn(|l| vec![0.0; self.dnn[l].param_count()]),
            InitialWeights::Given(ws) => ws.clone(),
        };
        ControllerState { theta }
    }
}

fn given(init: &InitialWeights) -> Option<[Vec<f64>; 3]> {
    match init {
        InitialWeights::Given(ws) => Some(ws.clone()),
        _ => None,
    }
}

/// One recorded instant. `u` is the control applied over `[t, t + Δt)`.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub step: usize,
    pub t: f64,
    pub x: &'a [f64],
    pub e: &'a [f64],
    pub u: &'a [f64],
    pub theta_norms: [f64; 3],
    pub v_l: Option<f64>,
}

pub trait Recorder {
    fn record(&mut self, sample: &Sample<'_>);
}

/// Accumulates `Σ‖e‖²` and the fraction of late samples with `‖e‖ ≤ 1`.
#[derive(Clone, Debug, Default)]
pub struct ErrorStats {
    pub samples: usize,
    pub sum_sq: f64,
    pub final_error: f64,
    /// start of the "late" window, seconds
    pub late_after: f64,
    pub late_samples: usize,
    pub late_within_unit: usize,
}

impl ErrorStats {
    pub fn with_late_window(after: f64) -> Self {
        ErrorStats {
            late_after: after,
            ..Default::default()
        }
    }

    pub fn rms(&self) -> f64 {
        if self.samples == 0 {
            return f64::NAN;
        }
        (self.sum_sq / self.samples as f64).sqrt()
    }

    pub fn late_fraction_within_unit(&self) -> f64 {
        if self.late_samples == 0 {
            return f64::NAN;
        }
        self.late_within_unit as f64 / self.late_samples as f64
    }
}

impl Recorder for ErrorStats {
    fn record(&mut self, s: &Sample<'_>) {
        let sq = linalg::norm_sq(s.e);
        self.samples += 1;
        self.sum_sq += sq;
        self.final_error = sq.sqrt();
        if s.t > self.late_after {
            self.late_samples += 1;
            if sq <= 1.0 {
                self.late_within_unit += 1;
            }
        }
    }
}

/// Full per-step history in flat, row-per-sample storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub r: usize,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub u: Vec<f64>,
    pub theta_norms: Vec<[f64; 3]>,
    pub v_l: Option<Vec<f64>>,
    pub seed: u64,
    pub dt: f64,
    pub config_hash: Option<String>,
    /// Step at which the state stopped being finite.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    fn new(n: usize, r: usize, capacity: usize, with_vl: bool, seed: u64, dt: f64) -> Self {
        Trajectory {
            n,
            r,
            t: Vec::with_capacity(capacity),
            x: Vec::with_capacity(capacity * n),
            e: Vec::with_capacity(capacity * n),
            u: Vec::with_capacity(capacity * r),
            theta_norms: Vec::with_capacity(capacity),
            v_l: with_vl.then(|| Vec::with_capacity(capacity)),
            seed,
            dt,
            config_hash: None,
            diverged_at: None,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn x_at(&self, i: usize) -> &[f64] {
        &self.x[i * self.n..(i + 1) * self.n]
    }

    pub fn e_at(&self, i: usize) -> &[f64] {
        &self.e[i * self.n..(i + 1) * self.n]
    }

    pub fn u_at(&self, i: usize) -> &[f64] {
        &self.u[i * self.r..(i + 1) * self.r]
    }

    pub fn error_norms(&self) -> Vec<f64> {
        (0..self.len()).map(|i| linalg::norm(self.e_at(i))).collect()
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("t");
        for prefix in ["x", "e"] {
            for i in 1..=self.n {
                let _ = write!(h, ",{prefix}{i}");
            }
        }
        for i in 1..=self.r {
            let _ = write!(h, ",u{i}");
        }
        h.push_str(",norm_e,norm_th1,norm_th2,norm_th3,VL");
        h
    }

    /// Writes every `stride`-th sample (the last sample is always kept).
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        writeln!(w, "{}", self.csv_header())?;
        let mut line = String::new();
        for i in 0..self.len() {
            if i % stride != 0 && i + 1 != self.len() {
                continue;
            }
            line.clear();
            let _ = write!(line, "{}", self.t[i]);
            for v in self.x_at(i).iter().chain(self.e_at(i)).chain(self.u_at(i)) {
                let _ = write!(line, ",{v}");
            }
            let _ = write!(line, ",{}", linalg::norm(self.e_at(i)));
            for v in self.theta_norms[i] {
                let _ = write!(line, ",{v}");
            }
            match &self.v_l {
                Some(v) => {
                    let _ = write!(line, ",{}", v[i]);
                }
                None => line.push(','),
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

impl Recorder for Trajectory {
    fn record(&mut self, s: &Sample<'_>) {
        self.t.push(s.t);
        self.x.extend_from_slice(s.x);
        self.e.extend_from_slice(s.e);
        self.u.extend_from_slice(s.u);
        self.theta_norms.push(s.theta_norms);
        if let (Some(v), Some(val)) = (self.v_l.as_mut(), s.v_l) {
            v.push(val);
        }
    }
}

impl<A: Recorder, B: Recorder> Recorder for (A, B) {
    fn record(&mut self, s: &Sample<'_>) {
        self.0.record(s);
        self.1.record(s);
    }
}

/// What the loop reports besides the samples it fed the recorder.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub samples: usize,
    pub diverged_at: Option<usize>,
    pub final_state: ControllerState,
}

/// Runs the closed loop, feeding each sample to `rec`.
///
/// Per step: evaluate the three networks at the current `(x, x_d, θ̂)`,
/// compute `u`, record, then advance `x` by Euler–Maruyama and `θ̂` by the
/// projected update laws from the same pre-step values.
pub fn run_closed_loop(
    model: &dyn SystemModel,
    traj: &dyn DesiredTrajectory,
    cfg: &SimConfig,
    rec: &mut dyn Recorder,
) -> Result<RunOutcome> {
    cfg.validate(model, traj)?;
    let n = model.state_dim();
    let r = model.input_dim();
    let s = model.noise_dim();
    let steps = cfg.steps();
    let nets: Vec<Network> = cfg
        .dnn
        .iter()
        .map(|spec| Network::new(spec.clone()))
        .collect::<Result<_>>()?;
    let mut ws: Vec<_> = nets.iter().map(Network::workspace).collect();
    let mut state = cfg.initial_state();
    let mut rates: [Vec<f64>; 3] = std::array::from_fn(|l| vec![0.0; nets[l].param_count()]);
    let mut signal: [Vec<f64>; 3] = rates.clone();

    let mut rng = noise_rng(cfg.noise.seed);
    let mut x = cfg.x0.clone();
    let mut xd = vec![0.0; n];
    let mut xd_dot = vec![0.0; n];
    let mut e = vec![0.0; n];
    let mut x_aug = vec![0.0; 2 * n];
    let mut phi1 = vec![0.0; n];
    let mut phi3 = vec![0.0; n];
    let mut u = vec![0.0; r];
    let mut cmd = vec![0.0; n];
    let mut dw = vec![0.0; s];
    let mut em = EmScratch::new(model);
    let mut g1 = Matrix::zeros(n, r);
    let constant_g1 = model.constant_control_effectiveness();
    let mut pinv = if constant_g1 {
        model.control_effectiveness(&x, &mut g1);
        Some(linalg::pinv_right(&g1)?)
    } else {
        None
    };

    let mut diverged_at = None;
    let mut samples = 0;
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        traj.position(t, &mut xd);
        traj.velocity(t, &mut xd_dot);
        for i in 0..n {
            e[i] = x[i] - xd[i];
        }
        x_aug[..n].copy_from_slice(&x);
        x_aug[n..].copy_from_slice(&xd);

        phi1.copy_from_slice(nets[0].forward(&state.theta[0], &x, &mut ws[0]));
        let phi2 = nets[1].forward(&state.theta[1], &x, &mut ws[1])[0];
        phi3.copy_from_slice(nets[2].forward(&state.theta[2], &x_aug, &mut ws[2]));

        if !constant_g1 {
            model.control_effectiveness(&x, &mut g1);
            pinv = Some(linalg::pinv_right(&g1)?);
        }
        let outputs = NetworkOutputs {
            phi1: &phi1,
            phi2,
            phi3: &phi3,
        };
        let p = pinv.as_ref().expect("pseudo-inverse computed above");
        control::control_input_with_pinv(&e, &xd_dot, cfg.k_e, outputs, p, &mut cmd, &mut u);
        if !u.iter().all(|v| v.is_finite()) {
            diverged_at = Some(k);
            break;
        }

        let v_l = match &cfg.ideal {
            Some(ideal) => {
                let tilde = state.estimation_error(ideal)?;
                Some(certify::lyapunov_value(
                    &e,
                    [&tilde[0], &tilde[1], &tilde[2]],
                    cfg.gains.gamma,
                ))
            }
            None => None,
        };
        rec.record(&Sample {
            step: k,
            t,
            x: &x,
            e: &e,
            u: &u,
            theta_norms: state.norms(),
            v_l,
        });
        samples += 1;
        if k == steps {
            break;
        }

        if !cfg.freeze_weights {
            let half_e_sq = [0.5 * linalg::norm_sq(&e)];
            let weights: [&[f64]; 3] = [&e, &half_e_sq, &e];
            for l in 0..3 {
                nets[l].vjp(&state.theta[l], &mut ws[l], weights[l], &mut signal[l]);
                adapt::rate_from_signal(l, &state.theta[l], &signal[l], &cfg.gains, &mut rates[l]);
            }
        }

        wiener_increment_into(&mut rng, cfg.dt, &cfg.noise, &mut dw);
        em_step_into(model, &u, t, cfg.dt, &dw, &mut em, &mut x);
        if !cfg.freeze_weights {
            adapt::step_weights_in_place(&mut state, &rates, cfg.dt, &cfg.gains);
        }
        if !x.iter().all(|v| v.is_finite()) {
            diverged_at = Some(k + 1);
            break;
        }
    }
    Ok(RunOutcome {
        samples,
        diverged_at,
        final_state: state,
    })
}

/// Runs the closed loop and keeps every sample.
pub fn simulate_closed_loop(
    model: &dyn SystemModel,
    traj: &dyn DesiredTrajectory,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    cfg.validate(model, traj)?;
    let mut out = Trajectory::new(
        model.state_dim(),
        model.input_dim(),
        cfg.steps() + 1,
        cfg.ideal.is_some(),
        cfg.noise.seed,
        cfg.dt,
    );
    let outcome = run_closed_loop(model, traj, cfg, &mut out)?;
    out.diverged_at = outcome.diverged_at;
    Ok(out)
}

/// Summary written next to an exported trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rms: Option<f64>,
    pub final_error: Option<f64>,
    pub diverged: bool,
    pub diverged_step: Option<usize>,
    pub seed: u64,
    pub dt: f64,
    pub samples: usize,
    pub late_fraction_within_unit: Option<f64>,
    pub config_hash: Option<String>,
}

impl RunSummary {
    pub fn from_trajectory(traj: &Trajectory, late_after: f64) -> Self {
        let mut stats = ErrorStats::with_late_window(late_after);
        for i in 0..traj.len() {
            stats.record(&Sample {
                step: i,
                t: traj.t[i],
                x: traj.x_at(i),
                e: traj.e_at(i),
                u: traj.u_at(i),
                theta_norms: traj.theta_norms[i],
                v_l: None,
            });
        }
        let finite = |v: f64| v.is_finite().then_some(v);
        RunSummary {
            rms: if traj.diverged() { None } else { finite(stats.rms()) },
            final_error: finite(stats.final_error).filter(|_| !traj.is_empty()),
            diverged: traj.diverged(),
            diverged_step: traj.diverged_at,
            seed: traj.seed,
            dt: traj.dt,
            samples: traj.len(),
            late_fraction_within_unit: finite(stats.late_fraction_within_unit()),
            config_hash: traj.config_hash.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ConstantTrajectory;

    fn scalar(a: f64, b: f64, g: f64, sigma: f64) -> LinearSystem {
        LinearSystem::new(
            Matrix::from_rows(&[vec![a]]).unwrap(),
            Matrix::from_rows(&[vec![b]]).unwrap(),
            Matrix::from_rows(&[vec![g]]).unwrap(),
            Matrix::from_rows(&[vec![sigma]]).unwrap(),
        )
        .unwrap()
    }

    fn tiny_config(n: usize, noise: NoiseConfig) -> SimConfig {
        SimConfig {
            dt: 1e-3,
            horizon: 0.5,
            k_e: 5.0,
            gains: AdaptGains {
                gamma: [1.0, 1.0, 1.0],
                sigma: [0.1, 0.1, 0.1],
                theta_bar: [5.0, 5.0, 5.0],
                eps_proj: 0.1,
            },
            dnn: [
                DnnSpec::uniform(n, 1, 3, n).unwrap(),
                DnnSpec::uniform(n, 1, 3, 1).unwrap(),
                DnnSpec::uniform(2 * n, 1, 3, n).unwrap(),
            ],
            x0: vec![0.5; n],
            noise,
            init: InitialWeights::Kaiming,
            ideal: None,
            freeze_weights: false,
        }
    }

    #[test]
    fn zero_noise_increment() {
        let mut rng = noise_rng(1);
        let cfg = NoiseConfig { mean: 0.0, cov: 0.0, seed: 1 };
        assert_eq!(wiener_increment(&mut rng, 4, 0.01, &cfg), vec![0.0; 4]);
    }

    #[test]
    fn wiener_statistics() {
        for (mean, cov) in [(0.0, 1.0), (0.1, 4.0)] {
            let cfg = NoiseConfig { mean, cov, seed: 3 };
            let mut rng = noise_rng(3);
            let dt = 0.01;
            let n = 1_000_000;
            let mut buf = [0.0];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                wiener_increment_into(&mut rng, dt, &cfg, &mut buf);
                s1 += buf[0];
                s2 += buf[0] * buf[0];
            }
            let m = s1 / n as f64;
            let var = s2 / n as f64 - m * m;
            let want_var = cov * dt;
            assert!((m - mean * dt).abs() < 3.0 * (want_var / n as f64).sqrt());
            // Var of the sample variance ≈ 2σ⁴/n for a normal.
            assert!((var - want_var).abs() < 3.0 * want_var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn pure_integrator_step() {
        let sys = LinearSystem::new(
            Matrix::zeros(3, 3),
            Matrix::identity(3),
            Matrix::zeros(3, 1),
            Matrix::identity(1),
        )
        .unwrap();
        let x = [1.0, 2.0, 3.0];
        let u = [0.5, -1.0, 2.0];
        let next = em_step(&sys, &x, &u, 0.0, 0.1, &[0.7]).unwrap();
        for i in 0..3 {
            assert!((next[i] - (x[i] + 0.1 * u[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_decay_matches_exact_solution() {
        let sys = scalar(-1.0, 1.0, 0.0, 0.0);
        let dt = 1e-3;
        let mut x = vec![1.0];
        for k in 0..1000 {
            x = em_step(&sys, &x, &[0.0], k as f64 * dt, dt, &[0.0]).unwrap();
        }
        let exact = (-1.0f64).exp();
        assert!((x[0] - exact).abs() < dt, "{} vs {exact}", x[0]);
        assert!((x[0] - exact).abs() > 0.0);
    }

    #[test]
    fn ornstein_uhlenbeck_weak_moments() {
        let (a, sigma, x0, t_end, dt) = (1.0, 0.5, 1.0, 1.0, 1e-3);
        let sys = scalar(-a, 0.0, sigma, 1.0);
        let paths = 4000;
        let steps = (t_end / dt) as usize;
        let mut rng = noise_rng(11);
        let noise = NoiseConfig::standard(11);
        let mut scratch = EmScratch::new(&sys);
        let mut dw = [0.0];
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..paths {
            let mut x = [x0];
            for k in 0..steps {
                wiener_increment_into(&mut rng, dt, &noise, &mut dw);
                em_step_into(&sys, &[0.0], k as f64 * dt, dt, &dw, &mut scratch, &mut x);
            }
            s1 += x[0];
            s2 += x[0] * x[0];
        }
        let mean = s1 / paths as f64;
        let var = s2 / paths as f64 - mean * mean;
        let want_mean = x0 * (-a * t_end).exp();
        let want_var = sigma * sigma * (1.0 - (-2.0 * a * t_end).exp()) / (2.0 * a);
        assert!((mean - want_mean).abs() < 4.0 * (want_var / paths as f64).sqrt() + dt);
        assert!((var - want_var).abs() < 4.0 * want_var * (2.0 / paths as f64).sqrt() + dt);
    }

    #[test]
    fn noise_off_matches_explicit_euler() {
        let sys = LinearSystem::new(
            Matrix::from_rows(&[vec![-0.5, 1.0], vec![0.0, -2.0]]).unwrap(),
            Matrix::identity(2),
            Matrix::from_rows(&[vec![1.0], vec![0.3]]).unwrap(),
            Matrix::identity(1),
        )
        .unwrap();
        let traj = ConstantTrajectory(vec![0.0, 0.0]);
        let mut cfg = tiny_config(2, NoiseConfig { mean: 0.0, cov: 0.0, seed: 5 });
        cfg.init = InitialWeights::Zero;
        cfg.freeze_weights = true;
        let out = simulate_closed_loop(&sys, &traj, &cfg).unwrap();
        // With Φ ≡ 0 the closed loop is ẋ = (A − k_e I)x.
        let mut x = cfg.x0.clone();
        for i in 0..out.len() {
            assert_eq!(out.x_at(i), &x[..]);
            let dx = [
                -0.5 * x[0] + x[1] - cfg.k_e * x[0],
                -2.0 * x[1] - cfg.k_e * x[1],
            ];
            x = vec![x[0] + dx[0] * cfg.dt, x[1] + dx[1] * cfg.dt];
        }
    }

    #[test]
    fn equilibrium_of_error_dynamics() {
        let sys = LinearSystem::new(
            Matrix::zeros(3, 3),
            Matrix::identity(3),
            Matrix::zeros(3, 2),
            Matrix::identity(2),
        )
        .unwrap();
        let traj = ConstantTrajectory(vec![0.5, 0.5, 0.5]);
        let mut cfg = tiny_config(3, NoiseConfig { mean: 0.0, cov: 0.0, seed: 0 });
        cfg.init = InitialWeights::Zero;
        let out = simulate_closed_loop(&sys, &traj, &cfg).unwrap();
        assert_eq!(out.len(), cfg.steps() + 1);
        assert!(out.e.iter().all(|&v| v == 0.0));
        assert!(out.theta_norms.iter().all(|n| *n == [0.0; 3]));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let sys = scalar(0.3, 1.0, 1.0, 1.0);
        let traj = ConstantTrajectory(vec![0.0]);
        let cfg = tiny_config(1, NoiseConfig::standard(21));
        let a = simulate_closed_loop(&sys, &traj, &cfg).unwrap();
        let b = simulate_closed_loop(&sys, &traj, &cfg).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.write_csv(&mut ca, 1).unwrap();
        b.write_csv(&mut cb, 1).unwrap();
        assert_eq!(ca, cb);

        let mut other = cfg.clone();
        other.noise.seed = 22;
        assert_ne!(simulate_closed_loop(&sys, &traj, &other).unwrap().x, a.x);
    }

    #[test]
    fn recorders_agree() {
        let sys = scalar(0.3, 1.0, 1.0, 1.0);
        let traj = ConstantTrajectory(vec![0.2]);
        let cfg = tiny_config(1, NoiseConfig::standard(4));
        let full = simulate_closed_loop(&sys, &traj, &cfg).unwrap();
        let mut stats = ErrorStats::default();
        run_closed_loop(&sys, &traj, &cfg, &mut stats).unwrap();
        let summary = RunSummary::from_trajectory(&full, 0.0);
        assert_eq!(summary.rms, Some(stats.rms()));
        assert_eq!(stats.samples, full.len());
    }

    #[test]
    fn lyapunov_column_is_recomputable() {
        let sys = scalar(0.0, 1.0, 1.0, 1.0);
        let traj = ConstantTrajectory(vec![0.0]);
        let mut cfg = tiny_config(1, NoiseConfig::standard(9));
        let p: Vec<usize> = cfg.dnn.iter().map(|s| s.param_count()).collect();
        let ideal: [Vec<f64>; 3] = std::array::from_fn(|l| vec![0.1; p[l]]);
        cfg.ideal = Some(ideal.clone());
        cfg.horizon = 0.05;
        let out = simulate_closed_loop(&sys, &traj, &cfg).unwrap();
        let vl = out.v_l.as_ref().unwrap();
        // At t = 0 the estimates are the Kaiming draws.
        let init = cfg.initial_state();
        let tilde = init.estimation_error(&ideal).unwrap();
        let want = certify::lyapunov_value(out.e_at(0), [&tilde[0], &tilde[1], &tilde[2]], cfg.gains.gamma);
        assert_eq!(vl[0], want);
        assert_eq!(vl.len(), out.len());
        let mut csv = Vec::new();
        out.write_csv(&mut csv, 1).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "t,x1,e1,u1,norm_e,norm_th1,norm_th2,norm_th3,VL"
        );
    }

    #[test]
    fn blank_lyapunov_column_without_ideal_weights() {
        let sys = scalar(0.0, 1.0, 1.0, 1.0);
        let traj = ConstantTrajectory(vec![0.0]);
        let mut cfg = tiny_config(1, NoiseConfig::standard(9));
        cfg.horizon = 0.01;
        let out = simulate_closed_loop(&sys, &traj, &cfg).unwrap();
        let mut csv = Vec::new();
        out.write_csv(&mut csv, 1).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.lines().skip(1).all(|l| l.ends_with(',')));
    }

    #[test]
    fn unstable_plant_is_flagged_as_diverged() {
        let sys = scalar(1e5, 1.0, 0.0, 0.0);
        let traj = ConstantTrajectory(vec![0.0]);
        let mut cfg = tiny_config(1, NoiseConfig::standard(1));
        cfg.k_e = 0.0;
        cfg.horizon = 10.0;
        let out = simulate_closed_loop(&sys, &traj, &cfg).unwrap();
        let step = out.diverged_at.expect("must diverge");
        assert!(step < cfg.steps());
        assert!(out.x.iter().all(|v| v.is_finite()));
        assert_eq!(RunSummary::from_trajectory(&out, 0.0).rms, None);
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let sys = scalar(0.0, 1.0, 1.0, 1.0);
        let traj = ConstantTrajectory(vec![0.0]);
        let mut cfg = tiny_config(1, NoiseConfig::standard(1));
        cfg.x0 = vec![0.0, 0.0];
        assert!(simulate_closed_loop(&sys, &traj, &cfg).is_err());
        let mut cfg = tiny_config(1, NoiseConfig::standard(1));
        cfg.dt = 0.0;
        assert!(simulate_closed_loop(&sys, &traj, &cfg).is_err());
        let mut cfg = tiny_config(1, NoiseConfig::standard(1));
        cfg.noise.cov = -1.0;
        assert!(simulate_closed_loop(&sys, &traj, &cfg).is_err());
    }

    #[test]
    fn linear_system_from_json() {
        let mut sys: LinearSystem = serde_json::from_str(
            r#"{"a": [[0, 1], [-1, 0]], "b": [[1], [1]], "g": [[1], [0]], "sigma": [[1]]}"#,
        )
        .unwrap();
        sys.prepare().unwrap();
        assert_eq!((sys.state_dim(), sys.input_dim(), sys.noise_dim()), (2, 1, 1));
        let mut f = [0.0; 2];
        sys.drift(&[2.0, 3.0], &mut f);
        assert_eq!(f, [3.0, -2.0]);

        let mut bad: LinearSystem =
            serde_json::from_str(r#"{"a": [[1, 0]], "b": [[1]], "g": [[1]], "sigma": [[1]]}"#).unwrap();
        assert!(bad.prepare().is_err());
    }
}
