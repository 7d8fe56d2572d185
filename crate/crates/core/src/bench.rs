//! The five-state stochastic tracking benchmark and its noise sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptGains;
use crate::certify::{self, BoundEstimates, CDivisor, CertificateInputs};
use crate::control::DesiredTrajectory;
use crate::dnn::{Activation, DnnSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::sde::{self, ErrorStats, InitialWeights, NoiseConfig, SimConfig, SystemModel, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BenchmarkSystem;

pub fn benchmark_model() -> BenchmarkSystem {
    BenchmarkSystem
}

impl SystemModel for BenchmarkSystem {
    fn state_dim(&self) -> usize {
        5
    }

    fn input_dim(&self) -> usize {
        5
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
        out[0] = x4 * x3.abs().sqrt() + x1.sin() + x5 * x5 * x2;
        out[1] = 1.5 * x3 * x3 * x5 + (x3 + x4).cos() + x1 * x2.abs().sqrt() * x3.sin();
        out[2] = x5 * x5 - x3.powi(3) * x4 * x4;
        out[3] = (x1 * x3 - x2).powi(3);
        out[4] = -x1 * x5;
    }

    fn control_effectiveness(&self, _x: &[f64], out: &mut Matrix) {
        *out = Matrix::identity(5);
    }

    fn diffusion(&self, x: &[f64], out: &mut Matrix) {
        let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
        let s2 = x2.sin();
        let s3 = x3.sin();
        let rows = [
            [x1 * x2.cos(), 1.0 - x3 * x4.cos()],
            [x3 * x5, x4 * x4 * s2 * s2],
            [x1 * x1, x3 * (x1 * x2).cos()],
            [(x1 + x2).powi(3) - s3, 1.0 - x3 * x3],
            [x2 * s3 * s3, -x5 + x1 * x4 * x4],
        ];
        for (i, row) in rows.iter().enumerate() {
            out[(i, 0)] = row[0];
            out[(i, 1)] = row[1];
        }
    }

    fn covariance(&self, t: f64, out: &mut Matrix) {
        let s = t.sin();
        out[(0, 0)] = s * s;
        out[(0, 1)] = 0.0;
        out[(1, 0)] = 0.0;
        out[(1, 1)] = (-t).exp();
    }

    fn constant_control_effectiveness(&self) -> bool {
        true
    }
}

/// `x_d(t) = [sin 2t, −cos t, sin 3t + cos 2t, sin t − cos(t/2), −sin t]`
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BenchmarkTrajectory;

pub fn desired_trajectory() -> BenchmarkTrajectory {
    BenchmarkTrajectory
}

impl DesiredTrajectory for BenchmarkTrajectory {
    fn dim(&self) -> usize {
        5
    }

    fn position(&self, t: f64, out: &mut [f64]) {
        out[0] = (2.0 * t).sin();
        out[1] = -t.cos();
        out[2] = (3.0 * t).sin() + (-2.0 * t).cos();
        out[3] = t.sin() - (-0.5 * t).cos();
        out[4] = (-t).sin();
    }

    fn velocity(&self, t: f64, out: &mut [f64]) {
        out[0] = 2.0 * (2.0 * t).cos();
        out[1] = t.sin();
        out[2] = 3.0 * (3.0 * t).cos() - 2.0 * (2.0 * t).sin();
        out[3] = t.cos() + 0.5 * (0.5 * t).sin();
        out[4] = -t.cos();
    }

    fn bounds(&self) -> (f64, f64) {
        // component-wise amplitude sums
        let p: f64 = 1.0 + 1.0 + 4.0 + 4.0 + 1.0;
        let v: f64 = 4.0 + 1.0 + 25.0 + 2.25 + 1.0;
        (p.sqrt(), v.sqrt())
    }
}

/// `√(mean ‖e(t_i)‖²)` over every recorded sample.
pub fn rms_tracking_error(traj: &Trajectory) -> Result<f64> {
    if let Some(step) = traj.diverged_at {
        return Err(Error::Diverged { step });
    }
    if traj.is_empty() {
        return Err(Error::InvalidParameter("empty trajectory".into()));
    }
    let sum: f64 = traj.e.chunks(traj.n).map(linalg::norm_sq).sum();
    Ok((sum / traj.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub dt: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub k_e: f64,
    pub gains: AdaptGains,
    pub layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub seeds: Vec<u64>,
    pub means: Vec<f64>,
    pub covs: Vec<f64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            dt: 1e-3,
            horizon: 60.0,
            x0: vec![2.0, -1.0, 2.0, -1.0, 2.0],
            k_e: 500.0,
            gains: AdaptGains {
                gamma: [25.0, 5.0, 25.0],
                sigma: [0.01, 0.1, 0.01],
                theta_bar: [20.0, 20.0, 20.0],
                eps_proj: 0.1,
            },
            layers: 8,
            width: 8,
            activation: Activation::default(),
            seeds: vec![1, 2, 3, 4, 5],
            means: vec![-0.1, -0.05, 0.0, 0.05, 0.1],
            covs: vec![1.0, 2.0, 5.0, 10.0],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.means.is_empty() || self.covs.is_empty() {
            return Err(Error::Config("seed list and noise grid must be non-empty".into()));
        }
        if self.x0.len() != 5 {
            return Err(Error::DimensionMismatch {
                context: "benchmark initial state",
                expected: 5,
                found: self.x0.len(),
            });
        }
        Ok(())
    }

    pub fn dnn_specs(&self) -> Result<[DnnSpec; 3]> {
        let hidden = vec![self.width; self.layers];
        Ok([
            DnnSpec::new(5, hidden.clone(), 5, self.activation)?,
            DnnSpec::new(5, hidden.clone(), 1, self.activation)?,
            DnnSpec::new(10, hidden, 5, self.activation)?,
        ])
    }

    pub fn sim_config(&self, seed: u64, mean: f64, cov: f64) -> Result<SimConfig> {
        Ok(SimConfig {
            dt: self.dt,
            horizon: self.horizon,
            k_e: self.k_e,
            gains: self.gains.clone(),
            dnn: self.dnn_specs()?,
            x0: self.x0.clone(),
            noise: NoiseConfig { mean, cov, seed },
            init: InitialWeights::Kaiming,
            ideal: None,
            freeze_weights: false,
        })
    }
}

/// RMS and late-window statistics of one benchmark run, without storing
/// the trajectory.
pub fn run_stats(config: &BenchmarkConfig, seed: u64, mean: f64, cov: f64) -> Result<(ErrorStats, Option<usize>)> {
    let cfg = config.sim_config(seed, mean, cov)?;
    let mut stats = ErrorStats::with_late_window(5.0);
    let out = sde::run_closed_loop(&BenchmarkSystem, &BenchmarkTrajectory, &cfg, &mut stats)?;
    Ok((stats, out.diverged_at))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub rms: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mean: f64,
    pub cov: f64,
    pub runs: Vec<SweepRun>,
}

impl SweepCell {
    /// Mean RMS over the runs that did not diverge.
    pub fn average(&self) -> Option<f64> {
        let ok: Vec<f64> = self.runs.iter().filter_map(|r| r.rms).collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, mean: f64, cov: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.mean == mean && c.cov == cov)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mean,cov,seed,rms,diverged\n");
        for c in &self.cells {
            for r in &c.runs {
                let rms = r.rms.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{},{},{},{},{}\n", c.mean, c.cov, r.seed, rms, r.diverged));
            }
        }
        out
    }
}

/// Every `(mean, cov, seed)` run, in parallel. A run's noise and initial
/// weights depend on its seed only, so cells see common random numbers.
pub fn run_sweep(config: &BenchmarkConfig) -> Result<SweepResult> {
    config.validate()?;
    let jobs: Vec<(f64, f64, u64)> = config
        .means
        .iter()
        .flat_map(|&m| {
            config
                .covs
                .iter()
                .flat_map(move |&c| config.seeds.iter().map(move |&s| (m, c, s)))
        })
        .collect();
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(mean, cov, seed)| {
            let (stats, diverged) = run_stats(config, seed, mean, cov)?;
            Ok(SweepRun {
                seed,
                rms: if diverged.is_some() { None } else { Some(stats.rms()) },
                diverged: diverged.is_some(),
            })
        })
        .collect::<Result<_>>()?;
    let per_cell = config.seeds.len();
    let cells = jobs
        .chunks(per_cell)
        .zip(runs.chunks(per_cell))
        .map(|(j, r)| SweepCell {
            mean: j[0].0,
            cov: j[0].1,
            runs: r.to_vec(),
        })
        .collect();
    Ok(SweepResult { cells })
}

/// Default domain radius for the benchmark certificate.
pub const DEFAULT_CHI: f64 = 1000.0;

pub fn default_bound_estimates(config: &BenchmarkConfig) -> Result<BoundEstimates> {
    let (sigma_inf, sigma_f_inf_sq) = certify::covariance_norms(&BenchmarkSystem, config.horizon, 1e-3)?;
    Ok(BoundEstimates {
        delta: [1.0; 3],
        eps_bar: [0.1; 3],
        g_bar: certify::g_bar(&BenchmarkSystem, &BenchmarkTrajectory, config.horizon, 1e-3),
        sigma_inf,
        sigma_f_inf_sq,
        chi: DEFAULT_CHI,
    })
}

/// Certificate inputs for the run with the given seed; `V₀` is the
/// conservative estimate from [`certify::initial_lyapunov_upper`].
pub fn certificate_inputs(config: &BenchmarkConfig, seed: u64) -> Result<CertificateInputs> {
    let cfg = config.sim_config(seed, 0.0, 1.0)?;
    let init = cfg.initial_state();
    let xd0 = BenchmarkTrajectory.position_vec(0.0);
    let e0: Vec<f64> = config.x0.iter().zip(&xd0).map(|(a, b)| a - b).collect();
    Ok(CertificateInputs {
        estimates: default_bound_estimates(config)?,
        gains: config.gains.clone(),
        k_e: config.k_e,
        v0: certify::initial_lyapunov_upper(&e0, init.norms(), &config.gains),
        lambda: None,
        c_divisor: CDivisor::Alpha1,
        curve_horizon: config.horizon,
        curve_points: 61,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::check_trajectory_bounds;

    #[test]
    fn drift_at_initial_state() {
        let x = [2.0, -1.0, 2.0, -1.0, 2.0];
        let mut f = [0.0; 5];
        BenchmarkSystem.drift(&x, &mut f);
        let want1 = -(2f64.sqrt()) + 2f64.sin() - 4.0;
        assert!((f[0] - want1).abs() < 1e-15);
        assert_eq!(f[4], -4.0);
        // 1.5·4·2 + cos 1 + 2·1·sin 2
        assert!((f[1] - (12.0 + 1f64.cos() + 2.0 * 2f64.sin())).abs() < 1e-14);
        assert_eq!(f[2], 4.0 - 8.0);
        assert_eq!(f[3], 125.0);
    }

    #[test]
    fn diffusion_at_origin_is_nonzero() {
        let mut g2 = Matrix::zeros(5, 2);
        BenchmarkSystem.diffusion(&[0.0; 5], &mut g2);
        let want = Matrix::from_rows(&[
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(g2, want);
    }

    #[test]
    fn covariance_at_zero() {
        let mut s = Matrix::zeros(2, 2);
        BenchmarkSystem.covariance(0.0, &mut s);
        assert_eq!(s, Matrix::from_diagonal(&[0.0, 1.0]));
        BenchmarkSystem.covariance(1.3, &mut s);
        assert!(s.is_symmetric(0.0));
    }

    #[test]
    fn covariance_norm_maxima() {
        let (inf, fro) = certify::covariance_norms(&BenchmarkSystem, 60.0, 1e-3).unwrap();
        assert!((inf - 1.0).abs() < 1e-12);
        // sin⁴t + e^{−2t} peaks just past π/2
        let oracle = (0..=60_000)
            .map(|i| {
                let t = i as f64 * 1e-3;
                t.sin().powi(4) + (-2.0 * t).exp()
            })
            .fold(0.0, f64::max);
        assert!((fro - oracle).abs() < 1e-12);
        assert!((fro - 1.0442).abs() < 1e-4);
    }

    #[test]
    fn desired_trajectory_at_zero() {
        let traj = desired_trajectory();
        assert_eq!(traj.position_vec(0.0), vec![0.0, -1.0, 1.0, -1.0, 0.0]);
        assert_eq!(traj.velocity_vec(0.0), vec![2.0, 0.0, 3.0, 1.0, -1.0]);
        let e0: Vec<f64> = [2.0, -1.0, 2.0, -1.0, 2.0]
            .iter()
            .zip(traj.position_vec(0.0))
            .map(|(a, b)| a - b)
            .collect();
        assert_eq!(linalg::norm(&e0), 3.0);
    }

    #[test]
    fn desired_velocity_is_the_derivative() {
        let traj = desired_trajectory();
        let h = 1e-6;
        for t in [0.0, 0.7, 3.1, 17.0] {
            let a = traj.position_vec(t + h);
            let b = traj.position_vec(t - h);
            let v = traj.velocity_vec(t);
            for i in 0..5 {
                assert!(((a[i] - b[i]) / (2.0 * h) - v[i]).abs() < 1e-7);
            }
        }
        let (p, _) = check_trajectory_bounds(&traj, 60.0, 1e-3).unwrap();
        assert!(p <= 11f64.sqrt());
    }

    #[test]
    fn parameter_counts() {
        let specs = BenchmarkConfig::default().dnn_specs().unwrap();
        let p: Vec<usize> = specs.iter().map(|s| s.param_count()).collect();
        assert_eq!(p, vec![597, 561, 637]);
    }

    fn constant_error_trajectory(norm: f64, len: usize) -> Trajectory {
        let mut t = Trajectory {
            n: 2,
            r: 2,
            t: Vec::new(),
            x: Vec::new(),
            e: Vec::new(),
            u: Vec::new(),
            theta_norms: Vec::new(),
            v_l: None,
            seed: 0,
            dt: 1.0,
            config_hash: None,
            diverged_at: None,
        };
        for i in 0..len {
            let angle = i as f64;
            t.t.push(i as f64);
            t.e.extend_from_slice(&[norm * angle.cos(), norm * angle.sin()]);
        }
        t
    }

    #[test]
    fn rms_of_constant_norm_errors() {
        let t = constant_error_trajectory(2.0, 50);
        assert!((rms_tracking_error(&t).unwrap() - 2.0).abs() < 1e-14);
        let z = constant_error_trajectory(0.0, 5);
        assert_eq!(rms_tracking_error(&z).unwrap(), 0.0);

        let mut scaled = t.clone();
        scaled.e.iter_mut().for_each(|v| *v *= -3.0);
        assert!((rms_tracking_error(&scaled).unwrap() - 6.0).abs() < 1e-13);

        let mut d = t;
        d.diverged_at = Some(3);
        assert!(matches!(rms_tracking_error(&d), Err(Error::Diverged { step: 3 })));
    }

    #[test]
    fn sweep_csv_and_cells() {
        let mut cfg = BenchmarkConfig::default();
        cfg.horizon = 0.05;
        cfg.seeds = vec![1, 2];
        cfg.means = vec![0.0, 0.1];
        cfg.covs = vec![1.0];
        let res = run_sweep(&cfg).unwrap();
        assert_eq!(res.cells.len(), 2);
        assert!(res.cells.iter().all(|c| c.runs.len() == 2 && c.average().is_some()));
        let csv = res.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("mean,cov,seed,rms,diverged\n"));
    }

    #[test]
    fn benchmark_certificate_is_feasible() {
        let cfg = BenchmarkConfig::default();
        let inputs = certificate_inputs(&cfg, 1).unwrap();
        let r = certify::certificate(&inputs).unwrap();
        assert_eq!((r.alpha1, r.alpha2), (0.02, 1.0));
        assert!(r.gain_ok);
        assert!(r.feasibility_ok, "{:?}", r.chi_min);
        assert!(r.inclusion_ok);
    }
}
