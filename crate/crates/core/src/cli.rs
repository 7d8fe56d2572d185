//! Command-line front end and run configuration.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 divergence,
//! 3 failed check.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptGains;
use crate::bench::{self, BenchmarkConfig, BenchmarkSystem, BenchmarkTrajectory};
use crate::certify::{self, BoundEstimates, CDivisor, CertificateInputs, McSettings, OrnsteinUhlenbeck};
use crate::control::{self, DesiredTrajectory, SinusoidTrajectory};
use crate::dnn::{self, Activation, DnnSpec, GradcheckSettings};
use crate::error::{Error, Result};
use crate::plot::{self, Series};
use crate::sde::{self, InitialWeights, LinearSystem, NoiseConfig, RunSummary, SimConfig, SystemModel};

pub const CONFIG_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "LBDNN_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SystemSelector {
    #[default]
    Benchmark,
    /// JSON file holding a [`CustomSystem`]; relative paths resolve against
    /// the config file's directory.
    Custom { path: PathBuf },
}

/// A linear plant with a sinusoidal reference, loaded from its own file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSystem {
    pub system: LinearSystem,
    pub trajectory: SinusoidTrajectory,
    pub x0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnnShape {
    pub layers: usize,
    pub width: usize,
    pub activation: Activation,
}

impl Default for DnnShape {
    fn default() -> Self {
        DnnShape {
            layers: 8,
            width: 8,
            activation: Activation::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSettings {
    pub mean: f64,
    pub cov: f64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings { mean: 0.0, cov: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub means: Vec<f64>,
    pub covs: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        SweepGrid {
            means: b.means,
            covs: b.covs,
        }
    }
}

/// Replacements for the default [`BoundEstimates`] and certificate inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateOverrides {
    pub delta: Option<[f64; 3]>,
    pub eps_bar: Option<[f64; 3]>,
    pub g_bar: Option<f64>,
    pub sigma_inf: Option<f64>,
    pub sigma_f_inf_sq: Option<f64>,
    pub chi: Option<f64>,
    pub v0: Option<f64>,
    pub lambda: Option<f64>,
    pub c_divisor: CDivisor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub system: SystemSelector,
    pub dt: f64,
    pub horizon: f64,
    pub k_e: f64,
    /// overrides the system's initial state
    pub x0: Option<Vec<f64>>,
    pub gains: AdaptGains,
    pub dnn: DnnShape,
    pub noise: NoiseSettings,
    pub seeds: Vec<u64>,
    pub sweep: SweepGrid,
    pub output_dir: Option<PathBuf>,
    pub certificate: CertificateOverrides,
    /// keep every n-th row of trajectory.csv
    pub csv_stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        RunConfig {
            version: CONFIG_VERSION,
            system: SystemSelector::Benchmark,
            dt: b.dt,
            horizon: b.horizon,
            k_e: b.k_e,
            x0: None,
            gains: b.gains,
            dnn: DnnShape::default(),
            noise: NoiseSettings::default(),
            seeds: b.seeds,
            sweep: SweepGrid::default(),
            output_dir: None,
            certificate: CertificateOverrides::default(),
            csv_stride: 1,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        match value.get("version") {
            Some(v) if v.as_u64() == Some(CONFIG_VERSION as u64) => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "unsupported config version {v}; expected {CONFIG_VERSION}"
                )))
            }
            None => return Err(Error::Config("missing top-level `version` field".into())),
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::ReadFile {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let SystemSelector::Custom { path: p } = &mut cfg.system {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("dt and horizon must be positive".into()));
        }
        if !(self.k_e.is_finite() && self.k_e >= 0.0) {
            return Err(Error::Config("k_e must be non-negative".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.sweep.means.is_empty() || self.sweep.covs.is_empty() {
            return Err(Error::Config("sweep grid must be non-empty".into()));
        }
        if self.dnn.layers == 0 || self.dnn.width == 0 {
            return Err(Error::Config("DNN layers and width must be positive".into()));
        }
        self.gains
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        NoiseConfig {
            mean: self.noise.mean,
            cov: self.noise.cov,
            seed: 0,
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON, ignoring where outputs are written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            dt: self.dt,
            horizon: self.horizon,
            x0: self.x0.clone().unwrap_or_else(|| BenchmarkConfig::default().x0),
            k_e: self.k_e,
            gains: self.gains.clone(),
            layers: self.dnn.layers,
            width: self.dnn.width,
            activation: self.dnn.activation,
            seeds: self.seeds.clone(),
            means: self.sweep.means.clone(),
            covs: self.sweep.covs.clone(),
        }
    }
}

/// A plant, its reference and initial state.
pub struct Problem {
    pub model: Box<dyn SystemModel>,
    pub trajectory: Box<dyn DesiredTrajectory>,
    pub x0: Vec<f64>,
}

pub fn load_problem(cfg: &RunConfig) -> Result<Problem> {
    let mut p = match &cfg.system {
        SystemSelector::Benchmark => Problem {
            model: Box::new(BenchmarkSystem),
            trajectory: Box::new(BenchmarkTrajectory),
            x0: BenchmarkConfig::default().x0,
        },
        SystemSelector::Custom { path } => {
            let text = fs::read_to_string(path).map_err(|source| Error::ReadFile {
                path: path.clone(),
                source,
            })?;
            let mut custom: CustomSystem = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            custom.system.prepare()?;
            Problem {
                model: Box::new(custom.system),
                trajectory: Box::new(custom.trajectory),
                x0: custom.x0,
            }
        }
    };
    if let Some(x0) = &cfg.x0 {
        p.x0 = x0.clone();
    }
    let n = p.model.state_dim();
    if p.x0.len() != n || p.trajectory.dim() != n {
        return Err(Error::Config(format!(
            "system has {n} states but x0 has {} and the trajectory {}",
            p.x0.len(),
            p.trajectory.dim()
        )));
    }
    Ok(p)
}

pub fn sim_config(cfg: &RunConfig, problem: &Problem, seed: u64) -> Result<SimConfig> {
    let n = problem.model.state_dim();
    let hidden = vec![cfg.dnn.width; cfg.dnn.layers];
    let act = cfg.dnn.activation;
    Ok(SimConfig {
        dt: cfg.dt,
        horizon: cfg.horizon,
        k_e: cfg.k_e,
        gains: cfg.gains.clone(),
        dnn: [
            DnnSpec::new(n, hidden.clone(), n, act)?,
            DnnSpec::new(n, hidden.clone(), 1, act)?,
            DnnSpec::new(2 * n, hidden, n, act)?,
        ],
        x0: problem.x0.clone(),
        noise: NoiseConfig {
            mean: cfg.noise.mean,
            cov: cfg.noise.cov,
            seed,
        },
        init: InitialWeights::Kaiming,
        ideal: None,
        freeze_weights: false,
    })
}

/// Default certificate inputs for a problem with any overrides applied.
pub fn certificate_inputs(cfg: &RunConfig, problem: &Problem, seed: u64) -> Result<CertificateInputs> {
    let ov = &cfg.certificate;
    let model = problem.model.as_ref();
    let traj = problem.trajectory.as_ref();
    let (sigma_inf, sigma_f) = match (ov.sigma_inf, ov.sigma_f_inf_sq) {
        (Some(a), Some(b)) => (a, b),
        (a, b) => {
            let (ga, gb) = certify::covariance_norms(model, cfg.horizon, 1e-3)?;
            (a.unwrap_or(ga), b.unwrap_or(gb))
        }
    };
    let estimates = BoundEstimates {
        delta: ov.delta.unwrap_or([1.0; 3]),
        eps_bar: ov.eps_bar.unwrap_or([0.1; 3]),
        g_bar: ov
            .g_bar
            .unwrap_or_else(|| certify::g_bar(model, traj, cfg.horizon, 1e-3)),
        sigma_inf,
        sigma_f_inf_sq: sigma_f,
        chi: ov.chi.unwrap_or(bench::DEFAULT_CHI),
    };
    let v0 = match ov.v0 {
        Some(v) => v,
        None => {
            let sc = sim_config(cfg, problem, seed)?;
            let init = sc.initial_state();
            let e0 = control::tracking_error(&problem.x0, &traj.position_vec(0.0))?;
            certify::initial_lyapunov_upper(&e0, init.norms(), &cfg.gains)
        }
    };
    Ok(CertificateInputs {
        estimates,
        gains: cfg.gains.clone(),
        k_e: cfg.k_e,
        v0,
        lambda: ov.lambda,
        c_divisor: ov.c_divisor,
        curve_horizon: cfg.horizon,
        curve_points: 61,
    })
}

#[derive(Debug, Parser)]
#[command(name = "lbdnn", version, about = "Adaptive DNN tracking control of stochastic systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop simulation and export its trajectory.
    Simulate(SimulateArgs),
    /// Run the noise mean/covariance grid.
    Sweep(SweepArgs),
    /// Compute the stability certificate.
    Certify(CertifyArgs),
    /// Compare analytic weight gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Monte-Carlo check of the sup-exceedance bound on OU processes.
    LemmaCheck(LemmaArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// use the built-in five-state benchmark
    #[arg(long)]
    pub benchmark: bool,
    #[arg(long)]
    pub ke: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub mean: Option<f64>,
    #[arg(long)]
    pub cov: Option<f64>,
    /// keep every n-th trajectory row
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub ke: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// number of seeds per cell (seeds 1..=n)
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub benchmark: bool,
    #[arg(long)]
    pub ke: Option<f64>,
    #[arg(long)]
    pub chi: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub c_divisor: Option<CDivisorArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum CDivisorArg {
    Alpha1,
    Alpha2,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct LemmaArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// an OU process as `a=<rate> sigma=<noise>`; repeatable
    #[arg(long, num_args = 2, value_name = "KEY=VALUE")]
    pub ou: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 5.0)]
    pub horizon: f64,
    /// Q_m thresholds
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 2.0])]
    pub m: Vec<f64>,
    /// λ as fractions of m
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 1.0])]
    pub fractions: Vec<f64>,
}

/// Configures the global thread pool from [`THREADS_ENV`].
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Infeasible(_) => EXIT_CHECK_FAILED,
        _ => EXIT_CONFIG,
    }
}

/// Runs a parsed command and returns its exit code.
pub fn run(cli: Cli) -> i32 {
    let result = init_threads().and_then(|_| match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::LemmaCheck(a) => cmd_lemma_check(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(dt) = common.dt {
        cfg.dt = dt;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(Error::from)
}

fn stiffness_warning(cfg: &RunConfig) {
    let r = cfg.dt * cfg.k_e;
    if r >= 2.0 {
        eprintln!(
            "warning: dt·k_e = {r} ≥ 2; the explicit feedback step is unstable at this step size"
        );
    }
}

pub fn cmd_simulate(a: SimulateArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    if a.benchmark {
        cfg.system = SystemSelector::Benchmark;
    }
    if let Some(k) = a.ke {
        cfg.k_e = k;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(m) = a.mean {
        cfg.noise.mean = m;
    }
    if let Some(c) = a.cov {
        cfg.noise.cov = c;
    }
    if let Some(s) = a.stride {
        cfg.csv_stride = s;
    }
    cfg.validate()?;
    stiffness_warning(&cfg);
    let problem = load_problem(&cfg)?;
    let seed = cfg.seeds[0];
    let sc = sim_config(&cfg, &problem, seed)?;
    let mut traj = sde::simulate_closed_loop(problem.model.as_ref(), problem.trajectory.as_ref(), &sc)?;
    traj.config_hash = Some(cfg.hash());

    let dir = output_dir(&cfg)?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv, cfg.csv_stride)?;
    write(&dir.join("trajectory.csv"), csv)?;
    let summary = RunSummary::from_trajectory(&traj, 5.0);
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write(&dir.join("tracking_error.svg"), tracking_error_svg(&traj))?;

    if !a.common.quiet {
        match summary.rms {
            Some(rms) => println!(
                "seed {seed}: RMS ‖e‖ = {rms:.6}, final ‖e‖ = {:.6}, {} samples → {}",
                summary.final_error.unwrap_or(f64::NAN),
                summary.samples,
                dir.display()
            ),
            None => println!("seed {seed}: diverged at step {:?} → {}", summary.diverged_step, dir.display()),
        }
    }
    Ok(if traj.diverged() { EXIT_DIVERGED } else { EXIT_OK })
}

pub fn tracking_error_svg(traj: &sde::Trajectory) -> String {
    const MAX_POINTS: usize = 2000;
    let norms = traj.error_norms();
    let mut series = vec![Series {
        name: "‖e‖",
        points: plot::decimate(
            &traj.t.iter().copied().zip(norms).collect::<Vec<_>>(),
            MAX_POINTS,
        ),
    }];
    let names: Vec<String> = (1..=traj.n).map(|i| format!("e{i}")).collect();
    for (i, name) in names.iter().enumerate() {
        let pts: Vec<(f64, f64)> = (0..traj.len()).map(|k| (traj.t[k], traj.e_at(k)[i])).collect();
        series.push(Series {
            name,
            points: plot::decimate(&pts, MAX_POINTS),
        });
    }
    plot::line_plot("Tracking error", "t [s]", "e(t)", &series)
}

#[derive(Clone, Debug, Serialize)]
struct CellSummary {
    mean: f64,
    cov: f64,
    average_rms: Option<f64>,
    diverged: usize,
}

pub fn cmd_sweep(a: SweepArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    if let Some(k) = a.ke {
        cfg.k_e = k;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(n) = a.seeds {
        cfg.seeds = (1..=n).collect();
    }
    cfg.validate()?;
    if cfg.system != SystemSelector::Benchmark {
        return Err(Error::Config("sweep runs the built-in benchmark only".into()));
    }
    stiffness_warning(&cfg);
    let bc = cfg.benchmark_config();
    let res = bench::run_sweep(&bc)?;
    let dir = output_dir(&cfg)?;
    write(&dir.join("sweep.csv"), res.to_csv())?;
    let cells: Vec<CellSummary> = res
        .cells
        .iter()
        .map(|c| CellSummary {
            mean: c.mean,
            cov: c.cov,
            average_rms: c.average(),
            diverged: c.runs.iter().filter(|r| r.diverged).count(),
        })
        .collect();
    write(&dir.join("sweep_summary.json"), serde_json::to_string_pretty(&cells)? + "\n")?;
    // rows: covariance, columns: mean
    let mut grid = Vec::with_capacity(cells.len());
    for cov in &bc.covs {
        for mean in &bc.means {
            grid.push(res.cell(*mean, *cov).and_then(|c| c.average()));
        }
    }
    write(
        &dir.join("sweep_heatmap.svg"),
        plot::heatmap("Seed-averaged RMS ‖e‖", "noise mean", "noise covariance", &bc.means, &bc.covs, &grid),
    )?;
    if !a.common.quiet {
        for c in &cells {
            let avg = c.average_rms.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
            println!("mean {:>6} cov {:>5}: RMS {avg} ({} diverged)", c.mean, c.cov, c.diverged);
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_certify(a: CertifyArgs) -> Result<i32> {
    let mut cfg = base_config(&a.common)?;
    if a.benchmark {
        cfg.system = SystemSelector::Benchmark;
    }
    if let Some(k) = a.ke {
        cfg.k_e = k;
    }
    if let Some(c) = a.chi {
        cfg.certificate.chi = Some(c);
    }
    if let Some(l) = a.lambda {
        cfg.certificate.lambda = Some(l);
    }
    if let Some(d) = a.c_divisor {
        cfg.certificate.c_divisor = match d {
            CDivisorArg::Alpha1 => CDivisor::Alpha1,
            CDivisorArg::Alpha2 => CDivisor::Alpha2,
        };
    }
    cfg.validate()?;
    let problem = load_problem(&cfg)?;
    let inputs = certificate_inputs(&cfg, &problem, cfg.seeds[0])?;
    let report = certify::certificate(&inputs)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &cfg.output_dir {
        Some(_) => {
            let dir = output_dir(&cfg)?;
            write(&dir.join("certificate.json"), &json)?;
            if !a.common.quiet {
                println!(
                    "α₁ = {}, α₂ = {}, gain condition {}, feasibility {} → {}",
                    report.alpha1,
                    report.alpha2,
                    ok(report.gain_ok),
                    ok(report.feasibility_ok),
                    dir.display()
                );
            }
        }
        None => print!("{json}"),
    }
    Ok(if report.gain_ok && report.feasibility_ok {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn ok(b: bool) -> &'static str {
    if b { "holds" } else { "fails" }
}

pub fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let cfg = base_config(&a.common)?;
    let settings = GradcheckSettings {
        trials: a.trials,
        layers: a.layers,
        width: a.width,
        seed: a.common.seed.unwrap_or(0),
        ..Default::default()
    };
    if let Some(l) = a.layers {
        if l == 0 {
            return Err(Error::Config("--layers must be positive".into()));
        }
    }
    if let Some(w) = a.width {
        if w == 0 {
            return Err(Error::Config("--width must be positive".into()));
        }
    }
    let report = dnn::gradcheck(&settings)?;
    if cfg.output_dir.is_some() {
        let dir = output_dir(&cfg)?;
        write(&dir.join("gradcheck.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    let pass = report.max_rel_err < a.threshold;
    if !a.common.quiet {
        println!(
            "{} trials: max relative error {:e} (threshold {:e}) {}",
            report.trials.len(),
            report.max_rel_err,
            a.threshold,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn parse_ou(pairs: &[String]) -> Result<OrnsteinUhlenbeck> {
    let (mut a, mut sigma) = (None, None);
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{p}`")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("`{v}` is not a number")))?;
        match k {
            "a" => a = Some(v),
            "sigma" => sigma = Some(v),
            _ => return Err(Error::Config(format!("unknown OU parameter `{k}`"))),
        }
    }
    match (a, sigma) {
        (Some(a), Some(sigma)) if a > 0.0 && sigma >= 0.0 => Ok(OrnsteinUhlenbeck { a, sigma }),
        (Some(_), Some(_)) => Err(Error::Config("need a > 0 and sigma ≥ 0".into())),
        _ => Err(Error::Config("--ou needs both a= and sigma=".into())),
    }
}

/// The default OU family: `a ∈ {0.5, 1, 2}`, `σ ∈ {0.25, 0.5}`.
pub fn default_ou_family() -> Vec<OrnsteinUhlenbeck> {
    let mut out = Vec::new();
    for a in [0.5, 1.0, 2.0] {
        for sigma in [0.25, 0.5] {
            out.push(OrnsteinUhlenbeck { a, sigma });
        }
    }
    out
}

pub fn cmd_lemma_check(a: LemmaArgs) -> Result<i32> {
    let cfg = base_config(&a.common)?;
    let processes = if a.ou.is_empty() {
        default_ou_family()
    } else {
        a.ou.chunks(2).map(parse_ou).collect::<Result<_>>()?
    };
    let mc = McSettings {
        horizon: a.horizon,
        dt: a.common.dt.unwrap_or(1e-3),
        paths: a.paths,
        seed: a.common.seed.unwrap_or(0),
    };
    let cells = certify::lemma_check_ou(&processes, &a.m, &a.fractions, mc)?;
    let csv = certify::lemma_cells_to_csv(&cells);
    match &cfg.output_dir {
        Some(_) => write(&output_dir(&cfg)?.join("lemma_check.csv"), &csv)?,
        None => print!("{csv}"),
    }
    let violated: Vec<_> = cells.iter().filter(|c| c.violated()).collect();
    if !a.common.quiet {
        eprintln!(
            "{} of {} cells: empirical lower confidence limit above the bound",
            violated.len(),
            cells.len()
        );
        for c in &violated {
            eprintln!(
                "  a={} sigma={} m={} lambda={}: empirical {:.4} [{:.4}, {:.4}] > bound {:.4}",
                c.a, c.sigma, c.estimate.m, c.estimate.lambda, c.estimate.empirical, c.estimate.ci_lo, c.estimate.ci_hi, c.bound
            );
        }
    }
    Ok(if violated.is_empty() { EXIT_OK } else { EXIT_CHECK_FAILED })
}
