//! Fully-connected feedforward network with augmented-bias layers.
//!
//! Layer `j` (for `j = 0..=k`) owns a weight matrix `V_{j+1}` of shape
//! `(L_j + 1) × L_{j+1}`; its last row holds the biases. The network output
//! is `φ_k` where `φ_0 = V_1ᵀ [κ; 1]` and `φ_j = V_{j+1}ᵀ [ς(φ_{j-1}); 1]`.
//! The output layer is affine.
//!
//! The flat parameter vector is `θ = [vec(V_1); …; vec(V_{k+1})]`, so the
//! gradient `∂Φ/∂θ` has one column per entry of every `V_j`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, Matrix};

/// Hidden-layer activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Activation {
    Swish { beta: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Swish { beta: 1.0 }
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Swish { beta } => swish(x, beta),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Swish { beta } => swish_prime(x, beta),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// `(ϕ(x), ϕ′(x))` sharing the sigmoid or tanh evaluation.
    #[inline]
    pub fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Swish { beta } => {
                let s = logistic(beta * x);
                (x * s, s + beta * x * s * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
        }
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x·σ(βx)`
#[inline]
pub fn swish(x: f64, beta: f64) -> f64 {
    x * logistic(beta * x)
}

/// `σ(βx) + βx·σ(βx)(1 − σ(βx))`
#[inline]
pub fn swish_prime(x: f64, beta: f64) -> f64 {
    let s = logistic(beta * x);
    s + beta * x * s * (1.0 - s)
}

/// Network shape: input width, hidden widths `L_1..L_k`, output width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnnSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl DnnSpec {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = DnnSpec {
            input_dim,
            hidden,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `k` hidden layers of equal width with swish(β=1).
    pub fn uniform(input_dim: usize, layers: usize, width: usize, output_dim: usize) -> Result<Self> {
        DnnSpec::new(input_dim, vec![width; layers], output_dim, Activation::default())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::InvalidParameter(
                "network needs at least one hidden layer".into(),
            ));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "every layer width must be at least 1".into(),
            ));
        }
        if let Activation::Swish { beta } = self.activation {
            if !beta.is_finite() {
                return Err(Error::InvalidParameter("swish beta must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden.len()
    }

    /// `[L_0, L_1, …, L_k, L_{k+1}]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    /// Shapes `(L_j + 1, L_{j+1})` of `V_{j+1}` for `j = 0..=k`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.widths().windows(2).map(|w| (w[0] + 1, w[1])).collect()
    }

    /// `p = Σ_j (L_j + 1)·L_{j+1}`
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Per-layer weight-and-bias matrices `V_1..V_{k+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DnnWeights {
    layers: Vec<Matrix>,
}

impl DnnWeights {
    pub fn zeros(spec: &DnnSpec) -> Self {
        DnnWeights {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(r, c)| Matrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn from_layers(spec: &DnnSpec, layers: Vec<Matrix>) -> Result<Self> {
        let shapes = spec.layer_shapes();
        check_len("DnnWeights layer count", shapes.len(), layers.len())?;
        for ((r, c), m) in shapes.iter().zip(&layers) {
            check_len("DnnWeights layer rows", *r, m.rows())?;
            check_len("DnnWeights layer cols", *c, m.cols())?;
        }
        Ok(DnnWeights { layers })
    }

    /// Splits a flat `θ` back into layer matrices.
    pub fn from_theta(spec: &DnnSpec, theta: &[f64]) -> Result<Self> {
        check_len("DnnWeights::from_theta", spec.param_count(), theta.len())?;
        let mut offset = 0;
        let mut layers = Vec::new();
        for (r, c) in spec.layer_shapes() {
            let chunk = theta[offset..offset + r * c].to_vec();
            layers.push(Matrix::from_col_major(r, c, chunk)?);
            offset += r * c;
        }
        Ok(DnnWeights { layers })
    }

    pub fn to_theta(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    /// Flat snapshot of `θ`, one value per line. Header comments give each
    /// layer's shape and offset.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut offset = 0;
        for (j, m) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "# V{} {}x{} offset {offset}", j + 1, m.rows(), m.cols());
            offset += m.rows() * m.cols();
        }
        for v in self.to_theta() {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    /// Reads a snapshot written by [`DnnWeights::to_csv`]; comment lines are
    /// skipped and the value count must match `spec`.
    pub fn from_csv(spec: &DnnSpec, text: &str) -> Result<Self> {
        let theta = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|_| Error::InvalidParameter(format!("bad weight value `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_theta(spec, &theta)
    }
}

/// `Φ(κ, θ)` from layer matrices.
pub fn forward(spec: &DnnSpec, w: &DnnWeights, input: &[f64]) -> Result<Vec<f64>> {
    let net = Network::new(spec.clone())?;
    let theta = w.to_theta();
    let mut ws = net.workspace();
    net.check_input(input)?;
    Ok(net.forward(&theta, input, &mut ws).to_vec())
}

/// `Φ′(κ, θ) = ∂Φ/∂θ`, an `L_{k+1} × p` matrix, assembled block by block as
/// `(∏_{ℓ=j+1..k} V_{ℓ+1}ᵀ ∂ϕ_ℓ/∂φ_{ℓ-1}) (I_{L_{j+1}} ⊗ ϱ_j)`.
///
/// This materializes the Kronecker factors explicitly. The simulator uses
/// [`Network::vjp`], which computes the same quantity in `O(p)`.
pub fn grad_theta(spec: &DnnSpec, w: &DnnWeights, input: &[f64]) -> Result<Matrix> {
    spec.validate()?;
    check_len("grad_theta input", spec.input_dim, input.len())?;
    let k = spec.hidden_layers();
    let act = spec.activation;
    let layers = w.layers();
    check_len("grad_theta layers", k + 1, layers.len())?;

    // ϱ_j as row vectors and pre-activations φ_j.
    let mut rho: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    let mut phi: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    let mut aug = input.to_vec();
    aug.push(1.0);
    for (j, v) in layers.iter().enumerate() {
        let out = v.tr_mul_vec(&aug)?;
        rho.push(std::mem::take(&mut aug));
        if j < k {
            aug = out.iter().map(|&x| act.apply(x)).collect();
            aug.push(1.0);
        }
        phi.push(out);
    }

    let widths = spec.widths();
    let mut blocks: Vec<Matrix> = vec![Matrix::zeros(0, 0); k + 1];
    // M_k = I; M_{j-1} = M_j · V_{j+1}ᵀ · ∂ϕ_j/∂φ_{j-1}
    let mut chain = Matrix::identity(spec.output_dim);
    for j in (0..=k).rev() {
        let row = Matrix::from_col_major(1, rho[j].len(), rho[j].clone())?;
        let kron = linalg::kron(&Matrix::identity(widths[j + 1]), &row);
        blocks[j] = chain.matmul(&kron)?;
        if j > 0 {
            let jac = activation_jacobian(act, &phi[j - 1]);
            chain = chain.matmul(&layers[j].transpose().matmul(&jac)?)?;
        }
    }

    let p = spec.param_count();
    let mut grad = Matrix::zeros(spec.output_dim, p);
    let mut col = 0;
    for b in &blocks {
        for c in 0..b.cols() {
            for r in 0..b.rows() {
                grad[(r, col + c)] = b[(r, c)];
            }
        }
        col += b.cols();
    }
    Ok(grad)
}

/// `∂ϕ/∂y = [ς′(y_1)η_1, …, ς′(y_L)η_L, 0]ᵀ`, shape `(L+1) × L`.
pub fn activation_jacobian(act: Activation, y: &[f64]) -> Matrix {
    let l = y.len();
    let mut j = Matrix::zeros(l + 1, l);
    for (i, &yi) in y.iter().enumerate() {
        j[(i, i)] = act.derivative(yi);
    }
    j
}

/// He/Kaiming normal initialization: non-bias entries of `V_{j+1}` are drawn
/// from `N(0, 2/L_j)`; bias rows start at zero.
pub fn init_kaiming(spec: &DnnSpec, seed: u64) -> DnnWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_kaiming_with(spec, &mut rng)
}

pub fn init_kaiming_with<R: rand::Rng + ?Sized>(spec: &DnnSpec, rng: &mut R) -> DnnWeights {
    let mut w = DnnWeights::zeros(spec);
    for m in w.layers_mut() {
        let fan_in = m.rows() - 1;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for c in 0..m.cols() {
            for r in 0..fan_in {
                m[(r, c)] = normal.sample(rng);
            }
        }
    }
    w
}

/// Evaluator over a flat parameter slice with reusable scratch buffers.
#[derive(Clone, Debug)]
pub struct Network {
    spec: DnnSpec,
    widths: Vec<usize>,
    offsets: Vec<usize>,
    params: usize,
}

/// Scratch space for one [`Network`]; holds the last forward pass.
#[derive(Clone, Debug)]
pub struct Workspace {
    // rho[j] = ϱ_j (augmented, length L_j + 1)
    rho: Vec<Vec<f64>>,
    // phi[j] = φ_j (length L_{j+1})
    phi: Vec<Vec<f64>>,
    // dact[j] = ϕ′(φ_j) for hidden layers
    dact: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Network {
    pub fn new(spec: DnnSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut acc = 0;
        for w in widths.windows(2) {
            offsets.push(acc);
            acc += (w[0] + 1) * w[1];
        }
        Ok(Network {
            spec,
            widths,
            offsets,
            params: acc,
        })
    }

    pub fn spec(&self) -> &DnnSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn workspace(&self) -> Workspace {
        let max_width = *self.widths.iter().max().unwrap_or(&1) + 1;
        Workspace {
            rho: self.widths[..self.widths.len() - 1]
                .iter()
                .map(|&w| vec![0.0; w + 1])
                .collect(),
            phi: self.widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
            dact: self.widths[1..self.widths.len() - 1]
                .iter()
                .map(|&w| vec![0.0; w])
                .collect(),
            delta: vec![0.0; max_width],
            delta_next: vec![0.0; max_width],
        }
    }

    pub fn check_input(&self, input: &[f64]) -> Result<()> {
        check_len("network input", self.spec.input_dim, input.len())
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_len("network parameters", self.params, theta.len())
    }

    /// Runs the forward pass and returns `Φ(κ, θ)`. Dimensions are the
    /// caller's responsibility; see [`Network::check_input`].
    pub fn forward<'w>(&self, theta: &[f64], input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        debug_assert_eq!(theta.len(), self.params);
        let act = self.spec.activation;
        let k = self.spec.hidden_layers();
        {
            let rho0 = &mut ws.rho[0];
            rho0[..input.len()].copy_from_slice(input);
            rho0[input.len()] = 1.0;
        }
        for j in 0..=k {
            let rows = self.widths[j] + 1;
            let cols = self.widths[j + 1];
            let v = &theta[self.offsets[j]..self.offsets[j] + rows * cols];
            let (rho, phi) = (&ws.rho[j], &mut ws.phi[j]);
            for (c, out) in phi.iter_mut().enumerate() {
                *out = linalg::dot(&v[c * rows..(c + 1) * rows], rho);
            }
            if j < k {
                let (phi, next, dact) = (&ws.phi[j], &mut ws.rho[j + 1], &mut ws.dact[j]);
                for ((dst, d), &src) in next.iter_mut().zip(dact.iter_mut()).zip(phi) {
                    (*dst, *d) = act.apply_with_derivative(src);
                }
                next[cols] = 1.0;
            }
        }
        &ws.phi[k]
    }

    /// Vector-Jacobian product `Φ′ᵀ·v` at the point of the last
    /// [`Network::forward`] call, written into `out` (length `p`).
    pub fn vjp(&self, theta: &[f64], ws: &mut Workspace, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.spec.output_dim);
        debug_assert_eq!(out.len(), self.params);
        let k = self.spec.hidden_layers();
        ws.delta[..v.len()].copy_from_slice(v);
        for j in (0..=k).rev() {
            let rows = self.widths[j] + 1;
            let cols = self.widths[j + 1];
            let off = self.offsets[j];
            let rho = &ws.rho[j];
            let delta = &ws.delta[..cols];
            let block = &mut out[off..off + rows * cols];
            for (c, &d) in delta.iter().enumerate() {
                for (g, &r) in block[c * rows..(c + 1) * rows].iter_mut().zip(rho) {
                    *g = d * r;
                }
            }
            if j > 0 {
                // δ_{j-1} = J_jᵀ V_{j+1} δ_j, dropping the bias row.
                let v = &theta[off..off + rows * cols];
                let below = rows - 1;
                let dact = &ws.dact[j - 1];
                for i in 0..below {
                    let mut acc = 0.0;
                    for (c, &d) in delta.iter().enumerate() {
                        acc += v[c * rows + i] * d;
                    }
                    ws.delta_next[i] = dact[i] * acc;
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_next);
            }
        }
    }

    /// Full `L_{k+1} × p` Jacobian at `(input, θ)`, one VJP per output.
    pub fn jacobian(&self, theta: &[f64], input: &[f64], ws: &mut Workspace) -> Matrix {
        let out_dim = self.spec.output_dim;
        let mut jac = Matrix::zeros(out_dim, self.params);
        let mut row = vec![0.0; self.params];
        let mut unit = vec![0.0; out_dim];
        for o in 0..out_dim {
            self.forward(theta, input, ws);
            unit.iter_mut().for_each(|u| *u = 0.0);
            unit[o] = 1.0;
            self.vjp(theta, ws, &unit, &mut row);
            for (c, &g) in row.iter().enumerate() {
                jac[(o, c)] = g;
            }
        }
        jac
    }
}

/// Writes `θ` one value per line, with `#` header lines naming the layer
/// shapes so the file can be split back into `V_1..V_{k+1}`.
pub fn theta_to_csv(spec: &DnnSpec, theta: &[f64]) -> Result<String> {
    check_len("theta_to_csv", spec.param_count(), theta.len())?;
    let mut out = String::new();
    let shapes: Vec<String> = spec
        .layer_shapes()
        .iter()
        .map(|(r, c)| format!("{r}x{c}"))
        .collect();
    let _ = writeln!(out, "# theta p={}", theta.len());
    let _ = writeln!(out, "# layers (rows x cols, column-major): {}", shapes.join(","));
    for v in theta {
        let _ = writeln!(out, "{v:?}");
    }
    Ok(out)
}

pub fn theta_from_csv(spec: &DnnSpec, text: &str) -> Result<Vec<f64>> {
    let theta = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad theta value {l:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    check_len("theta_from_csv", spec.param_count(), theta.len())?;
    Ok(theta)
}

/// Central-difference estimate of `∂Φ/∂θ` with step `h`.
pub fn central_difference_jacobian(spec: &DnnSpec, theta: &[f64], input: &[f64], h: f64) -> Result<Matrix> {
    let net = Network::new(spec.clone())?;
    net.check_theta(theta)?;
    net.check_input(input)?;
    let mut ws = net.workspace();
    let p = theta.len();
    let mut out = Matrix::zeros(spec.output_dim, p);
    let mut t = theta.to_vec();
    let mut plus = vec![0.0; spec.output_dim];
    for i in 0..p {
        t[i] = theta[i] + h;
        plus.copy_from_slice(net.forward(&t, input, &mut ws));
        t[i] = theta[i] - h;
        let minus = net.forward(&t, input, &mut ws);
        for o in 0..spec.output_dim {
            out[(o, i)] = (plus[o] - minus[o]) / (2.0 * h);
        }
        t[i] = theta[i];
    }
    Ok(out)
}

/// Largest entry-wise `|a − b| / max(|a|, |b|)`; differences at or below
/// `floor` count as zero.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = (x - y).abs();
            if d <= floor {
                0.0
            } else {
                d / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Random-architecture comparison of the analytic weight gradient with
/// central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub trials: usize,
    /// fixed hidden-layer count, else uniform in `1..=max_layers`
    pub layers: Option<usize>,
    /// fixed hidden width, else each layer uniform in `1..=max_width`
    pub width: Option<usize>,
    pub max_layers: usize,
    pub max_width: usize,
    pub max_input: usize,
    pub step: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            trials: 100,
            layers: None,
            width: None,
            max_layers: 4,
            max_width: 8,
            max_input: 10,
            step: 1e-5,
            floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckTrial {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Kronecker-product route vs central differences
    pub rel_err_kron: f64,
    /// backpropagated route vs central differences
    pub rel_err_vjp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub settings: GradcheckSettings,
    pub max_rel_err: f64,
    pub trials: Vec<GradcheckTrial>,
}

pub fn gradcheck(settings: &GradcheckSettings) -> Result<GradcheckReport> {
    if settings.trials == 0 || settings.max_layers == 0 || settings.max_width == 0 || settings.max_input == 0 {
        return Err(Error::InvalidParameter("gradcheck sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut trials = Vec::with_capacity(settings.trials);
    for _ in 0..settings.trials {
        let k = settings.layers.unwrap_or_else(|| rng.random_range(1..=settings.max_layers));
        let hidden: Vec<usize> = (0..k)
            .map(|_| settings.width.unwrap_or_else(|| rng.random_range(1..=settings.max_width)))
            .collect();
        let input_dim = rng.random_range(1..=settings.max_input);
        let output_dim = rng.random_range(1..=settings.max_width);
        let spec = DnnSpec::new(input_dim, hidden.clone(), output_dim, Activation::default())?;
        let mut w = init_kaiming_with(&spec, &mut rng);
        // exercise the bias paths too
        for m in w.layers_mut() {
            let r = m.rows() - 1;
            for c in 0..m.cols() {
                m[(r, c)] = rng.random_range(-0.5..0.5);
            }
        }
        let theta = w.to_theta();
        let input: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fd = central_difference_jacobian(&spec, &theta, &input, settings.step)?;
        let kron = grad_theta(&spec, &w, &input)?;
        let net = Network::new(spec)?;
        let vjp = net.jacobian(&theta, &input, &mut net.workspace());
        trials.push(GradcheckTrial {
            input_dim,
            hidden,
            output_dim,
            rel_err_kron: max_relative_error(&kron, &fd, settings.floor),
            rel_err_vjp: max_relative_error(&vjp, &fd, settings.floor),
        });
    }
    let max_rel_err = trials
        .iter()
        .map(|t| t.rel_err_kron.max(t.rel_err_vjp))
        .fold(0.0, f64::max);
    Ok(GradcheckReport {
        settings: settings.clone(),
        max_rel_err,
        trials,
    })
}
