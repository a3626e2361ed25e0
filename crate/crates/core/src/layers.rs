//! Variational dense layers, structured gates, and the fixed feed-forward
//! network built from them.
//!
//! A [`VariationalDense`] layer stores mean weights `θ` (`fan_in × fan_out`),
//! a bias, per-weight `log σ²`, and a layer-wide `log α`. Which of those drive
//! the forward pass depends on the [`DenseMode`] the network assigns to the
//! layer:
//!
//! * `Deterministic`: `B = Aθ + b`.
//! * `InputNoise`: `B = (A ∘ ξ)θ + b`, `ξ` Bernoulli (inverted) or `N(1, α)`.
//! * `LocalReparam`: `B = μ + δ ∘ ε` with `μ = Aθ + b`,
//!   `δ² = α (A²)(θ²)` in shared mode or `δ² = (A²) σ²` in per-weight mode.
//!
//! Noise is sampled up front into a [`NoiseSample`] so a forward pass can be
//! replayed exactly; [`Network::backward`] consumes the resulting
//! [`ForwardTrace`].

use crate::error::{Error, Result};
use crate::tensor::{sample_bernoulli_scaled, Matrix, RngState};
use crate::variants::{DropoutVariant, NetworkSpec};

/// Initial dropout ratio `α₀` used for `log σ²` and the shared `log α`.
pub const INITIAL_ALPHA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Relu => m.map(|v| v.max(0.0)),
            Activation::Identity => m.clone(),
        }
    }

    /// Derivative evaluated at the pre-activation; `relu'(0) = 0`.
    pub fn derivative(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Relu => pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => Matrix::filled(pre.rows(), pre.cols(), 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    /// One `α` for every weight of the layer.
    Shared,
    /// One `α_{k,d}` per weight, stored as `log σ²_{k,d}` with `σ² = α θ²`.
    PerWeight,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputNoise {
    Bernoulli { p: f64 },
    Gaussian { alpha: f64 },
}

impl InputNoise {
    fn validate(self) -> Result<()> {
        match self {
            InputNoise::Bernoulli { p } if !(0.0..1.0).contains(&p) => {
                Err(Error::domain(format!("dropout rate {p} outside [0, 1)")))
            }
            InputNoise::Gaussian { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => Err(
                Error::domain(format!("noise variance {alpha} must be >= 0")),
            ),
            _ => Ok(()),
        }
    }

    pub fn sample(self, rng: &mut RngState, rows: usize, cols: usize) -> Result<Matrix> {
        self.validate()?;
        match self {
            InputNoise::Bernoulli { p } => sample_bernoulli_scaled(rng, rows, cols, p),
            InputNoise::Gaussian { alpha } => {
                let sd = alpha.sqrt();
                Ok(rng.standard_normal_matrix(rows, cols).map(|e| 1.0 + sd * e))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DenseMode {
    Deterministic,
    InputNoise(InputNoise),
    LocalReparam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalDense {
    pub(crate) theta: Matrix,
    pub(crate) bias: Vec<f64>,
    pub(crate) log_sigma2: Matrix,
    pub(crate) shared_log_alpha: f64,
    pub(crate) alpha_mode: AlphaMode,
}

/// Values cached by [`VariationalDense::forward_local_reparam`].
#[derive(Clone, Debug)]
pub struct LocalReparamTrace {
    pub eps: Matrix,
    pub mean: Matrix,
    pub std: Matrix,
}

impl VariationalDense {
    pub fn new(
        theta: Matrix,
        bias: Vec<f64>,
        log_sigma2: Matrix,
        shared_log_alpha: f64,
        alpha_mode: AlphaMode,
    ) -> Result<Self> {
        if theta.shape() != log_sigma2.shape() {
            return Err(Error::Shape {
                op: "VariationalDense::new",
                left: theta.shape(),
                right: log_sigma2.shape(),
            });
        }
        if bias.len() != theta.cols() {
            return Err(Error::Shape {
                op: "VariationalDense::new",
                left: theta.shape(),
                right: (1, bias.len()),
            });
        }
        if shared_log_alpha.is_nan() || shared_log_alpha == f64::INFINITY {
            return Err(Error::domain(format!(
                "shared log alpha must be < +inf, got {shared_log_alpha}"
            )));
        }
        Ok(VariationalDense {
            theta,
            bias,
            log_sigma2,
            shared_log_alpha,
            alpha_mode,
        })
    }

    /// He-style initialization `θ ~ N(0, 2/K)`, zero bias,
    /// `log σ² = log(α₀ θ²)` and shared `log α = log α₀`.
    pub fn init(fan_in: usize, fan_out: usize, alpha_mode: AlphaMode, rng: &mut RngState) -> Self {
        let sd = (2.0 / fan_in as f64).sqrt();
        let theta = rng.standard_normal_matrix(fan_in, fan_out).scale(sd);
        let log_sigma2 = theta.map(|t| log_variance(INITIAL_ALPHA, t));
        VariationalDense {
            theta,
            bias: vec![0.0; fan_out],
            log_sigma2,
            shared_log_alpha: INITIAL_ALPHA.ln(),
            alpha_mode,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.theta.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.theta.cols()
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn log_sigma2(&self) -> &Matrix {
        &self.log_sigma2
    }

    pub fn shared_log_alpha(&self) -> f64 {
        self.shared_log_alpha
    }

    pub fn alpha_mode(&self) -> AlphaMode {
        self.alpha_mode
    }

    pub fn set_shared_log_alpha(&mut self, log_alpha: f64) {
        self.shared_log_alpha = log_alpha;
    }

    /// Effective `log α` for every weight, row-major. `+∞` where `θ = 0`.
    pub fn log_alpha(&self) -> Vec<f64> {
        match self.alpha_mode {
            AlphaMode::Shared => vec![self.shared_log_alpha; self.theta.len()],
            AlphaMode::PerWeight => self
                .theta
                .as_slice()
                .iter()
                .zip(self.log_sigma2.as_slice())
                .map(|(&t, &ls)| per_weight_log_alpha(t, ls))
                .collect(),
        }
    }

    fn check_input(&self, a: &Matrix) -> Result<()> {
        if a.cols() != self.fan_in() {
            return Err(Error::Shape {
                op: "dense forward",
                left: a.shape(),
                right: self.theta.shape(),
            });
        }
        Ok(())
    }

    /// Test-time pass with mean weights: `B = Aθ + b`.
    pub fn forward_deterministic(&self, a: &Matrix) -> Result<Matrix> {
        self.check_input(a)?;
        let mut out = a.matmul(&self.theta)?;
        out.add_row_in_place(&self.bias)?;
        Ok(out)
    }

    /// `B = (A ∘ ξ)θ + b` with freshly sampled `ξ`.
    pub fn forward_input_noise(
        &self,
        a: &Matrix,
        noise: InputNoise,
        rng: &mut RngState,
    ) -> Result<Matrix> {
        self.check_input(a)?;
        let xi = noise.sample(rng, a.rows(), a.cols())?;
        self.forward_deterministic(&a.hadamard(&xi)?)
    }

    /// Output variance `δ²` of the local reparameterization for input `a`.
    pub fn output_variance(&self, a: &Matrix) -> Result<Matrix> {
        self.check_input(a)?;
        let a2 = a.square();
        match self.alpha_mode {
            AlphaMode::Shared => {
                let alpha = self.shared_log_alpha.exp();
                Ok(a2.matmul(&self.theta.square())?.scale(alpha))
            }
            AlphaMode::PerWeight => a2.matmul(&self.log_sigma2.map(f64::exp)),
        }
    }

    /// Samples `B ~ N(μ, δ²)` directly, one `ε` per output entry.
    pub fn forward_local_reparam(
        &self,
        a: &Matrix,
        rng: &mut RngState,
    ) -> Result<(Matrix, LocalReparamTrace)> {
        self.check_input(a)?;
        let eps = rng.standard_normal_matrix(a.rows(), self.fan_out());
        self.forward_local_reparam_with(a, eps)
    }

    /// Local reparameterization with caller-supplied `ε`.
    pub fn forward_local_reparam_with(
        &self,
        a: &Matrix,
        eps: Matrix,
    ) -> Result<(Matrix, LocalReparamTrace)> {
        let mean = self.forward_deterministic(a)?;
        let std = self.output_variance(a)?.sqrt()?;
        let out = mean.add(&std.hadamard(&eps)?)?;
        Ok((out, LocalReparamTrace { eps, mean, std }))
    }
}

/// `log σ² = log(α θ²)`, clamped so a zero weight keeps a finite entry.
pub(crate) fn log_variance(alpha: f64, theta: f64) -> f64 {
    (alpha * theta * theta).max(f64::MIN_POSITIVE).ln()
}

/// `log α = log σ² − log θ²`; `+∞` for a zero mean.
pub fn per_weight_log_alpha(theta: f64, log_sigma2: f64) -> f64 {
    if theta == 0.0 {
        f64::INFINITY
    } else {
        log_sigma2 - (theta * theta).ln()
    }
}

/// Multiplicative per-feature gate `B′ = f(B) ∘ W′` with
/// `W′_{m,d} ~ N(θ_d, σ²_d)` sampled independently for each batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredDropoutLayer {
    pub(crate) theta: Vec<f64>,
    pub(crate) log_sigma2: Vec<f64>,
}

impl StructuredDropoutLayer {
    pub fn new(theta: Vec<f64>, log_sigma2: Vec<f64>) -> Result<Self> {
        if theta.len() != log_sigma2.len() {
            return Err(Error::Shape {
                op: "StructuredDropoutLayer::new",
                left: (1, theta.len()),
                right: (1, log_sigma2.len()),
            });
        }
        Ok(StructuredDropoutLayer { theta, log_sigma2 })
    }

    /// Transparent-ish start: `θ = 1`, `σ² = α₀`.
    pub fn init(width: usize) -> Self {
        StructuredDropoutLayer {
            theta: vec![1.0; width],
            log_sigma2: vec![log_variance(INITIAL_ALPHA, 1.0); width],
        }
    }

    pub fn width(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn log_sigma2(&self) -> &[f64] {
        &self.log_sigma2
    }

    pub fn log_alpha(&self) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&self.log_sigma2)
            .map(|(&t, &ls)| per_weight_log_alpha(t, ls))
            .collect()
    }

    /// Number of gates with a nonzero mean.
    pub fn retained(&self) -> usize {
        self.theta.iter().filter(|t| **t != 0.0).count()
    }

    fn check_input(&self, b: &Matrix) -> Result<()> {
        if b.cols() != self.width() {
            return Err(Error::Shape {
                op: "structured gate",
                left: b.shape(),
                right: (1, self.width()),
            });
        }
        Ok(())
    }

    /// Samples `W′ = θ + σ ∘ ε` for `rows` batch rows.
    pub fn gate_values(&self, eps: &Matrix) -> Matrix {
        let mut w = eps.clone();
        let d = self.width();
        for (i, v) in w.as_mut_slice().iter_mut().enumerate() {
            let c = i % d;
            *v = self.theta[c] + (0.5 * self.log_sigma2[c]).exp() * *v;
        }
        w
    }

    /// Train-time pass: `f(B) ∘ W′` with a fresh `W′` per batch element.
    pub fn forward_structured(
        &self,
        b: &Matrix,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Matrix> {
        self.check_input(b)?;
        let eps = rng.standard_normal_matrix(b.rows(), self.width());
        activation.apply(b).hadamard(&self.gate_values(&eps))
    }

    /// Test-time pass: `f(B)` scaled column-wise by `θ_d`.
    pub fn forward_deterministic(&self, b: &Matrix, activation: Activation) -> Result<Matrix> {
        self.check_input(b)?;
        let mut out = activation.apply(b);
        scale_columns(&mut out, &self.theta);
        Ok(out)
    }
}

fn scale_columns(m: &mut Matrix, factors: &[f64]) {
    let d = factors.len();
    for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
        *v *= factors[i % d];
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` and its
/// gradient `(softmax − onehot) / M`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let (m, c) = logits.shape();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::domain(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut grad = vec![0.0; m * c];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad[r * c..(r + 1) * c];
        for (gv, v) in g.iter_mut().zip(row) {
            *gv = (v - log_z).exp() / m as f64;
        }
        g[label] -= 1.0 / m as f64;
    }
    Ok((loss / m as f64, Matrix::new(m, c, grad)?))
}

/// Noise drawn for one minibatch, enough to replay a forward pass exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample {
    pub batch: usize,
    pub layers: Vec<LayerNoise>,
    pub gates: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerNoise {
    None,
    /// Multiplicative input noise `ξ`, `M × fan_in`.
    Mask(Matrix),
    /// Standard-normal `ε` of the local reparameterization, `M × fan_out`.
    Eps(Matrix),
}

impl NoiseSample {
    /// Replaces every `ε` with zeros, leaving input masks alone.
    pub fn zero_eps(&self) -> NoiseSample {
        let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        NoiseSample {
            batch: self.batch,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerNoise::Eps(e) => LayerNoise::Eps(zero(e)),
                    other => other.clone(),
                })
                .collect(),
            gates: self.gates.iter().map(zero).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    /// Input after the gate (if any), before input noise.
    input: Matrix,
    /// `input ∘ ξ` for input-noise layers.
    noisy_input: Option<Matrix>,
    /// `δ` for local-reparameterization layers.
    std: Option<Matrix>,
    /// Layer output before the activation.
    pre_activation: Matrix,
}

#[derive(Clone, Debug)]
struct GateCache {
    /// `f(B)` entering the gate.
    input: Matrix,
    /// Sampled `W′`.
    values: Matrix,
}

/// Everything [`Network::backward`] needs from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    generation: u64,
    noise: NoiseSample,
    layers: Vec<LayerCache>,
    gates: Vec<GateCache>,
    logits: Matrix,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn noise(&self) -> &NoiseSample {
        &self.noise
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub theta: Matrix,
    pub bias: Vec<f64>,
    pub log_sigma2: Matrix,
    pub shared_log_alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateGrads {
    pub theta: Vec<f64>,
    pub log_sigma2: Vec<f64>,
}

/// Gradients laid out like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrads>,
    pub gates: Vec<GateGrads>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| DenseGrads {
                    theta: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                    log_sigma2: Matrix::zeros(l.fan_in(), l.fan_out()),
                    shared_log_alpha: 0.0,
                })
                .collect(),
            gates: net
                .gates
                .iter()
                .map(|g| GateGrads {
                    theta: vec![0.0; g.width()],
                    log_sigma2: vec![0.0; g.width()],
                })
                .collect(),
        }
    }

    /// Flat views in [`Network::param_slices_mut`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.theta.as_slice());
            out.push(l.bias.as_slice());
            out.push(l.log_sigma2.as_slice());
            out.push(std::slice::from_ref(&l.shared_log_alpha));
        }
        for g in &self.gates {
            out.push(g.theta.as_slice());
            out.push(g.log_sigma2.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.theta.as_mut_slice());
            out.push(l.bias.as_mut_slice());
            out.push(l.log_sigma2.as_mut_slice());
            out.push(std::slice::from_mut(&mut l.shared_log_alpha));
        }
        for g in &mut self.gates {
            out.push(g.theta.as_mut_slice());
            out.push(g.log_sigma2.as_mut_slice());
        }
        out
    }
}

/// Which parameter a flat slot refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Theta,
    Bias,
    LogSigma2,
    SharedLogAlpha,
    GateTheta,
    GateLogSigma2,
}

/// Feed-forward classifier: dense layers with ReLU between them, optional
/// structured gates in front of every dense layer, identity on the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub(crate) variant: DropoutVariant,
    pub(crate) layers: Vec<VariationalDense>,
    pub(crate) modes: Vec<DenseMode>,
    pub(crate) gates: Vec<StructuredDropoutLayer>,
    pub(crate) alpha_frozen: bool,
    pub(crate) generation: u64,
}

impl Network {
    pub(crate) fn from_parts(
        variant: DropoutVariant,
        layers: Vec<VariationalDense>,
        modes: Vec<DenseMode>,
        gates: Vec<StructuredDropoutLayer>,
        alpha_frozen: bool,
    ) -> Result<Self> {
        if layers.is_empty() || layers.len() != modes.len() {
            return Err(Error::usage("network needs one mode per dense layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape {
                    op: "network",
                    left: pair[0].theta.shape(),
                    right: pair[1].theta.shape(),
                });
            }
        }
        if !gates.is_empty() {
            if gates.len() != layers.len() {
                return Err(Error::usage(
                    "structured networks need one gate per dense layer",
                ));
            }
            for (g, l) in gates.iter().zip(&layers) {
                if g.width() != l.fan_in() {
                    return Err(Error::Shape {
                        op: "network gate",
                        left: (1, g.width()),
                        right: l.theta.shape(),
                    });
                }
            }
        }
        Ok(Network {
            variant,
            layers,
            modes,
            gates,
            alpha_frozen,
            generation: 0,
        })
    }

    pub fn variant(&self) -> DropoutVariant {
        self.variant
    }

    pub fn layers(&self) -> &[VariationalDense] {
        &self.layers
    }

    pub fn modes(&self) -> &[DenseMode] {
        &self.modes
    }

    pub fn gates(&self) -> &[StructuredDropoutLayer] {
        &self.gates
    }

    pub fn is_structured(&self) -> bool {
        !self.gates.is_empty()
    }

    pub fn alpha_frozen(&self) -> bool {
        self.alpha_frozen
    }

    /// Layer widths, input first.
    pub fn arch(&self) -> Vec<usize> {
        let mut arch = vec![self.layers[0].fan_in()];
        arch.extend(self.layers.iter().map(|l| l.fan_out()));
        arch
    }

    /// The spec this network was built from (widths and flags only).
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            arch: self.arch(),
            variant: self.variant,
            structured: self.is_structured(),
            noise_on_input: matches!(self.modes[0], DenseMode::InputNoise(_)),
            alpha_frozen: self.alpha_frozen,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out())
    }

    /// Bumped on every parameter mutation; traces from older generations are
    /// rejected by [`Network::backward`].
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn layers_mut(&mut self) -> &mut [VariationalDense] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn gates_mut(&mut self) -> &mut [StructuredDropoutLayer] {
        self.generation += 1;
        &mut self.gates
    }

    /// Flat mutable parameter views, in the same order as
    /// [`Gradients::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.theta.as_mut_slice());
            out.push(l.bias.as_mut_slice());
            out.push(l.log_sigma2.as_mut_slice());
            out.push(std::slice::from_mut(&mut l.shared_log_alpha));
        }
        for g in &mut self.gates {
            out.push(g.theta.as_mut_slice());
            out.push(g.log_sigma2.as_mut_slice());
        }
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::new();
        for _ in &self.layers {
            out.extend([
                ParamKind::Theta,
                ParamKind::Bias,
                ParamKind::LogSigma2,
                ParamKind::SharedLogAlpha,
            ]);
        }
        for _ in &self.gates {
            out.extend([ParamKind::GateTheta, ParamKind::GateLogSigma2]);
        }
        out
    }

    fn check_batch(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "network input",
                left: x.shape(),
                right: (x.rows(), self.input_dim()),
            });
        }
        Ok(())
    }

    /// Test-time logits: mean weights everywhere, gates scaled by `θ_d`.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_batch(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(gate) = self.gates.get(l) {
                h = gate.forward_deterministic(&h, Activation::Identity)?;
            }
            let z = layer.forward_deterministic(&h)?;
            h = if l == last {
                z
            } else {
                Activation::Relu.apply(&z)
            };
        }
        Ok(h)
    }

    /// Draws every noise matrix a training pass on `batch` rows needs.
    pub fn sample_noise(&self, batch: usize, rng: &mut RngState) -> Result<NoiseSample> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(self.gates.len());
        for (l, (layer, mode)) in self.layers.iter().zip(&self.modes).enumerate() {
            if let Some(gate) = self.gates.get(l) {
                gates.push(rng.standard_normal_matrix(batch, gate.width()));
            }
            layers.push(match mode {
                DenseMode::Deterministic => LayerNoise::None,
                DenseMode::InputNoise(n) => {
                    LayerNoise::Mask(n.sample(rng, batch, layer.fan_in())?)
                }
                DenseMode::LocalReparam => {
                    LayerNoise::Eps(rng.standard_normal_matrix(batch, layer.fan_out()))
                }
            });
        }
        Ok(NoiseSample {
            batch,
            layers,
            gates,
        })
    }

    /// Training-mode forward pass with fresh noise.
    pub fn forward_train(&self, x: &Matrix, rng: &mut RngState) -> Result<ForwardTrace> {
        let noise = self.sample_noise(x.rows(), rng)?;
        self.forward_with_noise(x, noise)
    }

    /// Training-mode forward pass with the given noise. Replaying a trace's
    /// noise reproduces its logits bit for bit.
    pub fn forward_with_noise(&self, x: &Matrix, noise: NoiseSample) -> Result<ForwardTrace> {
        self.check_batch(x)?;
        if noise.batch != x.rows()
            || noise.layers.len() != self.layers.len()
            || noise.gates.len() != self.gates.len()
        {
            return Err(Error::usage(
                "noise sample does not match this batch/network",
            ));
        }
        let last = self.layers.len() - 1;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut gate_caches = Vec::with_capacity(self.gates.len());
        let mut h = x.clone();
        for (l, (layer, mode)) in self.layers.iter().zip(&self.modes).enumerate() {
            if let Some(gate) = self.gates.get(l) {
                let values = gate.gate_values(&noise.gates[l]);
                let gated = h.hadamard(&values)?;
                gate_caches.push(GateCache { input: h, values });
                h = gated;
            }
            let (z, noisy_input, std) = match (mode, &noise.layers[l]) {
                (DenseMode::Deterministic, LayerNoise::None) => {
                    (layer.forward_deterministic(&h)?, None, None)
                }
                (DenseMode::InputNoise(_), LayerNoise::Mask(xi)) => {
                    let noisy = h.hadamard(xi)?;
                    (layer.forward_deterministic(&noisy)?, Some(noisy), None)
                }
                (DenseMode::LocalReparam, LayerNoise::Eps(eps)) => {
                    let (z, t) = layer.forward_local_reparam_with(&h, eps.clone())?;
                    (z, None, Some(t.std))
                }
                _ => return Err(Error::usage("noise kind does not match layer mode")),
            };
            let next = if l == last {
                z.clone()
            } else {
                Activation::Relu.apply(&z)
            };
            layer_caches.push(LayerCache {
                input: h,
                noisy_input,
                std,
                pre_activation: z,
            });
            h = next;
        }
        Ok(ForwardTrace {
            generation: self.generation,
            noise,
            layers: layer_caches,
            gates: gate_caches,
            logits: h,
        })
    }

    /// Exact gradients of a scalar loss of the logits, given `∂loss/∂logits`,
    /// through the recorded noise. Covers the data term only; penalty
    /// gradients are added by [`crate::regularizers::accumulate_penalty_grad`].
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Matrix) -> Result<Gradients> {
        if trace.generation != self.generation || trace.layers.len() != self.layers.len() {
            return Err(Error::usage(
                "stale trace: parameters changed since the forward pass",
            ));
        }
        if grad_logits.shape() != trace.logits.shape() {
            return Err(Error::Shape {
                op: "backward",
                left: grad_logits.shape(),
                right: trace.logits.shape(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut upstream = grad_logits.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let cache = &trace.layers[l];
            let g = &upstream;
            let lg = &mut grads.layers[l];
            lg.bias = g.col_sums().into_vec();

            let grad_input = match self.modes[l] {
                DenseMode::Deterministic => {
                    lg.theta = cache.input.matmul_tn(g)?;
                    g.matmul_nt(&layer.theta)?
                }
                DenseMode::InputNoise(_) => {
                    let noisy = cache.noisy_input.as_ref().expect("input-noise cache");
                    let LayerNoise::Mask(xi) = &trace.noise.layers[l] else {
                        unreachable!("mode checked during forward")
                    };
                    lg.theta = noisy.matmul_tn(g)?;
                    g.matmul_nt(&layer.theta)?.hadamard(xi)?
                }
                DenseMode::LocalReparam => {
                    let std = cache.std.as_ref().expect("local-reparam cache");
                    let LayerNoise::Eps(eps) = &trace.noise.layers[l] else {
                        unreachable!("mode checked during forward")
                    };
                    local_reparam_backward(layer, &cache.input, std, eps, g, lg)?
                }
            };

            let grad_input = match self.gates.get(l) {
                Some(gate) => {
                    let gc = &trace.gates[l];
                    let eps = &trace.noise.gates[l];
                    let gg = &mut grads.gates[l];
                    let d = gate.width();
                    let contrib = grad_input.hadamard(&gc.input)?;
                    for (i, v) in contrib.as_slice().iter().enumerate() {
                        let c = i % d;
                        gg.theta[c] += v;
                        gg.log_sigma2[c] +=
                            v * eps.as_slice()[i] * 0.5 * (0.5 * gate.log_sigma2[c]).exp();
                    }
                    grad_input.hadamard(&gc.values)?
                }
                None => grad_input,
            };

            if l > 0 {
                let pre = &trace.layers[l - 1].pre_activation;
                upstream = grad_input.hadamard(&Activation::Relu.derivative(pre))?;
            }
        }
        Ok(grads)
    }
}

/// Backward through `B = μ + δ ∘ ε`. Writes parameter gradients into `lg`
/// and returns `∂loss/∂A`.
fn local_reparam_backward(
    layer: &VariationalDense,
    a: &Matrix,
    std: &Matrix,
    eps: &Matrix,
    g: &Matrix,
    lg: &mut DenseGrads,
) -> Result<Matrix> {
    // ∂loss/∂δ² = g ε / (2δ); zero where δ = 0 (then every contributing A is 0).
    let mut h = g.hadamard(eps)?;
    for (hv, &s) in h.as_mut_slice().iter_mut().zip(std.as_slice()) {
        *hv = if s > 0.0 { *hv / (2.0 * s) } else { 0.0 };
    }
    let a2 = a.square();
    let mut grad_a = g.matmul_nt(&layer.theta)?;
    let mut theta_grad = a.matmul_tn(g)?;
    let var_weights = match layer.alpha_mode {
        AlphaMode::Shared => {
            let alpha = layer.shared_log_alpha.exp();
            // δ² ∝ α, so ∂δ²/∂log α = δ².
            lg.shared_log_alpha = h
                .as_slice()
                .iter()
                .zip(std.as_slice())
                .map(|(hv, s)| hv * s * s)
                .sum();
            let a2h = a2.matmul_tn(&h)?;
            for ((tg, &t), &q) in theta_grad
                .as_mut_slice()
                .iter_mut()
                .zip(layer.theta.as_slice())
                .zip(a2h.as_slice())
            {
                *tg += 2.0 * alpha * t * q;
            }
            layer.theta.square().scale(alpha)
        }
        AlphaMode::PerWeight => {
            let sigma2 = layer.log_sigma2.map(f64::exp);
            lg.log_sigma2 = a2.matmul_tn(&h)?.hadamard(&sigma2)?;
            sigma2
        }
    };
    lg.theta = theta_grad;
    let hv = h.matmul_nt(&var_weights)?;
    for ((ga, &av), &q) in grad_a
        .as_mut_slice()
        .iter_mut()
        .zip(a.as_slice())
        .zip(hv.as_slice())
    {
        *ga += 2.0 * av * q;
    }
    Ok(grad_a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(theta: Matrix, alpha_mode: AlphaMode, log_alpha: f64) -> VariationalDense {
        let log_sigma2 = theta.map(|t| log_variance(log_alpha.exp(), t));
        let d = theta.cols();
        VariationalDense::new(theta, vec![0.0; d], log_sigma2, log_alpha, alpha_mode).unwrap()
    }

    #[test]
    fn deterministic_identity_and_zero() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let id = dense(Matrix::identity(2), AlphaMode::Shared, 0.0);
        assert_eq!(id.forward_deterministic(&a).unwrap(), a);
        let zero = dense(Matrix::zeros(2, 3), AlphaMode::Shared, 0.0);
        assert_eq!(zero.forward_deterministic(&a).unwrap(), Matrix::zeros(2, 3));
        assert!(zero.forward_deterministic(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn deterministic_is_plain_matmul() {
        let mut rng = RngState::new(1);
        let layer = VariationalDense::init(4, 3, AlphaMode::Shared, &mut rng);
        let a = rng.standard_normal_matrix(5, 4);
        assert_eq!(
            layer.forward_deterministic(&a).unwrap(),
            a.matmul(layer.theta()).unwrap()
        );
    }

    #[test]
    fn no_noise_matches_deterministic() {
        let mut rng = RngState::new(2);
        let layer = VariationalDense::init(4, 3, AlphaMode::Shared, &mut rng);
        let a = rng.standard_normal_matrix(5, 4);
        let det = layer.forward_deterministic(&a).unwrap();
        let b = layer
            .forward_input_noise(&a, InputNoise::Bernoulli { p: 0.0 }, &mut rng)
            .unwrap();
        let g = layer
            .forward_input_noise(&a, InputNoise::Gaussian { alpha: 0.0 }, &mut rng)
            .unwrap();
        assert_eq!(b, det);
        assert_eq!(g, det);
        assert!(layer
            .forward_input_noise(&a, InputNoise::Bernoulli { p: 1.0 }, &mut rng)
            .is_err());
        assert!(layer
            .forward_input_noise(&a, InputNoise::Gaussian { alpha: -1.0 }, &mut rng)
            .is_err());
    }

    #[test]
    fn bernoulli_input_noise_is_unbiased() {
        let mut rng = RngState::new(3);
        let layer = VariationalDense::init(3, 2, AlphaMode::Shared, &mut rng);
        let a = Matrix::from_rows(&[[0.5, 1.0, -0.7]]).unwrap();
        let det = layer.forward_deterministic(&a).unwrap();
        let n = 10_000;
        let mut acc = Matrix::zeros(1, 2);
        for _ in 0..n {
            let out = layer
                .forward_input_noise(&a, InputNoise::Bernoulli { p: 0.5 }, &mut rng)
                .unwrap();
            acc = acc.add(&out).unwrap();
        }
        let mean = acc.scale(1.0 / n as f64);
        for (m, d) in mean.as_slice().iter().zip(det.as_slice()) {
            assert!((m - d).abs() <= 0.02 * d.abs(), "{m} vs {d}");
        }
    }

    #[test]
    fn zero_variance_local_reparam_is_deterministic() {
        let mut rng = RngState::new(4);
        let mut layer = VariationalDense::init(4, 3, AlphaMode::Shared, &mut rng);
        layer.shared_log_alpha = f64::NEG_INFINITY;
        let a = rng.standard_normal_matrix(6, 4);
        let det = layer.forward_deterministic(&a).unwrap();
        let (out, _) = layer.forward_local_reparam(&a, &mut rng).unwrap();
        assert_eq!(out, det);
    }

    #[test]
    fn one_hot_input_isolates_a_weight() {
        let theta = Matrix::from_rows(&[[0.5, -2.0], [3.0, 1.0]]).unwrap();
        let layer = dense(theta, AlphaMode::Shared, 0.3_f64.ln());
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let var = layer.output_variance(&a).unwrap();
        assert!((var.get(0, 0) - 0.3 * 0.25).abs() < 1e-15);
        assert!((var.get(0, 1) - 0.3 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn local_reparam_replay_is_bit_identical() {
        let mut rng = RngState::new(5);
        let layer = VariationalDense::init(4, 3, AlphaMode::PerWeight, &mut rng);
        let a = rng.standard_normal_matrix(6, 4);
        let (out, trace) = layer.forward_local_reparam(&a, &mut rng).unwrap();
        let (again, _) = layer
            .forward_local_reparam_with(&a, trace.eps.clone())
            .unwrap();
        let (third, _) = layer.forward_local_reparam_with(&a, trace.eps).unwrap();
        assert_eq!(out, again);
        assert_eq!(again, third);
    }

    #[test]
    fn structured_gate_cases() {
        let mut rng = RngState::new(6);
        let b = Matrix::from_rows(&[[-1.0, 2.0, 3.0], [4.0, -5.0, 6.0]]).unwrap();
        let transparent = StructuredDropoutLayer::new(vec![1.0; 3], vec![-800.0; 3]).unwrap();
        let out = transparent
            .forward_structured(&b, Activation::Relu, &mut rng)
            .unwrap();
        assert_eq!(out, Activation::Relu.apply(&b));

        let pruned = StructuredDropoutLayer::new(vec![1.0, 0.0, 2.0], vec![-800.0; 3]).unwrap();
        let out = pruned.forward_deterministic(&b, Activation::Relu).unwrap();
        assert_eq!(out.get(0, 1), 0.0);
        assert_eq!(out.get(1, 1), 0.0);
        assert_eq!(out.get(1, 2), 12.0);
        assert!(pruned
            .forward_deterministic(&Matrix::zeros(1, 2), Activation::Relu)
            .is_err());
    }

    #[test]
    fn softmax_cross_entropy_cases() {
        let logits = Matrix::zeros(3, 5);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        assert!((grad.get(0, 0) - (0.2 - 1.0) / 3.0).abs() < 1e-15);

        let mut confident = Matrix::zeros(1, 4);
        confident.set(0, 2, 20.0);
        let (loss, _) = softmax_cross_entropy(&confident, &[2]).unwrap();
        assert!(loss < 1e-8);

        assert!(softmax_cross_entropy(&logits, &[0, 1, 5]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let mut rng = RngState::new(7);
        let logits = rng.standard_normal_matrix(4, 3).scale(2.0);
        let labels = [2, 0, 1, 1];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = logits.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (softmax_cross_entropy(&plus, &labels).unwrap().0
                - softmax_cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * h);
            let an = grad.as_slice()[i];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let pre = Matrix::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(
            Activation::Relu.derivative(&pre).as_slice(),
            &[0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn per_weight_log_alpha_of_zero_mean_is_infinite() {
        assert_eq!(per_weight_log_alpha(0.0, -3.0), f64::INFINITY);
        assert!((per_weight_log_alpha(2.0, 4f64.ln()) - 0.0).abs() < 1e-15);
    }
}
