//! The compared dropout methods, and how each one configures a network.
//!
//! | variant            | forward pass on dense layers      | trains              | penalty            |
//! |--------------------|-----------------------------------|---------------------|--------------------|
//! | `None`             | deterministic                     | θ, b                | none               |
//! | `Bernoulli{p}`     | inverted Bernoulli input mask     | θ, b                | none               |
//! | `GaussianNoise{α}` | `N(1, α)` input noise             | θ, b                | none               |
//! | `GaussianDropout`  | local reparameterization, fixed α | θ, b                | none               |
//! | `Vd`               | local reparameterization          | θ, b, α             | sigmoid-fit KL     |
//! | `Vbd`              | local reparameterization          | θ, b, α             | `½ log(1 + α⁻¹)`   |
//!
//! Input-noise variants leave the raw input alone unless
//! [`NetworkSpec::noise_on_input`] is set. With [`NetworkSpec::structured`],
//! dense layers are deterministic and the learned `α` lives in one gate per
//! feature in front of every dense layer instead.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{
    softmax_cross_entropy, AlphaMode, DenseMode, ForwardTrace, Gradients, InputNoise, Network,
    ParamKind, StructuredDropoutLayer, VariationalDense,
};
use crate::regularizers::{
    accumulate_penalty_grad, regularizer_total, RegularizerKind, VdConstants,
};
use crate::tensor::{Matrix, RngState};

/// Default fixed dropout rate for the fixed-rate baselines.
pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropoutVariant {
    None,
    Bernoulli { p: f64 },
    GaussianNoise { alpha: f64 },
    GaussianDropout { alpha: f64 },
    Vd { per_weight: bool },
    Vbd { per_weight: bool },
}

/// `α = p / (1 − p)`.
pub fn alpha_from_rate(p: f64) -> f64 {
    p / (1.0 - p)
}

impl DropoutVariant {
    /// Parses a CLI name. `rate` is the dropout rate `p` for the fixed-rate
    /// variants (converted to `α` where needed).
    pub fn from_name(name: &str, alpha_mode: AlphaMode, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        let per_weight = alpha_mode == AlphaMode::PerWeight;
        Ok(match name {
            "none" => DropoutVariant::None,
            "bernoulli" => DropoutVariant::Bernoulli { p: rate },
            "gaussian-noise" => DropoutVariant::GaussianNoise {
                alpha: alpha_from_rate(rate),
            },
            "gaussian-dropout" => DropoutVariant::GaussianDropout {
                alpha: alpha_from_rate(rate),
            },
            "vd" => DropoutVariant::Vd { per_weight },
            "vbd" => DropoutVariant::Vbd { per_weight },
            other => {
                return Err(Error::usage(format!(
                    "unknown variant `{other}` (expected none|bernoulli|gaussian-noise|gaussian-dropout|vd|vbd)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DropoutVariant::None => "none",
            DropoutVariant::Bernoulli { .. } => "bernoulli",
            DropoutVariant::GaussianNoise { .. } => "gaussian-noise",
            DropoutVariant::GaussianDropout { .. } => "gaussian-dropout",
            DropoutVariant::Vd { .. } => "vd",
            DropoutVariant::Vbd { .. } => "vbd",
        }
    }

    pub fn regularizer(self) -> RegularizerKind {
        match self {
            DropoutVariant::Vd { .. } => RegularizerKind::VdApprox(VdConstants::default()),
            DropoutVariant::Vbd { .. } => RegularizerKind::VbdClosedForm,
            _ => RegularizerKind::None,
        }
    }

    pub fn learns_alpha(self) -> bool {
        matches!(self, DropoutVariant::Vd { .. } | DropoutVariant::Vbd { .. })
    }

    pub fn alpha_mode(self) -> AlphaMode {
        match self {
            DropoutVariant::Vd { per_weight: true } | DropoutVariant::Vbd { per_weight: true } => {
                AlphaMode::PerWeight
            }
            _ => AlphaMode::Shared,
        }
    }
}

impl fmt::Display for DropoutVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DropoutVariant::Bernoulli { p } => write!(f, "bernoulli(p={p})"),
            DropoutVariant::GaussianNoise { alpha } => write!(f, "gaussian-noise(alpha={alpha})"),
            DropoutVariant::GaussianDropout { alpha } => {
                write!(f, "gaussian-dropout(alpha={alpha})")
            }
            DropoutVariant::Vd { per_weight } | DropoutVariant::Vbd { per_weight } => write!(
                f,
                "{}({})",
                self.name(),
                if per_weight { "per-weight" } else { "shared" }
            ),
            DropoutVariant::None => f.write_str("none"),
        }
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(AlphaMode::Shared),
            "per-weight" => Ok(AlphaMode::PerWeight),
            other => Err(Error::usage(format!(
                "unknown alpha mode `{other}` (expected shared|per-weight)"
            ))),
        }
    }
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaMode::Shared => "shared",
            AlphaMode::PerWeight => "per-weight",
        })
    }
}

/// Everything needed to build a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Widths, input first, classes last.
    pub arch: Vec<usize>,
    pub variant: DropoutVariant,
    /// Gate every dense layer's input with a learned per-feature dropout gate.
    pub structured: bool,
    /// Apply input-noise variants to the raw input as well.
    pub noise_on_input: bool,
    /// Keep `log α` at its initial value (learned variants only).
    pub alpha_frozen: bool,
}

impl NetworkSpec {
    pub fn new(arch: Vec<usize>, variant: DropoutVariant) -> Self {
        NetworkSpec {
            arch,
            variant,
            structured: false,
            noise_on_input: false,
            alpha_frozen: false,
        }
    }

    pub fn structured(mut self, on: bool) -> Self {
        self.structured = on;
        self
    }

    pub fn noise_on_input(mut self, on: bool) -> Self {
        self.noise_on_input = on;
        self
    }

    pub fn alpha_frozen(mut self, on: bool) -> Self {
        self.alpha_frozen = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.len() < 2 {
            return Err(Error::usage(
                "architecture needs at least input and output widths",
            ));
        }
        if let Some(w) = self.arch.iter().find(|w| **w == 0) {
            return Err(Error::usage(format!("invalid layer width {w}")));
        }
        if self.structured && !self.variant.learns_alpha() {
            return Err(Error::usage(
                "structured gates need a learned-rate variant (vd|vbd)",
            ));
        }
        match self.variant {
            DropoutVariant::Bernoulli { p } if !(0.0..1.0).contains(&p) => {
                Err(Error::domain(format!("dropout rate {p} outside [0, 1)")))
            }
            DropoutVariant::GaussianNoise { alpha } | DropoutVariant::GaussianDropout { alpha }
                if !(alpha >= 0.0 && alpha.is_finite()) =>
            {
                Err(Error::domain(format!(
                    "alpha {alpha} must be finite and >= 0"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Forward mode of dense layer `index`.
    pub fn dense_mode(&self, index: usize) -> DenseMode {
        if self.structured {
            return DenseMode::Deterministic;
        }
        let noisy_input = index > 0 || self.noise_on_input;
        match self.variant {
            DropoutVariant::None => DenseMode::Deterministic,
            DropoutVariant::Bernoulli { p } if noisy_input => {
                DenseMode::InputNoise(InputNoise::Bernoulli { p })
            }
            DropoutVariant::GaussianNoise { alpha } if noisy_input => {
                DenseMode::InputNoise(InputNoise::Gaussian { alpha })
            }
            DropoutVariant::Bernoulli { .. } | DropoutVariant::GaussianNoise { .. } => {
                DenseMode::Deterministic
            }
            DropoutVariant::GaussianDropout { .. }
            | DropoutVariant::Vd { .. }
            | DropoutVariant::Vbd { .. } => DenseMode::LocalReparam,
        }
    }
}

/// Builds and initializes a network for `spec`, seeded.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = RngState::with_stream(seed, 0);
    let alpha_mode = spec.variant.alpha_mode();
    let mut layers = Vec::with_capacity(spec.arch.len() - 1);
    let mut modes = Vec::with_capacity(spec.arch.len() - 1);
    for (i, w) in spec.arch.windows(2).enumerate() {
        let mut layer = VariationalDense::init(w[0], w[1], alpha_mode, &mut rng);
        if let DropoutVariant::GaussianDropout { alpha } = spec.variant {
            layer.shared_log_alpha = alpha.ln();
        }
        layers.push(layer);
        modes.push(spec.dense_mode(i));
    }
    let gates = if spec.structured {
        spec.arch[..spec.arch.len() - 1]
            .iter()
            .map(|&w| StructuredDropoutLayer::init(w))
            .collect()
    } else {
        Vec::new()
    };
    Network::from_parts(spec.variant, layers, modes, gates, spec.alpha_frozen)
}

/// Which flat parameter slots (in [`Network::param_slices_mut`] order) the
/// optimizer may update.
pub fn trainable_mask(net: &Network) -> Vec<bool> {
    let variant = net.variant();
    let learn = variant.learns_alpha() && !net.alpha_frozen();
    let structured = net.is_structured();
    net.param_kinds()
        .into_iter()
        .map(|kind| match kind {
            ParamKind::Theta | ParamKind::Bias => true,
            ParamKind::LogSigma2 => {
                learn && !structured && variant.alpha_mode() == AlphaMode::PerWeight
            }
            ParamKind::SharedLogAlpha => {
                learn && !structured && variant.alpha_mode() == AlphaMode::Shared
            }
            ParamKind::GateTheta => true,
            ParamKind::GateLogSigma2 => learn,
        })
        .collect()
}

/// One evaluation of the training objective on a minibatch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `nll + kl_weight · penalty`.
    pub total: f64,
    /// Mean negative log-likelihood over the batch.
    pub nll: f64,
    /// Unweighted [`regularizer_total`].
    pub penalty: f64,
    pub kl_weight: f64,
    pub grad_logits: Matrix,
    pub trace: ForwardTrace,
}

/// Minibatch objective: mean NLL plus `kl_weight` times the network's penalty.
pub fn loss(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    kl_weight: f64,
    rng: &mut RngState,
) -> Result<LossOutput> {
    let trace = net.forward_train(x, rng)?;
    loss_from_trace(net, trace, labels, kl_weight)
}

/// Same as [`loss`] for an already computed forward trace.
pub fn loss_from_trace(
    net: &Network,
    trace: ForwardTrace,
    labels: &[usize],
    kl_weight: f64,
) -> Result<LossOutput> {
    let (nll, grad_logits) = softmax_cross_entropy(trace.logits(), labels)?;
    let penalty = regularizer_total(net, net.variant().regularizer());
    Ok(LossOutput {
        total: nll + kl_weight * penalty,
        nll,
        penalty,
        kl_weight,
        grad_logits,
        trace,
    })
}

/// Gradients of [`LossOutput::total`] with respect to every parameter.
pub fn gradients(net: &Network, out: &LossOutput) -> Result<Gradients> {
    let mut grads = net.backward(&out.trace, &out.grad_logits)?;
    accumulate_penalty_grad(net, net.variant().regularizer(), out.kl_weight, &mut grads);
    Ok(grads)
}
