//! KL penalties on the dropout ratio `α`.
//!
//! Under the hierarchical prior `W ~ N(0, γ)`, `γ ~ U(a, b)` with a point-mass
//! posterior on `γ`, the KL between `q(W) = N(θ, αθ²)` and the prior is
//! minimized at `γ* = αθ² + θ²`. Substituting gives a per-weight penalty that
//! depends on `α` only:
//!
//! ```text
//! KL = ½ log(1 + α⁻¹)
//! ```
//!
//! [`kl_vbd`] evaluates it; [`kl_vd_approx`] is the sigmoid-fit approximation
//! used by sparse variational dropout with a log-uniform prior, kept as a
//! baseline. [`kl_gaussian_vs_prior`], [`gamma_star`] and [`mc_kl_oracle`]
//! exist to check the closed form independently.

use crate::error::{Error, Result};
use crate::layers::{per_weight_log_alpha, AlphaMode, DenseMode, Gradients, Network};
use crate::tensor::RngState;

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `½ log(1 + α⁻¹)` as a function of `log α`.
pub fn kl_vbd(log_alpha: f64) -> f64 {
    0.5 * softplus(-log_alpha)
}

/// `d kl_vbd / d log α = −½ σ(−log α)`.
pub fn kl_vbd_grad(log_alpha: f64) -> f64 {
    -0.5 * sigmoid(-log_alpha)
}

/// Constants of the sigmoid approximation to the log-uniform KL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VdConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl Default for VdConstants {
    fn default() -> Self {
        VdConstants {
            k1: 0.63576,
            k2: 1.87320,
            k3: 1.48695,
        }
    }
}

/// Approximate KL to the log-uniform prior:
/// `−k1 σ(k2 + k3 log α) + ½ log(1 + α⁻¹) + k1`. The trailing `k1` makes the
/// penalty vanish as `log α → +∞`, like [`kl_vbd`].
pub fn kl_vd_approx(log_alpha: f64, c: VdConstants) -> f64 {
    c.k1 - c.k1 * sigmoid(c.k2 + c.k3 * log_alpha) + kl_vbd(log_alpha)
}

pub fn kl_vd_approx_grad(log_alpha: f64, c: VdConstants) -> f64 {
    let s = sigmoid(c.k2 + c.k3 * log_alpha);
    -c.k1 * c.k3 * s * (1.0 - s) + kl_vbd_grad(log_alpha)
}

/// Closed-form `KL(N(m_q, v_q) ‖ N(m_p, v_p))`.
pub fn kl_gaussians(mean_q: f64, var_q: f64, mean_p: f64, var_p: f64) -> Result<f64> {
    if !(var_q > 0.0 && var_p > 0.0) {
        return Err(Error::domain(format!(
            "variances must be positive, got {var_q} and {var_p}"
        )));
    }
    Ok(0.5 * (var_p / var_q).ln() + (var_q + (mean_q - mean_p).powi(2)) / (2.0 * var_p) - 0.5)
}

/// Smallest `|θ|` used by the diagnostic KL below.
pub const THETA_FLOOR: f64 = 1e-12;

/// `KL(N(θ, αθ²) ‖ N(0, γ)) = ½ log(γ / αθ²) + (αθ² + θ²) / 2γ − ½`.
pub fn kl_gaussian_vs_prior(theta: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(gamma > 0.0) {
        return Err(Error::domain(format!(
            "alpha and gamma must be positive, got {alpha} and {gamma}"
        )));
    }
    let t2 = theta.abs().max(THETA_FLOOR).powi(2);
    let var_q = alpha * t2;
    Ok(0.5 * (gamma / var_q).ln() + (var_q + t2) / (2.0 * gamma) - 0.5)
}

/// Prior variance minimizing [`kl_gaussian_vs_prior`]: `γ* = αθ² + θ²`.
pub fn gamma_star(theta: f64, alpha: f64) -> f64 {
    alpha * theta * theta + theta * theta
}

/// The hyper-prior `γ ~ U(a, b)`. With a point-mass posterior inside
/// `[a, b]`, its KL is the constant `log(b − a)`, which never enters an
/// objective; the bounds are kept only to state that constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HierarchicalPriorSpec {
    pub lower: f64,
    pub upper: f64,
}

impl HierarchicalPriorSpec {
    pub fn hyperprior_kl(&self) -> Result<f64> {
        if !(self.upper > self.lower) {
            return Err(Error::domain("uniform hyper-prior needs upper > lower"));
        }
        Ok((self.upper - self.lower).ln())
    }

    /// Whether a point mass at `gamma` has finite KL to the hyper-prior.
    pub fn supports(&self, gamma: f64) -> bool {
        (self.lower..=self.upper).contains(&gamma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    /// `|estimate − value| ≤ k · std_error`.
    pub fn brackets(&self, value: f64, k: f64) -> bool {
        (self.estimate - value).abs() <= k * self.std_error
    }
}

/// Monte-Carlo `E_q[log q(w) − log p(w)]` for two Gaussians.
pub fn mc_kl_gaussians(
    mean_q: f64,
    var_q: f64,
    mean_p: f64,
    var_p: f64,
    samples: usize,
    rng: &mut RngState,
) -> Result<McEstimate> {
    if !(var_q > 0.0 && var_p > 0.0) {
        return Err(Error::domain("variances must be positive"));
    }
    if samples < 2 {
        return Err(Error::domain("need at least two samples"));
    }
    let log_ratio = 0.5 * (var_p / var_q).ln();
    let sd_q = var_q.sqrt();
    // Welford accumulation of log q(w) − log p(w).
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..samples {
        let eps = rng.standard_normal();
        let w = mean_q + sd_q * eps;
        let x = log_ratio - 0.5 * eps * eps + (w - mean_p).powi(2) / (2.0 * var_p);
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / samples as f64).sqrt(),
        samples,
    })
}

/// Monte-Carlo estimate of `KL(N(θ, αθ²) ‖ N(0, γ))`.
pub fn mc_kl_oracle(
    theta: f64,
    alpha: f64,
    gamma: f64,
    samples: usize,
    rng: &mut RngState,
) -> Result<McEstimate> {
    if !(alpha > 0.0) || !(gamma > 0.0) {
        return Err(Error::domain("alpha and gamma must be positive"));
    }
    let t2 = theta.abs().max(THETA_FLOOR).powi(2);
    mc_kl_gaussians(theta, alpha * t2, 0.0, gamma, samples, rng)
}

/// Penalty attached to the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegularizerKind {
    None,
    VbdClosedForm,
    VdApprox(VdConstants),
}

impl RegularizerKind {
    pub fn penalty(self, log_alpha: f64) -> f64 {
        match self {
            RegularizerKind::None => 0.0,
            RegularizerKind::VbdClosedForm => kl_vbd(log_alpha),
            RegularizerKind::VdApprox(c) => kl_vd_approx(log_alpha, c),
        }
    }

    pub fn derivative(self, log_alpha: f64) -> f64 {
        match self {
            RegularizerKind::None => 0.0,
            RegularizerKind::VbdClosedForm => kl_vbd_grad(log_alpha),
            RegularizerKind::VdApprox(c) => kl_vd_approx_grad(log_alpha, c),
        }
    }
}

/// Sum of the per-weight penalty over every variational parameter group of
/// the network: local-reparameterization dense layers (`K·D` copies of the
/// shared value in shared mode) and structured gates.
pub fn regularizer_total(net: &Network, kind: RegularizerKind) -> f64 {
    if kind == RegularizerKind::None {
        return 0.0;
    }
    let mut total = 0.0;
    for (layer, mode) in net.layers.iter().zip(&net.modes) {
        if *mode != DenseMode::LocalReparam {
            continue;
        }
        total += match layer.alpha_mode {
            AlphaMode::Shared => layer.theta.len() as f64 * kind.penalty(layer.shared_log_alpha),
            AlphaMode::PerWeight => layer
                .theta
                .as_slice()
                .iter()
                .zip(layer.log_sigma2.as_slice())
                .map(|(&t, &ls)| kind.penalty(per_weight_log_alpha(t, ls)))
                .sum(),
        };
    }
    for gate in &net.gates {
        total += gate
            .theta
            .iter()
            .zip(&gate.log_sigma2)
            .map(|(&t, &ls)| kind.penalty(per_weight_log_alpha(t, ls)))
            .sum::<f64>();
    }
    total
}

/// Adds `scale · ∂regularizer_total/∂params` into `grads`.
///
/// With `log α = log σ² − log θ²`, the per-weight penalty `f(log α)` has
/// `∂/∂log σ² = f'` and `∂/∂θ = −2 f' / θ`; both vanish where `θ = 0`.
pub fn accumulate_penalty_grad(
    net: &Network,
    kind: RegularizerKind,
    scale: f64,
    grads: &mut Gradients,
) {
    if kind == RegularizerKind::None || scale == 0.0 {
        return;
    }
    let per_weight = |theta: &[f64], log_sigma2: &[f64], g_theta: &mut [f64], g_ls: &mut [f64]| {
        for i in 0..theta.len() {
            let t = theta[i];
            if t == 0.0 {
                continue;
            }
            let d = scale * kind.derivative(per_weight_log_alpha(t, log_sigma2[i]));
            g_ls[i] += d;
            g_theta[i] -= 2.0 * d / t;
        }
    };
    for ((layer, mode), lg) in net.layers.iter().zip(&net.modes).zip(&mut grads.layers) {
        if *mode != DenseMode::LocalReparam {
            continue;
        }
        match layer.alpha_mode {
            AlphaMode::Shared => {
                lg.shared_log_alpha +=
                    scale * layer.theta.len() as f64 * kind.derivative(layer.shared_log_alpha);
            }
            AlphaMode::PerWeight => per_weight(
                layer.theta.as_slice(),
                layer.log_sigma2.as_slice(),
                lg.theta.as_mut_slice(),
                lg.log_sigma2.as_mut_slice(),
            ),
        }
    }
    for (gate, gg) in net.gates.iter().zip(&mut grads.gates) {
        per_weight(
            &gate.theta,
            &gate.log_sigma2,
            &mut gg.theta,
            &mut gg.log_sigma2,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2_HALF: f64 = 0.346_573_590_279_972_6;

    #[test]
    fn kl_vbd_values() {
        assert!((kl_vbd(0.0) - LN2_HALF).abs() < 1e-15);
        assert!((kl_vbd(3f64.ln()) - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((kl_vbd(3f64.ln()) - 0.143841).abs() < 1e-6);
        assert_eq!(kl_vbd(f64::INFINITY), 0.0);
        assert!(kl_vbd(800.0) < 1e-300);
        // Large negative log α: ½ log(1 + 1/α) ≈ −½ log α.
        assert!((kl_vbd(-800.0) - 400.0).abs() < 1e-12);
    }

    #[test]
    fn kl_vbd_grad_matches_central_difference() {
        for &la in &[-6.0, -1.3, 0.0, 0.7, 4.2, 9.0] {
            let h = 1e-5;
            let fd = (kl_vbd(la + h) - kl_vbd(la - h)) / (2.0 * h);
            assert!((fd - kl_vbd_grad(la)).abs() < 1e-8, "la={la}");
        }
    }

    #[test]
    fn kl_gaussian_vs_prior_values() {
        let v = kl_gaussian_vs_prior(1.0, 1.0, 2.0).unwrap();
        assert!((v - LN2_HALF).abs() < 1e-15);
        assert!(kl_gaussian_vs_prior(1.0, 0.0, 2.0).is_err());
        assert!(kl_gaussian_vs_prior(1.0, 1.0, -2.0).is_err());
        let direct = kl_gaussians(1.0, 1.0, 0.0, 2.0).unwrap();
        assert!((direct - v).abs() < 1e-15);
    }

    #[test]
    fn gamma_star_values() {
        assert!((gamma_star(0.5, 0.2) - 0.3).abs() < 1e-15);
        assert_eq!(gamma_star(0.0, 0.7), 0.0);
    }

    #[test]
    fn kl_at_gamma_star_is_the_closed_form() {
        let mut rng = RngState::new(17);
        for _ in 0..200 {
            let theta = 4.0 * rng.uniform() - 2.0;
            let alpha = (rng.uniform() * 9.0 - 4.5).exp();
            let kl = kl_gaussian_vs_prior(theta, alpha, gamma_star(theta, alpha)).unwrap();
            assert!((kl - kl_vbd(alpha.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_star_is_a_local_minimum() {
        let mut rng = RngState::new(18);
        for _ in 0..200 {
            let theta = 4.0 * rng.uniform() - 2.0 + 1e-3;
            let alpha = (rng.uniform() * 6.0 - 3.0).exp();
            let g = gamma_star(theta, alpha);
            let at = kl_gaussian_vs_prior(theta, alpha, g).unwrap();
            for f in [1.0 - 1e-3, 1.0 + 1e-3] {
                assert!(at <= kl_gaussian_vs_prior(theta, alpha, g * f).unwrap());
            }
        }
    }

    #[test]
    fn kl_vd_approx_limits_and_value() {
        let c = VdConstants::default();
        assert!(kl_vd_approx(60.0, c).abs() < 1e-12);
        assert!(kl_vd_approx(-100.0, c) > 49.0);
        let expected = c.k1 * (1.0 - sigmoid(c.k2)) + 0.5 * 2f64.ln();
        assert!((kl_vd_approx(0.0, c) - expected).abs() < 1e-15);
        for &la in &[-5.0, -0.5, 0.0, 1.5, 6.0] {
            let h = 1e-5;
            let fd = (kl_vd_approx(la + h, c) - kl_vd_approx(la - h, c)) / (2.0 * h);
            assert!((fd - kl_vd_approx_grad(la, c)).abs() < 1e-8);
        }
    }

    #[test]
    fn mc_oracle_cases() {
        let mut rng = RngState::new(5);
        // q = p exactly: every log-ratio is zero up to rounding.
        let same = mc_kl_gaussians(0.0, 0.3, 0.0, 0.3, 10_000, &mut rng).unwrap();
        assert!(same.estimate.abs() < 1e-12 && same.std_error < 1e-12);

        let est = mc_kl_oracle(1.0, 1.0, 2.0, 1_000_000, &mut rng).unwrap();
        assert!(est.brackets(LN2_HALF, 3.0), "{est:?}");

        let small = mc_kl_oracle(1.0, 1.0, 2.0, 10_000, &mut rng).unwrap();
        let ratio = small.std_error / est.std_error;
        assert!((7.0..=13.0).contains(&ratio), "SE ratio {ratio}");

        assert!(mc_kl_oracle(1.0, -1.0, 2.0, 100, &mut rng).is_err());
    }

    #[test]
    fn hyperprior_constant() {
        let p = HierarchicalPriorSpec {
            lower: 0.0,
            upper: 1e6,
        };
        assert!((p.hyperprior_kl().unwrap() - 1e6f64.ln()).abs() < 1e-12);
        assert!(p.supports(gamma_star(0.3, 2.0)));
        assert!(!p.supports(-1.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
