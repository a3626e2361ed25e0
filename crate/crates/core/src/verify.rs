//! Self-checks of the penalty math and the backward pass.
//!
//! Each check returns a [`CheckResult`]; the `vbdrop verify` command and the
//! acceptance tests both run them through [`run_checks`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Network, NoiseSample};
use crate::regularizers::{gamma_star, kl_gaussian_vs_prior, kl_vbd, mc_kl_oracle};
use crate::tensor::{Matrix, RngState};
use crate::variants::{build_network, gradients, loss_from_trace, DropoutVariant, NetworkSpec};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const KL_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    /// Closed-form KL at the optimal prior variance against the penalty and a
    /// Monte-Carlo estimate.
    Kl,
    /// `γ* = αθ² + θ²` is the minimizer of the KL over the prior variance.
    Gamma,
    /// The penalty is non-decreasing and concave in `α⁻¹`.
    SparsityShape,
    /// Analytic gradients against central differences with frozen noise.
    Gradients,
}

impl Check {
    pub const ALL: [Check; 4] = [
        Check::Kl,
        Check::Gamma,
        Check::SparsityShape,
        Check::Gradients,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Kl => "kl",
            Check::Gamma => "gamma",
            Check::SparsityShape => "sparsity-shape",
            Check::Gradients => "gradients",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown check `{s}` (expected kl|gamma|sparsity-shape|gradients)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyConfig {
    pub cases: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            cases: 100,
            mc_samples: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.check, self.detail)
    }
}

/// Random `(θ, α)` with `θ ∈ [−2, 2] \ {0}` and `log α` uniform over
/// `[log 0.01, log 100]`.
pub fn random_cases(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = RngState::with_stream(seed, 7);
    let (lo, hi) = (0.01f64.ln(), 100f64.ln());
    (0..n)
        .map(|_| {
            let mut theta = 0.0;
            while theta == 0.0 {
                theta = 4.0 * rng.uniform() - 2.0;
            }
            let alpha = (lo + (hi - lo) * rng.uniform()).exp();
            (theta, alpha)
        })
        .collect()
}

/// Summary of the KL comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct KlCheck {
    pub cases: usize,
    pub max_closed_form_error: f64,
    pub bracketed: usize,
}

pub fn kl_check(config: &VerifyConfig) -> Result<KlCheck> {
    let mut max_err = 0.0f64;
    let mut bracketed = 0;
    for (i, (theta, alpha)) in random_cases(config.cases, config.seed)
        .into_iter()
        .enumerate()
    {
        let gamma = gamma_star(theta, alpha);
        let closed = kl_gaussian_vs_prior(theta, alpha, gamma)?;
        let penalty = kl_vbd(alpha.ln());
        max_err = max_err.max((closed - penalty).abs());
        let mut rng = RngState::with_stream(config.seed, 100 + i as u64);
        let mc = mc_kl_oracle(theta, alpha, gamma, config.mc_samples, &mut rng)?;
        if mc.brackets(penalty, 3.0) {
            bracketed += 1;
        }
    }
    Ok(KlCheck {
        cases: config.cases,
        max_closed_form_error: max_err,
        bracketed,
    })
}

impl KlCheck {
    /// Closed form within [`KL_TOLERANCE`] everywhere and at most 3% of the
    /// Monte-Carlo estimates outside three standard errors.
    pub fn passed(&self) -> bool {
        let allowed_misses = (self.cases * 3).div_ceil(100);
        self.max_closed_form_error <= KL_TOLERANCE && self.cases - self.bracketed <= allowed_misses
    }
}

/// Largest violation of `KL(γ*) ≤ KL(γ)` over a set of perturbed `γ`
/// (positive means a violation).
pub fn gamma_check(config: &VerifyConfig) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for (theta, alpha) in random_cases(config.cases, config.seed) {
        let g = gamma_star(theta, alpha);
        let at_opt = kl_gaussian_vs_prior(theta, alpha, g)?;
        for factor in [0.5, 0.9, 0.999, 1.001, 1.1, 2.0] {
            let other = kl_gaussian_vs_prior(theta, alpha, g * factor)?;
            worst = worst.max(at_opt - other);
        }
    }
    Ok(worst)
}

/// Penalty as a function of `t = α⁻¹`.
pub fn penalty_of_inverse_alpha(t: f64) -> f64 {
    kl_vbd(-t.ln())
}

/// Counts monotonicity and midpoint-concavity violations on a log grid of
/// `points` values over `[1e-6, 1e6]`. Concavity is tested on every pair of
/// grid points up to `max_gap` apart.
pub fn sparsity_shape_violations(points: usize, max_gap: usize) -> (usize, usize) {
    let (lo, hi) = (1e-6f64.ln(), 1e6f64.ln());
    let grid: Vec<f64> = (0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp())
        .collect();
    let f: Vec<f64> = grid.iter().map(|&t| penalty_of_inverse_alpha(t)).collect();
    let monotone = f.windows(2).filter(|w| w[1] < w[0]).count();
    let mut concave = 0;
    for i in 0..points {
        for j in i + 1..points.min(i + max_gap + 1) {
            let mid = penalty_of_inverse_alpha(0.5 * (grid[i] + grid[j]));
            if mid < 0.5 * (f[i] + f[j]) {
                concave += 1;
            }
        }
    }
    (monotone, concave)
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(slot, index)` of the worst parameter in [`Network::param_slices_mut`] order.
    pub worst: (usize, usize),
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_TOLERANCE
    }
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn objective(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    kl_weight: f64,
    noise: &NoiseSample,
) -> Result<f64> {
    let trace = net.forward_with_noise(x, noise.clone())?;
    Ok(loss_from_trace(net, trace, labels, kl_weight)?.total)
}

/// Compares every analytic parameter gradient with a central difference of
/// step `h`, holding the noise fixed.
pub fn finite_difference_check(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    kl_weight: f64,
    noise: &NoiseSample,
    h: f64,
) -> Result<GradCheck> {
    let trace = net.forward_with_noise(x, noise.clone())?;
    let out = loss_from_trace(net, trace, labels, kl_weight)?;
    let grads = gradients(net, &out)?;
    let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();

    let mut probe = net.clone();
    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    let mut checked = 0;
    for (slot, values) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let original = probe.param_slices_mut()[slot][i];
            probe.param_slices_mut()[slot][i] = original + h;
            let up = objective(&probe, x, labels, kl_weight, noise)?;
            probe.param_slices_mut()[slot][i] = original - h;
            let down = objective(&probe, x, labels, kl_weight, noise)?;
            probe.param_slices_mut()[slot][i] = original;
            let numeric = (up - down) / (2.0 * h);
            let rel = relative_error(a, numeric);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = (slot, i);
            }
        }
    }
    Ok(GradCheck {
        label: net.variant().to_string(),
        checked,
        max_rel_error: max_rel,
        worst,
    })
}

/// Variants exercised by the gradient check.
pub fn gradient_check_variants() -> Vec<(DropoutVariant, bool)> {
    vec![
        (DropoutVariant::None, false),
        (DropoutVariant::GaussianDropout { alpha: 1.0 }, false),
        (DropoutVariant::Vd { per_weight: false }, false),
        (DropoutVariant::Vd { per_weight: true }, false),
        (DropoutVariant::Vbd { per_weight: false }, false),
        (DropoutVariant::Vbd { per_weight: true }, false),
        (DropoutVariant::Bernoulli { p: 0.3 }, false),
        (DropoutVariant::Vbd { per_weight: true }, true),
    ]
}

/// Finite-difference check on a 7-6-5-3 network with a batch of 4 for one
/// variant (`structured` adds gates).
pub fn gradient_check_variant(
    variant: DropoutVariant,
    structured: bool,
    seed: u64,
) -> Result<GradCheck> {
    let spec = NetworkSpec::new(vec![7, 6, 5, 3], variant).structured(structured);
    let mut net = build_network(&spec, seed)?;
    let mut rng = RngState::with_stream(seed, 3);
    // Move log α away from its initial value so the penalty slope is generic.
    for l in net.layers_mut() {
        l.set_shared_log_alpha(l.shared_log_alpha() + rng.uniform() - 0.5);
        for ls in l.log_sigma2.as_mut_slice() {
            *ls += 2.0 * rng.uniform() - 1.0;
        }
        for b in &mut l.bias {
            *b = 0.1 * rng.standard_normal();
        }
    }
    for g in net.gates_mut() {
        for (t, ls) in g.theta.iter_mut().zip(&mut g.log_sigma2) {
            *t += 0.2 * rng.standard_normal();
            *ls += 2.0 * rng.uniform() - 1.0;
        }
    }
    let x = rng.standard_normal_matrix(4, 7);
    let labels = vec![0, 2, 1, 2];
    let noise = net.sample_noise(4, &mut rng)?;
    let mut check = finite_difference_check(&net, &x, &labels, 0.05, &noise, FD_STEP)?;
    if structured {
        check.label.push_str("+gates");
    }
    Ok(check)
}

pub fn run_check(check: Check, config: &VerifyConfig) -> Result<CheckResult> {
    let (passed, detail) = match check {
        Check::Kl => {
            let k = kl_check(config)?;
            (
                k.passed(),
                format!(
                    "{} cases, max |closed form - penalty| = {:.2e}, MC within 3 SE: {}/{} ({} samples)",
                    k.cases, k.max_closed_form_error, k.bracketed, k.cases, config.mc_samples
                ),
            )
        }
        Check::Gamma => {
            let worst = gamma_check(config)?;
            (
                worst <= 0.0,
                format!("largest KL(γ*) - KL(γ) over perturbed γ = {worst:.3e}"),
            )
        }
        Check::SparsityShape => {
            let (m, c) = sparsity_shape_violations(1000, 50);
            (
                m == 0 && c == 0,
                format!("1000-point grid: {m} monotonicity and {c} concavity violations"),
            )
        }
        Check::Gradients => {
            let mut worst = 0.0f64;
            let mut lines = Vec::new();
            let mut ok = true;
            for (variant, structured) in gradient_check_variants() {
                let g = gradient_check_variant(variant, structured, config.seed)?;
                ok &= g.passed();
                worst = worst.max(g.max_rel_error);
                lines.push(format!("{}={:.1e}", g.label, g.max_rel_error));
            }
            (
                ok,
                format!("max rel error {worst:.2e} [{}]", lines.join(", ")),
            )
        }
    };
    Ok(CheckResult {
        check,
        passed,
        detail,
    })
}

pub fn run_checks(checks: &[Check], config: &VerifyConfig) -> Result<Vec<CheckResult>> {
    checks.iter().map(|&c| run_check(c, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_check_names() {
        for c in Check::ALL {
            assert_eq!(c.name().parse::<Check>().unwrap(), c);
        }
        assert!("everything".parse::<Check>().is_err());
    }

    #[test]
    fn cases_stay_in_range() {
        for (t, a) in random_cases(500, 3) {
            assert!(t != 0.0 && t.abs() <= 2.0);
            assert!((0.01..=100.0).contains(&a));
        }
    }

    #[test]
    fn cheap_kl_check_passes() {
        let cfg = VerifyConfig {
            cases: 20,
            mc_samples: 20_000,
            seed: 1,
        };
        let k = kl_check(&cfg).unwrap();
        assert!(k.max_closed_form_error < KL_TOLERANCE, "{k:?}");
        assert!(k.passed(), "{k:?}");
    }

    #[test]
    fn gamma_and_shape_checks_pass() {
        assert!(gamma_check(&VerifyConfig::default()).unwrap() <= 0.0);
        assert_eq!(sparsity_shape_violations(200, 10), (0, 0));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn penalty_weight_reaches_gradients() {
        // The check passes on the true objective, and negating the penalty
        // weight must change the analytic gradients it compares against.
        let spec = NetworkSpec::new(vec![3, 4, 2], DropoutVariant::Vbd { per_weight: true });
        let net = build_network(&spec, 2).unwrap();
        let mut rng = RngState::new(5);
        let x = rng.standard_normal_matrix(4, 3);
        let labels = [0, 1, 1, 0];
        let noise = net.sample_noise(4, &mut rng).unwrap();
        let good = finite_difference_check(&net, &x, &labels, 0.5, &noise, FD_STEP).unwrap();
        assert!(good.passed(), "{good:?}");
        let trace = net.forward_with_noise(&x, noise.clone()).unwrap();
        let mut out = loss_from_trace(&net, trace, &labels, 0.5).unwrap();
        out.kl_weight = -0.5;
        let wrong = gradients(&net, &out).unwrap();
        let right = {
            let trace = net.forward_with_noise(&x, noise).unwrap();
            gradients(&net, &loss_from_trace(&net, trace, &labels, 0.5).unwrap()).unwrap()
        };
        assert_ne!(wrong, right);
    }
}
