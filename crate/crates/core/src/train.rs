//! Optimizers, the training loop, and evaluation.

use std::fmt::Write as _;
use std::io::Write;

use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::layers::{Gradients, Network};
use crate::tensor::{Matrix, RngState};
use crate::variants::{build_network, gradients, loss, trainable_mask, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::Sgd { lr, momentum } => {
                if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
                    return Err(Error::domain(format!(
                        "sgd needs lr > 0 and 0 <= momentum < 1 (lr={lr}, momentum={momentum})"
                    )));
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let unit = |b: f64| b > 0.0 && b < 1.0;
                if !(lr > 0.0) || !unit(beta1) || !unit(beta2) || !(eps > 0.0) {
                    return Err(Error::domain(format!(
                        "adam needs lr > 0, 0 < beta1, beta2 < 1, eps > 0 \
                         (lr={lr}, beta1={beta1}, beta2={beta2}, eps={eps})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a list of flat parameter slots.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One Adam update on the slots where `mask` is set.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    mask: &[bool],
    state: &mut AdamState,
    hyper: AdamHyper,
) {
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = hyper;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !mask[slot] {
            continue;
        }
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Heavy-ball SGD; `velocity` is laid out like the parameter slots.
pub fn sgd_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    mask: &[bool],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) {
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !mask[slot] {
            continue;
        }
        let vel = &mut velocity[slot];
        for i in 0..p.len() {
            vel[i] = momentum * vel[i] + g[i];
            p[i] -= lr * vel[i];
        }
    }
}

enum OptimizerState {
    Sgd(Vec<Vec<f64>>),
    Adam(AdamState),
}

/// How the KL term is weighted against the mean NLL of a minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlScaleMode {
    /// `1 / N`: the batch-mean NLL estimates `L_D / N`, so the KL enters
    /// divided by the dataset size. Equivalently, each of the `N / M` steps
    /// of an epoch carries `M / N` of the KL against the batch-summed NLL.
    PerBatch,
    /// Weight 1.
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub kl_scale_mode: KlScaleMode,
    /// KL weight ramps as `min(1, epoch / warmup_epochs)`; 0 disables.
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Evaluate the test set every this many epochs (and at the last one).
    pub eval_every: usize,
    /// Linear learning-rate decay to zero over the final third of training.
    pub lr_decay: bool,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            kl_scale_mode: KlScaleMode::PerBatch,
            warmup_epochs: 10,
            seed: 0,
            eval_every: 1,
            lr_decay: true,
            clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::domain("eval_every must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::domain("clip norm must be positive"));
            }
        }
        Ok(())
    }

    /// Multiplier on the penalty during `epoch` (0-based) for a training set
    /// of `n` samples.
    pub fn kl_weight(&self, epoch: usize, n: usize) -> f64 {
        let base = match self.kl_scale_mode {
            KlScaleMode::PerBatch => 1.0 / n as f64,
            KlScaleMode::Constant => 1.0,
        };
        let ramp = if self.warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        };
        base * ramp
    }

    /// Learning-rate multiplier after `step` of `total` steps.
    pub fn lr_factor(&self, step: usize, total: usize) -> f64 {
        if !self.lr_decay || total == 0 {
            return 1.0;
        }
        let progress = step as f64 / total as f64;
        let start = 2.0 / 3.0;
        if progress <= start {
            1.0
        } else {
            ((1.0 - progress) / (1.0 - start)).max(0.0)
        }
    }
}

/// One row per completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub penalty: f64,
    /// Test error in percent; NaN when not evaluated this epoch.
    pub test_error: f64,
    pub log_alpha_min: f64,
    pub log_alpha_median: f64,
    pub log_alpha_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,train_nll,penalty,test_error,logalpha_min,logalpha_med,logalpha_max";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.train_nll,
                r.penalty,
                r.test_error,
                r.log_alpha_min,
                r.log_alpha_median,
                r.log_alpha_max
            );
        }
        out
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// `(min, median, max)` of the learned `log α` values, or NaNs for variants
/// without a learned rate.
pub fn log_alpha_summary(net: &Network) -> (f64, f64, f64) {
    let mut values = learned_log_alphas(net);
    values.retain(|v| !v.is_nan());
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    (values[0], median, values[n - 1])
}

/// Every learned `log α`: per dense weight (or one per shared layer), or
/// per gate in structured networks.
pub fn learned_log_alphas(net: &Network) -> Vec<f64> {
    if !net.variant().learns_alpha() {
        return Vec::new();
    }
    if net.is_structured() {
        return net.gates().iter().flat_map(|g| g.log_alpha()).collect();
    }
    net.layers()
        .iter()
        .flat_map(|l| match l.alpha_mode() {
            crate::layers::AlphaMode::Shared => vec![l.shared_log_alpha()],
            crate::layers::AlphaMode::PerWeight => l.log_alpha(),
        })
        .collect()
}

/// Percentage of misclassified samples under the deterministic forward
/// pass, evaluated in chunks of `batch_size` rows.
pub fn evaluate_batched(net: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    let batch_size = batch_size.max(1);
    let mut wrong = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = net.forward_eval(&data.features().select_rows(&idx))?;
        for (r, &i) in idx.iter().enumerate() {
            if argmax(logits.row(r)) != data.labels()[i] {
                wrong += 1;
            }
        }
        start = end;
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    evaluate_batched(net, data, 1000)
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(net: &Network, x: &Matrix) -> Result<Vec<usize>> {
    let logits = net.forward_eval(x)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Snapshot with the lowest logged test error, if any epoch was evaluated.
    pub best: Option<(usize, Network)>,
    pub log: TrainLog,
}

fn global_norm(grads: &Gradients, mask: &[bool]) -> f64 {
    grads
        .slices()
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(s, _)| s.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Trains an already built network in place. Stream 1 of `config.seed`
/// drives the training noise, further streams the batch order.
pub fn train_network(
    net: Network,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_network_with(net, train, test, config, |_| {})
}

/// [`train_network`] calling `on_epoch` after every logged epoch.
pub fn train_network_with(
    mut net: Network,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.input_dim() != net.input_dim() {
        return Err(Error::Shape {
            op: "train",
            left: (train.len(), train.input_dim()),
            right: (0, net.input_dim()),
        });
    }
    let mask = trainable_mask(&net);
    let sizes: Vec<usize> = Gradients::zeros_like(&net)
        .slices()
        .iter()
        .map(|s| s.len())
        .collect();
    let mut opt = match config.optimizer {
        OptimizerConfig::Sgd { .. } => {
            OptimizerState::Sgd(sizes.iter().map(|&n| vec![0.0; n]).collect())
        }
        OptimizerConfig::Adam { .. } => OptimizerState::Adam(AdamState::new(&sizes)),
    };
    let mut noise_rng = RngState::with_stream(config.seed, 1);
    let mut batches = BatchIterator::new(train, config.batch_size, config.seed.wrapping_add(1))?;
    let per_epoch = batches.batches_per_epoch();
    let total_steps = per_epoch * config.epochs;
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, Network)> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let kl_weight = config.kl_weight(epoch, train.len());
        let mut nll_sum = 0.0;
        let mut seen = 0usize;
        let mut penalty = 0.0;
        for batch in 0..per_epoch {
            let (x, y) = batches.next_batch();
            let out = loss(&net, &x, &y, kl_weight, &mut noise_rng)?;
            if !out.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: out.total,
                });
            }
            nll_sum += out.nll * y.len() as f64;
            seen += y.len();
            penalty = out.penalty;
            let mut grads = gradients(&net, &out)?;
            if let Some(limit) = config.clip_norm {
                let norm = global_norm(&grads, &mask);
                if norm > limit {
                    let s = limit / norm;
                    for slot in grads.slices_mut() {
                        slot.iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            let lr = config.optimizer.lr() * config.lr_factor(step, total_steps);
            let g = grads.slices();
            let mut params = net.param_slices_mut();
            match (&mut opt, config.optimizer) {
                (
                    OptimizerState::Adam(state),
                    OptimizerConfig::Adam {
                        beta1, beta2, eps, ..
                    },
                ) => {
                    let hyper = AdamHyper {
                        lr,
                        beta1,
                        beta2,
                        eps,
                    };
                    adam_step(&mut params, &g, &mask, state, hyper)
                }
                (OptimizerState::Sgd(vel), OptimizerConfig::Sgd { momentum, .. }) => {
                    sgd_step(&mut params, &g, &mask, vel, lr, momentum)
                }
                _ => unreachable!("optimizer state matches config"),
            }
            let diverged = params.iter().any(|s| s.iter().any(|v| !v.is_finite()));
            if diverged {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: f64::NAN,
                });
            }
            step += 1;
        }

        let evaluate_now = (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs;
        let test_error = match test {
            Some(t) if evaluate_now => evaluate(&net, t)?,
            _ => f64::NAN,
        };
        if !test_error.is_nan() && best.as_ref().is_none_or(|(_, e, _)| test_error < *e) {
            best = Some((epoch, test_error, net.clone()));
        }
        let (lo, med, hi) = log_alpha_summary(&net);
        log.records.push(EpochRecord {
            epoch,
            train_nll: nll_sum / seen.max(1) as f64,
            penalty,
            test_error,
            log_alpha_min: lo,
            log_alpha_median: med,
            log_alpha_max: hi,
        });
        on_epoch(log.records.last().expect("just pushed"));
    }
    Ok(TrainOutcome {
        network: net,
        best: best.map(|(e, _, n)| (e, n)),
        log,
    })
}

/// Builds a network for `spec` (initialized from `config.seed`) and trains it.
pub fn train(
    train: &Dataset,
    test: Option<&Dataset>,
    spec: &NetworkSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let net = build_network(spec, config.seed)?;
    train_network(net, train, test, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_planted_split, make_synthetic_split};
    use crate::variants::DropoutVariant;

    /// Closed-form Adam trajectory for a constant scalar gradient `g`:
    /// `m_t = g(1 − β1ᵗ)`, `v_t = g²(1 − β2ᵗ)`, so the bias-corrected step is
    /// `lr · |g| / (|g| + eps)` every time.
    #[test]
    fn adam_constant_gradient_oracle() {
        let hyper = AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let (lr, eps) = (hyper.lr, hyper.eps);
        let g = 0.37;
        let mut p = vec![1.0];
        let mut state = AdamState::new(&[1]);
        let mut prev = p[0];
        for t in 1..=500 {
            adam_step(&mut [&mut p], &[&[g]], &[true], &mut state, hyper);
            let expected_step = lr * g / (g + eps);
            assert!(((prev - p[0]) - expected_step).abs() < 1e-12, "t={t}");
            prev = p[0];
        }
        assert!((1.0 - p[0] - 500.0 * lr * g / (g + eps)).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_and_mask() {
        let mut p = vec![0.5, -0.25];
        let mut q = vec![2.0];
        let mut state = AdamState::new(&[2, 1]);
        adam_step(
            &mut [&mut p, &mut q],
            &[&[0.0, 0.0], &[1.0]],
            &[true, false],
            &mut state,
            AdamHyper {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        );
        assert_eq!(p, vec![0.5, -0.25]);
        assert_eq!(q, vec![2.0]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = vec![0.0];
        let mut vel = vec![vec![0.0]];
        sgd_step(&mut [&mut p], &[&[1.0]], &[true], &mut vel, 0.1, 0.5);
        sgd_step(&mut [&mut p], &[&[1.0]], &[true], &mut vel, 0.1, 0.5);
        assert!((p[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig {
            optimizer: OptimizerConfig::Sgd {
                lr: 0.1,
                momentum: 1.0,
            },
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.optimizer = OptimizerConfig::Adam {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn kl_weight_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.kl_weight(0, 100), 0.0);
        assert!((c.kl_weight(5, 100) - 0.005).abs() < 1e-15);
        assert_eq!(c.kl_weight(30, 100), 0.01);
        let c = TrainConfig {
            warmup_epochs: 0,
            kl_scale_mode: KlScaleMode::Constant,
            ..TrainConfig::default()
        };
        assert_eq!(c.kl_weight(0, 100), 1.0);
    }

    #[test]
    fn lr_decays_over_last_third() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_factor(0, 300), 1.0);
        assert_eq!(c.lr_factor(200, 300), 1.0);
        assert!((c.lr_factor(250, 300) - 0.5).abs() < 1e-12);
        assert_eq!(c.lr_factor(300, 300), 0.0);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let (_, test) = make_synthetic_split(1, 1, 10, 10, 4).unwrap();
        let mut net =
            build_network(&NetworkSpec::new(vec![4, 10], DropoutVariant::None), 0).unwrap();
        for l in net.layers_mut() {
            l.theta.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
            l.bias[3] = 1.0;
        }
        assert_eq!(evaluate(&net, &test).unwrap(), 90.0);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (train_set, _) = make_synthetic_split(1, 10, 1, 2, 3).unwrap();
        let spec = NetworkSpec::new(vec![3, 4, 2], DropoutVariant::Vbd { per_weight: true });
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&train_set, None, &spec, &cfg).unwrap();
        let init = build_network(&spec, cfg.seed).unwrap();
        assert_eq!(out.network.layers(), init.layers());
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn separable_blobs_reach_zero_error() {
        let (train_set, test) = make_planted_split(3, 100, 50, 2, 4, 0, 6.0).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerConfig::Adam {
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            ..TrainConfig::default()
        };
        let out = train(
            &train_set,
            Some(&test),
            &NetworkSpec::new(vec![4, 8, 2], DropoutVariant::None),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.log.records.len(), 20);
        assert_eq!(out.log.last().unwrap().test_error, 0.0);
    }

    #[test]
    fn evaluation_is_batch_size_invariant() {
        let (train_set, test) = make_synthetic_split(4, 30, 20, 3, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(
            &train_set,
            None,
            &NetworkSpec::new(vec![5, 6, 3], DropoutVariant::Bernoulli { p: 0.5 }),
            &cfg,
        )
        .unwrap();
        let one = evaluate_batched(&out.network, &test, 1).unwrap();
        let all = evaluate_batched(&out.network, &test, test.len()).unwrap();
        assert_eq!(one, all);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 0,
                train_nll: 0.5,
                penalty: 1.25,
                test_error: 3.0,
                log_alpha_min: f64::NAN,
                log_alpha_median: f64::NAN,
                log_alpha_max: f64::NAN,
            }],
        };
        assert_eq!(
            log.to_csv(),
            format!("{TRAIN_LOG_HEADER}\n0,0.5,1.25,3,NaN,NaN,NaN\n")
        );
    }
}
