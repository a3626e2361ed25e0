//! Variational Bayesian dropout for dense feed-forward classifiers.
//!
//! Dense layers carry a Gaussian posterior `N(θ, αθ²)` over each weight and
//! are trained with the local reparameterization trick. The dropout rate `α`
//! is learned under a closed-form penalty `½ log(1 + α⁻¹)` that comes from a
//! hierarchical prior, so no Monte-Carlo KL estimate is needed. Weights (or
//! whole input features, with structured gates) whose learned `α` is large
//! can then be pruned.
//!
//! ```
//! use vbdrop::{build_network, make_synthetic_split, train_network, DropoutVariant,
//!              NetworkSpec, TrainConfig};
//!
//! let (train, test) = make_synthetic_split(7, 40, 20, 3, 8).unwrap();
//! let spec = NetworkSpec::new(vec![8, 16, 3], DropoutVariant::Vbd { per_weight: true });
//! let net = build_network(&spec, 7).unwrap();
//! let config = TrainConfig { epochs: 3, ..TrainConfig::default() };
//! let outcome = train_network(net, &train, Some(&test), &config).unwrap();
//! assert_eq!(outcome.log.records.len(), 3);
//! ```

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod compress;
pub mod data;
pub mod error;
pub mod layers;
pub mod regularizers;
pub mod tensor;
pub mod train;
pub mod variants;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use compress::{
    parse_sweep, prune, prune_neurons, prune_weights, reports_to_csv, reports_to_table,
    sweep_threshold, CompressionReport, DEFAULT_LOG_ALPHA_THRESHOLD,
};
pub use data::{
    load_mnist_dir, make_planted, make_planted_split, make_synthetic, make_synthetic_split,
    BatchIterator, Dataset,
};
pub use error::{Error, Result};
pub use layers::{
    AlphaMode, Gradients, Network, NoiseSample, StructuredDropoutLayer, VariationalDense,
};
pub use regularizers::{
    gamma_star, kl_gaussian_vs_prior, kl_vbd, kl_vbd_grad, kl_vd_approx, mc_kl_oracle,
    regularizer_total, RegularizerKind, VdConstants,
};
pub use tensor::{Matrix, RngState};
pub use train::{
    evaluate, train, train_network, train_network_with, EpochRecord, KlScaleMode, OptimizerConfig,
    TrainConfig, TrainLog, TrainOutcome, TRAIN_LOG_HEADER,
};
pub use variants::{build_network, gradients, loss, DropoutVariant, NetworkSpec};
