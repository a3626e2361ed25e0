//! `vbdrop`: train, evaluate, prune and self-check dropout networks.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage error.

mod settings;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vbdrop::verify::{run_checks, Check, VerifyConfig};
use vbdrop::{
    build_network, evaluate, load_mnist_dir, make_planted_split, parse_sweep, prune,
    reports_to_csv, reports_to_table, sweep_threshold, train_network_with, Checkpoint, Dataset,
    Network,
};

use settings::{read_config, Settings};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    /// Any library error caused by a bad setting.
    pub fn invalid(e: vbdrop::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<vbdrop::Error> for CliError {
    fn from(e: vbdrop::Error) -> Self {
        match e {
            vbdrop::Error::Usage(m) => CliError::Usage(m),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "vbdrop",
    version,
    about = "Variational Bayesian dropout for dense networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network; writes manifest.txt, train_log.csv and model.ckpt to --out.
    Train(RunArgs),
    /// Test error of a saved checkpoint.
    Eval(CheckpointArgs),
    /// Prune a saved checkpoint at --threshold or over --sweep.
    Compress(CheckpointArgs),
    /// Check the penalty math and the gradients.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/vbdrop")]
    out: PathBuf,
    /// mnist | synthetic
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Use only the first N training samples (0 = all).
    #[arg(long)]
    train_limit: Option<usize>,
    /// none | bernoulli | gaussian-noise | gaussian-dropout | vd | vbd
    #[arg(long)]
    variant: Option<String>,
    /// shared | per-weight
    #[arg(long)]
    alpha_mode: Option<String>,
    /// Dropout rate p for the fixed-rate variants.
    #[arg(long)]
    rate: Option<f64>,
    /// Comma-separated widths, input first (or `auto`).
    #[arg(long)]
    arch: Option<String>,
    /// Learned per-feature gates in front of every dense layer.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    structured: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    noise_on_input: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    alpha_frozen: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// adam | sgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Epochs over which the penalty weight ramps up (0 = none).
    #[arg(long)]
    warmup: Option<usize>,
    /// per-batch | constant
    #[arg(long)]
    kl_scale: Option<String>,
    /// Global gradient-norm clip (0 = off).
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    lr_decay: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the synthetic dataset.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Pruning threshold on log alpha.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// Threshold sweep lo:hi:step.
    #[arg(long, allow_hyphen_values = true)]
    sweep: Option<String>,
    #[arg(long)]
    synth_classes: Option<usize>,
    #[arg(long)]
    synth_informative: Option<usize>,
    #[arg(long)]
    synth_noise: Option<usize>,
    /// Synthetic training samples per class.
    #[arg(long)]
    synth_train: Option<usize>,
    /// Synthetic test samples per class.
    #[arg(long)]
    synth_test: Option<usize>,
    #[arg(long)]
    synth_separation: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        let s = |v: &Option<String>| v.clone();
        fn t<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(T::to_string)
        }
        put("data", s(&self.data));
        put(
            "mnist-dir",
            self.mnist_dir.as_ref().map(|p| p.display().to_string()),
        );
        put("train-limit", t(&self.train_limit));
        put("variant", s(&self.variant));
        put("alpha-mode", s(&self.alpha_mode));
        put("rate", t(&self.rate));
        put("arch", s(&self.arch));
        put("structured", t(&self.structured));
        put("noise-on-input", t(&self.noise_on_input));
        put("alpha-frozen", t(&self.alpha_frozen));
        put("epochs", t(&self.epochs));
        put("batch-size", t(&self.batch_size));
        put("optimizer", s(&self.optimizer));
        put("lr", t(&self.lr));
        put("momentum", t(&self.momentum));
        put("warmup", t(&self.warmup));
        put("kl-scale", s(&self.kl_scale));
        put("clip-norm", t(&self.clip_norm));
        put("lr-decay", t(&self.lr_decay));
        put("seed", t(&self.seed));
        put("data-seed", t(&self.data_seed));
        put("eval-every", t(&self.eval_every));
        put("threshold", t(&self.threshold));
        put("sweep", s(&self.sweep));
        put("synth-classes", t(&self.synth_classes));
        put("synth-informative", t(&self.synth_informative));
        put("synth-noise", t(&self.synth_noise));
        put("synth-train", t(&self.synth_train));
        put("synth-test", t(&self.synth_test));
        put("synth-separation", t(&self.synth_separation));
        m
    }

    fn file_layer(&self) -> Result<BTreeMap<String, String>, CliError> {
        match &self.config {
            Some(p) => read_config(p),
            None => Ok(BTreeMap::new()),
        }
    }
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Checkpoint to load (default: <out>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Monte-Carlo samples per KL case.
    #[arg(long, default_value_t = 1_000_000)]
    mc_samples: usize,
    /// Random (θ, α) cases.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run only these checks: kl | gamma | sparsity-shape | gradients.
    #[arg(long = "check")]
    checks: Vec<String>,
}

struct LoadedData {
    train: Dataset,
    test: Dataset,
    default_arch: Vec<usize>,
}

fn load_data(s: &Settings) -> Result<LoadedData, CliError> {
    match s.get("data") {
        "mnist" => {
            let dir = Path::new(s.get("mnist-dir"));
            let (mut train, test) = load_mnist_dir(dir).map_err(|e| {
                CliError::Failure(format!("loading MNIST from {}: {e}", dir.display()))
            })?;
            let limit = s.usize("train-limit")?;
            if limit > 0 {
                train = train.head(limit);
            }
            Ok(LoadedData {
                train,
                test,
                default_arch: vec![784, 300, 100, 10],
            })
        }
        "synthetic" => {
            let classes = s.usize("synth-classes")?;
            let informative = s.usize("synth-informative")?;
            let noise = s.usize("synth-noise")?;
            let (mut train, test) = make_planted_split(
                s.u64("data-seed")?,
                s.usize("synth-train")?,
                s.usize("synth-test")?,
                classes,
                informative,
                noise,
                s.f64("synth-separation")?,
            )
            .map_err(CliError::invalid)?;
            let limit = s.usize("train-limit")?;
            if limit > 0 {
                train = train.head(limit);
            }
            Ok(LoadedData {
                train,
                test,
                default_arch: vec![informative + noise, 32, 16, classes],
            })
        }
        other => Err(CliError::Usage(format!(
            "unknown data source `{other}` (expected mnist|synthetic)"
        ))),
    }
}

fn resolve_arch(s: &Settings, data: &LoadedData) -> Result<Vec<usize>, CliError> {
    let arch = s.arch()?.unwrap_or_else(|| data.default_arch.clone());
    let (input, classes) = (data.train.input_dim(), data.train.num_classes());
    if arch.len() < 2 || arch[0] != input || *arch.last().unwrap() != classes {
        return Err(CliError::Usage(format!(
            "architecture {arch:?} must start with the input width {input} and end with {classes} classes"
        )));
    }
    Ok(arch)
}

fn thresholds(s: &Settings) -> Result<Vec<f64>, CliError> {
    let sweep = s.get("sweep");
    if sweep.is_empty() {
        Ok(vec![s.f64("threshold")?])
    } else {
        parse_sweep(sweep).map_err(CliError::invalid)
    }
}

fn prunable(net: &Network) -> bool {
    net.is_structured()
        || (net.variant().learns_alpha()
            && net.variant().alpha_mode() == vbdrop::AlphaMode::PerWeight)
}

fn write_compression(
    out: &Path,
    net: &Network,
    thresholds: &[f64],
    test: &Dataset,
) -> Result<(), CliError> {
    let reports = sweep_threshold(net, thresholds, Some(test))?;
    fs::write(out.join("compression.csv"), reports_to_csv(&reports))?;
    let table = reports_to_table(&reports);
    fs::write(out.join("compression.txt"), &table)?;
    print!("{table}");
    if let [single] = thresholds {
        let (pruned, _) = prune(net, *single, None)?;
        Checkpoint::new(pruned).save(out.join("pruned.ckpt"))?;
    }
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<(), CliError> {
    let cli = args.overrides();
    let file = args.file_layer()?;
    let s = Settings::resolve(&[&cli, &file]);
    let config = s.train_config()?;
    let data = load_data(&s)?;
    let arch = resolve_arch(&s, &data)?;
    let spec = s.network_spec(arch)?;
    let thresholds = thresholds(&s)?;

    fs::create_dir_all(&args.out)?;
    let manifest = format!(
        "# vbdrop run manifest; replay with `vbdrop train --config <this file>`\nmeta.command=train\nmeta.version={}\nmeta.train-samples={}\nmeta.test-samples={}\n{}",
        env!("CARGO_PKG_VERSION"),
        data.train.len(),
        data.test.len(),
        s.to_config_text()
    );
    fs::write(args.out.join("manifest.txt"), manifest)?;

    let net = build_network(&spec, config.seed)?;
    eprintln!(
        "training {} on {} samples ({} epochs, arch {:?})",
        spec.variant,
        data.train.len(),
        config.epochs,
        spec.arch
    );
    let outcome = train_network_with(net, &data.train, Some(&data.test), &config, |r| {
        eprintln!(
            "epoch {:>3}  nll {:.4}  penalty {:.1}  test error {:.2}%  log α median {:.2}",
            r.epoch, r.train_nll, r.penalty, r.test_error, r.log_alpha_median
        );
    })?;
    fs::write(args.out.join("train_log.csv"), outcome.log.to_csv())?;
    let mut ckpt = Checkpoint::new(outcome.network.clone());
    ckpt.metadata = s.values().clone();
    ckpt.save(args.out.join("model.ckpt"))?;

    let error = evaluate(&outcome.network, &data.test)?;
    println!("test error: {error:.2}%");
    if prunable(&outcome.network) {
        write_compression(&args.out, &outcome.network, &thresholds, &data.test)?;
    }
    Ok(())
}

fn load_checkpoint(args: &CheckpointArgs) -> Result<(Checkpoint, Settings), CliError> {
    let path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.run.out.join("model.ckpt"));
    let ckpt = Checkpoint::load(&path)
        .map_err(|e| CliError::Failure(format!("loading {}: {e}", path.display())))?;
    let stored: BTreeMap<String, String> = ckpt
        .metadata
        .iter()
        .filter(|(k, _)| settings::is_known(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let cli = args.run.overrides();
    let file = args.run.file_layer()?;
    let s = Settings::resolve(&[&cli, &file, &stored]);
    Ok((ckpt, s))
}

fn cmd_eval(args: &CheckpointArgs) -> Result<(), CliError> {
    let (ckpt, s) = load_checkpoint(args)?;
    let data = load_data(&s)?;
    if data.test.input_dim() != ckpt.network.input_dim() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} inputs, data has {}",
            ckpt.network.input_dim(),
            data.test.input_dim()
        )));
    }
    let error = evaluate(&ckpt.network, &data.test)?;
    println!("test error: {error:.2}%");
    Ok(())
}

fn cmd_compress(args: &CheckpointArgs) -> Result<(), CliError> {
    let (ckpt, s) = load_checkpoint(args)?;
    if !prunable(&ckpt.network) {
        return Err(CliError::Usage(
            "checkpoint has no per-weight or gate dropout rates to prune by".into(),
        ));
    }
    let data = load_data(&s)?;
    fs::create_dir_all(&args.run.out)?;
    write_compression(&args.run.out, &ckpt.network, &thresholds(&s)?, &data.test)
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let checks: Vec<Check> = if args.checks.is_empty() {
        Check::ALL.to_vec()
    } else {
        args.checks
            .iter()
            .map(|c| c.parse().map_err(CliError::invalid))
            .collect::<Result<_, _>>()?
    };
    if args.mc_samples < 2 || args.cases == 0 {
        return Err(CliError::Usage(
            "need --mc-samples >= 2 and --cases >= 1".into(),
        ));
    }
    let config = VerifyConfig {
        cases: args.cases,
        mc_samples: args.mc_samples,
        seed: args.seed,
    };
    let results = run_checks(&checks, &config)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Failure(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
