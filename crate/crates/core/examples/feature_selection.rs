//! Structured gates on planted data: which input features survive pruning?
//!
//! `cargo run --example feature_selection -- [epochs] [lr] [batch] [n_per_class]`

use vbdrop::{
    build_network, evaluate, make_planted_split, prune_neurons, train_network, DropoutVariant,
    NetworkSpec, OptimizerConfig, TrainConfig, DEFAULT_LOG_ALPHA_THRESHOLD,
};

fn main() -> vbdrop::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (epochs, lr, batch, n) = (arg(0, 100.0), arg(1, 0.01), arg(2, 64.0), arg(3, 500.0));
    let (informative, noise, classes) = (16, 48, 4);
    let (train, test) = make_planted_split(0, n as usize, 250, classes, informative, noise, 1.0)?;
    let spec = NetworkSpec::new(
        vec![informative + noise, 32, 16, classes],
        DropoutVariant::Vbd { per_weight: true },
    )
    .structured(true);
    let config = TrainConfig {
        epochs: epochs as usize,
        batch_size: batch as usize,
        optimizer: OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        ..TrainConfig::default()
    };
    let net = train_network(build_network(&spec, 0)?, &train, Some(&test), &config)?.network;
    let la = net.gates()[0].log_alpha();
    let show = |xs: &[f64]| {
        xs.iter()
            .map(|v| format!("{v:.1}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("informative log α: {}", show(&la[..informative]));
    println!("noise       log α: {}", show(&la[informative..]));
    let (pruned, report) = prune_neurons(&net, DEFAULT_LOG_ALPHA_THRESHOLD, Some(&test))?;
    let kept = pruned.gates()[0].theta();
    let kept_informative = kept[..informative].iter().filter(|t| **t != 0.0).count();
    println!(
        "inputs kept {} (informative {kept_informative}/{informative}); error {:.2}% -> {:.2}%; units {}",
        report.neurons[0],
        evaluate(&net, &test)?,
        report.error_after,
        report.neurons_string()
    );
    Ok(())
}
