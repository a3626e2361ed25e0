//! Pruning by learned dropout ratio.
//!
//! A weight (or gate) whose `log α` exceeds the threshold behaves like binary
//! dropout with `p = α / (1 + α)` close to one, so its mean is set to zero.
//! The default threshold `ln 9` corresponds to `p = 0.9`.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{per_weight_log_alpha, AlphaMode, DenseMode, Network};
use crate::train::evaluate;

/// `log α = ln 9`, i.e. an equivalent binary dropout rate of 0.9.
pub const DEFAULT_LOG_ALPHA_THRESHOLD: f64 = 2.197_224_577_336_219_6;

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionReport {
    pub threshold: f64,
    /// `100 · zeros / total` for each dense layer's mean weights.
    pub layer_sparsity: Vec<f64>,
    pub total_weights: usize,
    pub nonzero_weights: usize,
    /// Retained units per layer, input first, classes last.
    pub neurons: Vec<usize>,
    /// Test error (%) of the unpruned and pruned network; NaN without data.
    pub error_before: f64,
    pub error_after: f64,
}

impl CompressionReport {
    /// `|W| / |W≠0|`; infinite when every weight was removed.
    pub fn ratio(&self) -> f64 {
        if self.nonzero_weights == 0 {
            f64::INFINITY
        } else {
            self.total_weights as f64 / self.nonzero_weights as f64
        }
    }

    pub fn sparsity_string(&self) -> String {
        self.layer_sparsity
            .iter()
            .map(|s| format!("{s:.1}"))
            .collect::<Vec<_>>()
            .join("-")
    }

    /// Units per layer in the `784 - 300 - 100 - 10` style.
    pub fn neurons_string(&self) -> String {
        self.neurons
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(" - ")
    }
}

pub const REPORT_CSV_HEADER: &str =
    "threshold,error_before,error_after,sparsity_per_layer,ratio,neurons_per_layer";

impl CompressionReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.threshold,
            self.error_before,
            self.error_after,
            self.sparsity_string(),
            self.ratio(),
            self.neurons_string().replace(' ', "")
        )
    }
}

pub fn reports_to_csv(reports: &[CompressionReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Aligned text table with the columns Error %, Sparsity per Layer %,
/// |W|/|W≠0| and Neurons per Layer.
pub fn reports_to_table(reports: &[CompressionReport]) -> String {
    let header = [
        "log α >",
        "Error %",
        "Sparsity per Layer %",
        "|W|/|W≠0|",
        "Neurons per Layer",
    ];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                format!("{:.3}", r.threshold),
                format!("{:.2}", r.error_after),
                r.sparsity_string(),
                format!("{:.1}", r.ratio()),
                r.neurons_string(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", padded.join(" | "));
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("-+-"));
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}

fn has_per_weight_alpha(net: &Network) -> bool {
    !net.is_structured()
        && net.variant().learns_alpha()
        && net
            .layers()
            .iter()
            .zip(net.modes())
            .all(|(l, m)| *m == DenseMode::LocalReparam && l.alpha_mode() == AlphaMode::PerWeight)
}

/// Zeroes every mean weight with `log α > threshold`.
pub fn prune_weights_in_place(net: &mut Network, threshold: f64) -> Result<()> {
    if !has_per_weight_alpha(net) {
        return Err(Error::usage(
            "weight pruning needs a network trained with per-weight alpha (vd|vbd, --alpha-mode per-weight)",
        ));
    }
    for layer in net.layers_mut() {
        let ls = layer.log_sigma2.as_slice().to_vec();
        for (t, ls) in layer.theta.as_mut_slice().iter_mut().zip(ls) {
            if per_weight_log_alpha(*t, ls) > threshold {
                *t = 0.0;
            }
        }
    }
    Ok(())
}

/// Zeroes every gate with `log α > threshold`, along with the rows of the
/// dense layer it feeds (those inputs are structurally zero).
pub fn prune_neurons_in_place(net: &mut Network, threshold: f64) -> Result<()> {
    if !net.is_structured() {
        return Err(Error::usage(
            "neuron pruning needs a network with structured gates (--structured)",
        ));
    }
    let mut removed: Vec<Vec<usize>> = Vec::new();
    for gate in net.gates_mut() {
        let la = gate.log_alpha();
        let mut dropped = Vec::new();
        for (d, (t, la)) in gate.theta.iter_mut().zip(la).enumerate() {
            if la > threshold {
                *t = 0.0;
            }
            if *t == 0.0 {
                dropped.push(d);
            }
        }
        removed.push(dropped);
    }
    for (layer, dropped) in net.layers_mut().iter_mut().zip(removed) {
        let cols = layer.fan_out();
        for k in dropped {
            layer.theta.as_mut_slice()[k * cols..(k + 1) * cols].fill(0.0);
        }
    }
    Ok(())
}

/// Retained units per layer. Gated networks count open gates; otherwise a
/// unit survives while it has a nonzero weight on both sides.
pub fn retained_neurons(net: &Network) -> Vec<usize> {
    let layers = net.layers();
    if net.is_structured() {
        let mut out: Vec<usize> = net.gates().iter().map(|g| g.retained()).collect();
        out.push(net.num_classes());
        return out;
    }
    let row_alive = |l: usize, k: usize| layers[l].theta.row(k).iter().any(|v| *v != 0.0);
    let col_alive = |l: usize, d: usize| {
        let t = &layers[l].theta;
        (0..t.rows()).any(|k| t.get(k, d) != 0.0)
    };
    let mut out = vec![(0..layers[0].fan_in()).filter(|&k| row_alive(0, k)).count()];
    for (l, layer) in layers[..layers.len() - 1].iter().enumerate() {
        out.push(
            (0..layer.fan_out())
                .filter(|&d| col_alive(l, d) && row_alive(l + 1, d))
                .count(),
        );
    }
    out.push(net.num_classes());
    out
}

/// Builds a report for `pruned` from a scan of its mean weights.
pub fn compression_report(
    original: &Network,
    pruned: &Network,
    threshold: f64,
    data: Option<&Dataset>,
) -> Result<CompressionReport> {
    let mut layer_sparsity = Vec::new();
    let mut total = 0;
    let mut nonzero = 0;
    for layer in pruned.layers() {
        let n = layer.theta.len();
        let nz = layer.theta.as_slice().iter().filter(|v| **v != 0.0).count();
        layer_sparsity.push(100.0 * (n - nz) as f64 / n as f64);
        total += n;
        nonzero += nz;
    }
    let (error_before, error_after) = match data {
        Some(d) => (evaluate(original, d)?, evaluate(pruned, d)?),
        None => (f64::NAN, f64::NAN),
    };
    Ok(CompressionReport {
        threshold,
        layer_sparsity,
        total_weights: total,
        nonzero_weights: nonzero,
        neurons: retained_neurons(pruned),
        error_before,
        error_after,
    })
}

/// Per-weight pruning on a copy of `net`.
pub fn prune_weights(
    net: &Network,
    threshold: f64,
    data: Option<&Dataset>,
) -> Result<(Network, CompressionReport)> {
    let mut pruned = net.clone();
    prune_weights_in_place(&mut pruned, threshold)?;
    let report = compression_report(net, &pruned, threshold, data)?;
    Ok((pruned, report))
}

/// Gate pruning on a copy of `net`.
pub fn prune_neurons(
    net: &Network,
    threshold: f64,
    data: Option<&Dataset>,
) -> Result<(Network, CompressionReport)> {
    let mut pruned = net.clone();
    prune_neurons_in_place(&mut pruned, threshold)?;
    let report = compression_report(net, &pruned, threshold, data)?;
    Ok((pruned, report))
}

/// Gate pruning for structured networks, weight pruning otherwise.
pub fn prune(
    net: &Network,
    threshold: f64,
    data: Option<&Dataset>,
) -> Result<(Network, CompressionReport)> {
    if net.is_structured() {
        prune_neurons(net, threshold, data)
    } else {
        prune_weights(net, threshold, data)
    }
}

/// One report per threshold, in the order given.
pub fn sweep_threshold(
    net: &Network,
    thresholds: &[f64],
    data: Option<&Dataset>,
) -> Result<Vec<CompressionReport>> {
    thresholds
        .iter()
        .map(|&t| prune(net, t, data).map(|(_, r)| r))
        .collect()
}

/// Expands `lo:hi:step` into `lo, lo+step, ..., ≤ hi` (inclusive, with a
/// small tolerance so `0:5:0.5` yields 11 points).
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(Error::usage(format!(
            "sweep `{spec}` must look like lo:hi:step"
        )));
    };
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::usage(format!("bad number `{s}` in sweep `{spec}`")))
    };
    let (lo, hi, step) = (parse(lo)?, parse(hi)?, parse(step)?);
    if !(step > 0.0) || hi < lo {
        return Err(Error::usage(format!(
            "sweep `{spec}` needs step > 0 and hi >= lo"
        )));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}
