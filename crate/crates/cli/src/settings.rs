//! Flat `key=value` run settings.
//!
//! Keys match the long flag names. Resolution order, highest first: command
//! line, `--config` file, checkpoint metadata (eval/compress only), defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use vbdrop::{AlphaMode, DropoutVariant, KlScaleMode, NetworkSpec, OptimizerConfig, TrainConfig};

use crate::CliError;

/// Every recognized key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data", "synthetic"),
    ("mnist-dir", "data/mnist"),
    ("train-limit", "0"),
    ("variant", "vbd"),
    ("alpha-mode", "shared"),
    ("rate", "0.5"),
    ("arch", "auto"),
    ("structured", "false"),
    ("noise-on-input", "false"),
    ("alpha-frozen", "false"),
    ("epochs", "20"),
    ("batch-size", "128"),
    ("optimizer", "adam"),
    ("lr", "0.001"),
    ("momentum", "0.9"),
    ("warmup", "10"),
    ("kl-scale", "per-batch"),
    ("clip-norm", "10"),
    ("lr-decay", "true"),
    ("seed", "0"),
    ("data-seed", "0"),
    ("eval-every", "1"),
    ("threshold", "2.1972245773362196"),
    ("sweep", ""),
    ("synth-classes", "4"),
    ("synth-informative", "16"),
    ("synth-noise", "48"),
    ("synth-train", "500"),
    ("synth-test", "250"),
    ("synth-separation", "1"),
];

/// Prefix of keys that describe a run but never change it.
pub const META_PREFIX: &str = "meta.";

pub fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// `meta.*` keys are dropped.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{origin}:{}: expected key=value, got `{line}`",
                n + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.starts_with(META_PREFIX) {
            continue;
        }
        if !is_known(k) {
            return Err(CliError::Usage(format!(
                "{origin}:{}: unknown key `{k}`",
                n + 1
            )));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

/// Fully resolved settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Layers are given highest priority first.
    pub fn resolve(layers: &[&BTreeMap<String, String>]) -> Settings {
        let mut values = BTreeMap::new();
        for (key, default) in DEFAULTS {
            let v = layers
                .iter()
                .find_map(|l| l.get(*key))
                .cloned()
                .unwrap_or_else(|| default.to_string());
            values.insert(key.to_string(), v);
        }
        Settings { values }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unknown settings key {key}"))
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("invalid value `{raw}` for `{key}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(key)?;
        if v.is_nan() {
            return Err(CliError::Usage(format!("`{key}` must not be NaN")));
        }
        Ok(v)
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.parse(key)
    }

    pub fn variant(&self) -> Result<DropoutVariant, CliError> {
        let mode: AlphaMode = self.get("alpha-mode").parse().map_err(CliError::invalid)?;
        DropoutVariant::from_name(self.get("variant"), mode, self.f64("rate")?)
            .map_err(CliError::invalid)
    }

    /// Explicit widths, or `None` for `auto`.
    pub fn arch(&self) -> Result<Option<Vec<usize>>, CliError> {
        let raw = self.get("arch");
        if raw == "auto" {
            return Ok(None);
        }
        raw.split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("invalid architecture `{raw}`")))
    }

    pub fn network_spec(&self, arch: Vec<usize>) -> Result<NetworkSpec, CliError> {
        let spec = NetworkSpec::new(arch, self.variant()?)
            .structured(self.bool("structured")?)
            .noise_on_input(self.bool("noise-on-input")?)
            .alpha_frozen(self.bool("alpha-frozen")?);
        spec.validate().map_err(CliError::invalid)?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let lr = self.f64("lr")?;
        let optimizer = match self.get("optimizer") {
            "adam" => OptimizerConfig::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            "sgd" => OptimizerConfig::Sgd {
                lr,
                momentum: self.f64("momentum")?,
            },
            other => {
                return Err(CliError::Usage(format!(
                    "unknown optimizer `{other}` (expected adam|sgd)"
                )))
            }
        };
        let kl_scale_mode = match self.get("kl-scale") {
            "per-batch" => KlScaleMode::PerBatch,
            "constant" => KlScaleMode::Constant,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown kl-scale `{other}` (expected per-batch|constant)"
                )))
            }
        };
        let clip = self.f64("clip-norm")?;
        let config = TrainConfig {
            epochs: self.usize("epochs")?,
            batch_size: self.usize("batch-size")?,
            optimizer,
            kl_scale_mode,
            warmup_epochs: self.usize("warmup")?,
            seed: self.u64("seed")?,
            eval_every: self.usize("eval-every")?,
            lr_decay: self.bool("lr-decay")?,
            clip_norm: (clip > 0.0).then_some(clip),
        };
        config.validate().map_err(CliError::invalid)?;
        Ok(config)
    }

    /// `key=value` lines, sorted by key.
    pub fn to_config_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
