//! Experiment configuration: a versioned TOML schema layered as
//! preset defaults < file < command-line overrides.
//!
//! ```toml
//! version = 1
//! preset = "changing-adder"      # optional base
//! name = "my-sweep"
//! steps = 5000
//! seeds = 5                      # a count (0..n) or an explicit list
//! batch_size = 32
//! out = "results/my-sweep"
//! workers = 1
//! mnist_dir = "data/mnist"       # else $UPGD_MNIST_DIR
//! audit_every = 1                # scaling audit period, 0 = off
//!
//! [stream]
//! kind = "changing_adder"        # stationary_mnist | label_permuted_mnist |
//!                                # changing_adder | permuted_adder | utility_probe_adder
//! n_inputs = 16
//! period = 100
//!
//! [network]
//! hidden = [300, 150]
//! activation = "identity"        # identity | tanh | relu | leaky_relu
//!
//! [optimizer]
//! rules = ["sgd", "upgd_weight"]
//! step_sizes = [1.0, 0.1, 0.01]
//! utility = "second_order"       # second_order | first_order | weight_magnitude | random
//! scaling = "global"             # global | layerwise
//! squash = "sigmoid"             # default: sigmoid (global), tanh (layerwise)
//! decay = 0.0
//! noise = "anticorrelated"       # anticorrelated | normal | zero
//! noise_decay = true
//! eta_mode = "fresh"             # fresh | running_max
//!
//! [probe]
//! kind = "weight"                # weight | feature
//! step_size = 0.01
//! ```

use super::presets;
use crate::nn::{Activation, LossKind};
use crate::optim::{EtaMode, NoiseKind, OptimizerConfig, Rule};
use crate::tasks::StreamKind;
use crate::utility::{Scaling, Squash, UtilityKind};
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;
pub const MNIST_DIR_ENV: &str = "UPGD_MNIST_DIR";
pub const DEFAULT_STEP_SIZES: [f64; 6] = [1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported config version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error("config file has no `version` field")]
    MissingVersion,
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.to_string(),
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum SeedSpec {
    Count(u64),
    List(Vec<u64>),
}

/// One layer of the configuration; every field optional.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub version: Option<u32>,
    pub preset: Option<String>,
    pub name: Option<String>,
    pub steps: Option<u64>,
    pub seeds: Option<SeedSpec>,
    pub batch_size: Option<usize>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub mnist_dir: Option<PathBuf>,
    pub audit_every: Option<u64>,
    #[serde(default)]
    pub stream: RawStream,
    #[serde(default)]
    pub network: RawNetwork,
    #[serde(default)]
    pub optimizer: RawOptimizer,
    #[serde(default)]
    pub probe: RawProbe,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawStream {
    pub kind: Option<String>,
    pub n_inputs: Option<usize>,
    pub period: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawNetwork {
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawOptimizer {
    pub rules: Option<Vec<String>>,
    pub step_sizes: Option<Vec<f64>>,
    pub utility: Option<String>,
    pub scaling: Option<String>,
    pub squash: Option<String>,
    pub decay: Option<f64>,
    pub noise: Option<String>,
    pub noise_decay: Option<bool>,
    pub eta_mode: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawProbe {
    pub kind: Option<String>,
    pub step_size: Option<f64>,
}

macro_rules! overlay {
    ($base:expr, $top:expr; $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Parses a config file; the `version` field is mandatory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw = Self::parse(&text)?;
        match raw.version {
            None => Err(ConfigError::MissingVersion),
            Some(SCHEMA_VERSION) => Ok(raw),
            Some(v) => Err(ConfigError::Version(v)),
        }
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(&mut self, top: &RawConfig) {
        overlay!(self, top; version, preset, name, steps, seeds, batch_size, out, workers, mnist_dir, audit_every);
        overlay!(self.stream, top.stream; kind, n_inputs, period);
        overlay!(self.network, top.network; hidden, activation);
        overlay!(
            self.optimizer, top.optimizer;
            rules, step_sizes, utility, scaling, squash, decay, noise, noise_decay, eta_mode
        );
        overlay!(self.probe, top.probe; kind, step_size);
    }
}

/// Command-line overrides (highest precedence).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seeds: Option<u64>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Overrides {
    fn as_raw(&self) -> RawConfig {
        RawConfig {
            preset: self.preset.clone(),
            seeds: self.seeds.map(SeedSpec::Count),
            steps: self.steps,
            out: self.out.clone(),
            workers: self.workers,
            ..RawConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Weight,
    Feature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub step_size: f64,
}

/// Optimizer settings shared by every rule of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerTemplate {
    pub utility: UtilityKind,
    pub scaling: Scaling,
    pub squash: Squash,
    pub decay: f64,
    pub noise: NoiseKind,
    pub noise_decay: bool,
    pub eta_mode: EtaMode,
}

impl OptimizerTemplate {
    pub fn build(&self, rule: Rule, step_size: f64) -> OptimizerConfig {
        OptimizerConfig {
            rule,
            step_size,
            utility: self.utility,
            scaling: self.scaling,
            squash: self.squash,
            decay: self.decay,
            noise: self.noise,
            noise_decay: self.noise_decay,
            eta_mode: self.eta_mode,
        }
    }
}

/// Fully resolved and validated experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub stream: StreamKind,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub rules: Vec<Rule>,
    pub step_sizes: Vec<f64>,
    pub optimizer: OptimizerTemplate,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub mnist_dir: Option<PathBuf>,
    pub audit_every: u64,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    /// Layer sizes including input and output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.stream.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.stream.output_dim());
        sizes
    }

    pub fn loss(&self) -> LossKind {
        if self.stream.is_classification() {
            LossKind::SoftmaxCrossEntropy
        } else {
            LossKind::Mse
        }
    }

    /// Built-in preset resolved without any file or overrides.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        resolve(None, &Overrides {
            preset: Some(name.to_string()),
            ..Overrides::default()
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw = RawConfig::parse(text)?;
        if let Some(v) = raw.version.filter(|&v| v != SCHEMA_VERSION) {
            return Err(ConfigError::Version(v));
        }
        resolve(Some(raw), &Overrides::default())
    }
}

/// Applies preset < file < overrides and validates the result.
pub fn resolve(file: Option<RawConfig>, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let cli = overrides.as_raw();
    let preset_name = cli
        .preset
        .clone()
        .or_else(|| file.as_ref().and_then(|f| f.preset.clone()));
    let mut raw = match &preset_name {
        Some(name) => presets::raw(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?,
        None => RawConfig::default(),
    };
    if let Some(f) = &file {
        raw.overlay(f);
    }
    raw.overlay(&cli);
    finish(raw)
}

/// Reads `path` (if given) and resolves it with `overrides`.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let file = path.map(RawConfig::from_file).transpose()?;
    resolve(file, overrides)
}

fn parse_field<T: std::str::FromStr>(field: &'static str, value: Option<&String>, default: T) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match value {
        None => Ok(default),
        Some(s) => s.parse().map_err(|e| invalid(field, e)),
    }
}

fn finish(raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    let kind = raw.stream.kind.as_deref().ok_or(ConfigError::Missing("stream.kind"))?;
    let n_inputs = raw.stream.n_inputs;
    let period = raw.stream.period;
    let stream = match kind {
        "stationary_mnist" => StreamKind::StationaryMnist,
        "label_permuted_mnist" => StreamKind::LabelPermutedMnist {
            period: period.unwrap_or(1000),
        },
        "changing_adder" => StreamKind::ChangingAdder {
            n_inputs: n_inputs.unwrap_or(16),
            period: period.unwrap_or(100),
        },
        "permuted_adder" => StreamKind::PermutedAdder {
            n_inputs: n_inputs.unwrap_or(16),
            period: period.unwrap_or(100),
        },
        "utility_probe_adder" => StreamKind::UtilityProbeAdder {
            n_inputs: n_inputs.unwrap_or(5),
        },
        other => return Err(invalid("stream.kind", format!("unknown stream `{other}`"))),
    };
    stream.validate().map_err(|e| invalid("stream", e))?;

    let hidden = raw.network.hidden.clone().unwrap_or_default();
    if hidden.contains(&0) {
        return Err(invalid("network.hidden", "widths must be positive"));
    }
    let activation: Activation = parse_field("network.activation", raw.network.activation.as_ref(), Activation::Tanh)?;

    let o = &raw.optimizer;
    let rules = match &o.rules {
        None => vec![Rule::Sgd],
        Some(names) => names
            .iter()
            .map(|n| n.parse().map_err(|e| invalid("optimizer.rules", e)))
            .collect::<Result<Vec<Rule>, _>>()?,
    };
    if rules.is_empty() {
        return Err(invalid("optimizer.rules", "at least one rule is required"));
    }
    let step_sizes = o.step_sizes.clone().unwrap_or_else(|| DEFAULT_STEP_SIZES.to_vec());
    if step_sizes.is_empty() {
        return Err(invalid("optimizer.step_sizes", "grid is empty"));
    }
    if let Some(bad) = step_sizes.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(invalid("optimizer.step_sizes", format!("{bad} is not a positive step size")));
    }
    let scaling: Scaling = parse_field("optimizer.scaling", o.scaling.as_ref(), Scaling::Global)?;
    let default_squash = match scaling {
        Scaling::Global => Squash::Sigmoid,
        Scaling::Layerwise => Squash::Tanh,
    };
    let optimizer = OptimizerTemplate {
        utility: parse_field("optimizer.utility", o.utility.as_ref(), UtilityKind::SecondOrder)?,
        scaling,
        squash: parse_field("optimizer.squash", o.squash.as_ref(), default_squash)?,
        decay: o.decay.unwrap_or(0.0),
        noise: parse_field("optimizer.noise", o.noise.as_ref(), NoiseKind::AntiCorrelated)?,
        noise_decay: o.noise_decay.unwrap_or(true),
        eta_mode: parse_field("optimizer.eta_mode", o.eta_mode.as_ref(), EtaMode::Fresh)?,
    };
    for &rule in &rules {
        optimizer
            .build(rule, step_sizes[0])
            .validate()
            .map_err(|e| invalid("optimizer", e))?;
    }

    let seeds = match raw.seeds.clone().unwrap_or(SeedSpec::Count(5)) {
        SeedSpec::Count(n) => (0..n).collect(),
        SeedSpec::List(list) => list,
    };
    if seeds.is_empty() {
        return Err(invalid("seeds", "at least one seed is required"));
    }
    let steps = raw.steps.ok_or(ConfigError::Missing("steps"))?;
    if steps == 0 {
        return Err(invalid("steps", "must be at least 1"));
    }
    let batch_size = raw.batch_size.unwrap_or(32);
    if batch_size == 0 {
        return Err(invalid("batch_size", "must be positive"));
    }
    let workers = raw.workers.unwrap_or(1);
    if workers == 0 {
        return Err(invalid("workers", "must be positive"));
    }

    let mnist_dir = raw
        .mnist_dir
        .clone()
        .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from));
    if stream.needs_mnist() {
        let dir = mnist_dir
            .as_ref()
            .ok_or_else(|| invalid("mnist_dir", format!("MNIST stream needs `mnist_dir` or ${MNIST_DIR_ENV}")))?;
        for file in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"] {
            if !dir.join(file).is_file() {
                return Err(invalid("mnist_dir", format!("{} not found", dir.join(file).display())));
            }
        }
    }

    let probe = ProbeConfig {
        kind: match raw.probe.kind.as_deref() {
            None | Some("weight") => ProbeKind::Weight,
            Some("feature") => ProbeKind::Feature,
            Some(other) => return Err(invalid("probe.kind", format!("unknown probe `{other}`"))),
        },
        step_size: raw.probe.step_size.unwrap_or(0.01),
    };
    if !(probe.step_size > 0.0 && probe.step_size.is_finite()) {
        return Err(invalid("probe.step_size", "must be positive"));
    }
    if probe.kind == ProbeKind::Feature && hidden.is_empty() {
        return Err(invalid("probe.kind", "feature probe needs hidden layers"));
    }

    let name = raw
        .name
        .clone()
        .or_else(|| raw.preset.clone())
        .unwrap_or_else(|| stream.name().to_string());
    let out_dir = raw.out.clone().unwrap_or_else(|| PathBuf::from("results").join(&name));
    Ok(ExperimentConfig {
        name,
        stream,
        batch_size,
        hidden,
        activation,
        rules,
        step_sizes,
        optimizer,
        seeds,
        steps,
        out_dir,
        workers,
        mnist_dir,
        audit_every: raw.audit_every.unwrap_or(1),
        probe,
    })
}
