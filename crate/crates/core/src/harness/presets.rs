//! Built-in experiment presets, written in the config-file schema.

use super::config::RawConfig;

pub const NAMES: [&str; 8] = [
    "quality-probe",
    "quality-probe-feature",
    "stationary-mnist",
    "changing-adder",
    "changing-adder-tanh",
    "permuted-adder",
    "label-permuted-mnist",
    "smoke",
];

const QUALITY_PROBE: &str = r#"
steps = 2000
seeds = 5
[stream]
kind = "utility_probe_adder"
n_inputs = 5
[network]
hidden = [50]
activation = "tanh"
[probe]
kind = "weight"
step_size = 0.01
"#;

const QUALITY_PROBE_FEATURE: &str = r#"
steps = 2000
seeds = 5
[stream]
kind = "utility_probe_adder"
n_inputs = 5
[network]
hidden = [50, 50]
activation = "tanh"
[probe]
kind = "feature"
step_size = 0.01
"#;

const STATIONARY_MNIST: &str = r#"
steps = 20000
seeds = 5
audit_every = 100
[stream]
kind = "stationary_mnist"
[network]
hidden = [300, 150]
activation = "tanh"
[optimizer]
rules = ["sgd", "anti_pgd", "ups_weight", "ups_feature", "upgd_weight", "upgd_feature"]
"#;

const CHANGING_ADDER: &str = r#"
steps = 5000
seeds = 5
[stream]
kind = "changing_adder"
n_inputs = 16
period = 100
[network]
hidden = [300, 150]
activation = "identity"
[optimizer]
rules = ["sgd", "anti_pgd", "upgd_weight", "upgd_feature"]
"#;

const CHANGING_ADDER_TANH: &str = r#"
steps = 5000
seeds = 5
[stream]
kind = "changing_adder"
n_inputs = 16
period = 100
[network]
hidden = [300, 150]
activation = "tanh"
[optimizer]
rules = ["sgd", "anti_pgd", "upgd_weight", "upgd_feature"]
"#;

const PERMUTED_ADDER: &str = r#"
steps = 5000
seeds = 5
[stream]
kind = "permuted_adder"
n_inputs = 16
period = 100
[network]
hidden = [300, 150]
activation = "tanh"
[optimizer]
rules = ["sgd", "anti_pgd", "upgd_weight", "upgd_feature"]
"#;

const LABEL_PERMUTED_MNIST: &str = r#"
steps = 20000
seeds = 3
audit_every = 100
[stream]
kind = "label_permuted_mnist"
period = 1000
[network]
hidden = [300, 150]
activation = "tanh"
[optimizer]
rules = ["sgd", "anti_pgd", "upgd_weight", "upgd_feature"]
"#;

/// Tiny sweep for checking an installation.
const SMOKE: &str = r#"
steps = 200
seeds = 2
[stream]
kind = "changing_adder"
n_inputs = 16
period = 50
[network]
hidden = [16]
activation = "tanh"
[optimizer]
rules = ["sgd", "upgd_weight", "upgd_feature"]
step_sizes = [0.1, 0.01]
"#;

pub fn text(name: &str) -> Option<&'static str> {
    Some(match name {
        "quality-probe" => QUALITY_PROBE,
        "quality-probe-feature" => QUALITY_PROBE_FEATURE,
        "stationary-mnist" => STATIONARY_MNIST,
        "changing-adder" => CHANGING_ADDER,
        "changing-adder-tanh" => CHANGING_ADDER_TANH,
        "permuted-adder" => PERMUTED_ADDER,
        "label-permuted-mnist" => LABEL_PERMUTED_MNIST,
        "smoke" => SMOKE,
        _ => return None,
    })
}

pub fn raw(name: &str) -> Option<RawConfig> {
    let mut raw = RawConfig::parse(text(name)?).expect("built-in presets parse");
    raw.version = Some(super::config::SCHEMA_VERSION);
    raw.preset = Some(name.to_string());
    Some(raw)
}
