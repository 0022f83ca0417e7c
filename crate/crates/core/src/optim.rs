//! Update rules: SGD, PGD, Anti-PGD, utility-based perturbed search (UPS)
//! and utility-based perturbed gradient descent (UPGD), protecting and
//! non-protecting, weight-wise and feature-wise.
//!
//! Every rule descends: `W ← W − α·δ` with
//!
//! | rule                    | δ                     |
//! |-------------------------|-----------------------|
//! | sgd                     | `F`                   |
//! | pgd, anti_pgd           | `F + ξ`               |
//! | ups                     | `ξ∘(1 − Ū)`           |
//! | upgd                    | `(F + ξ)∘(1 − Ū)`     |
//! | upgd (non-protecting)   | `F + ξ∘(1 − Ū)`       |
//!
//! Feature-wise rules gate every weight producing hidden unit `i` by
//! `1 − ū_i` and update the output layer with plain SGD.

use crate::nn::{BackwardTrace, LayerParams, Network};
use crate::utility::{
    approx_feature_utility, approx_weight_utility, random_feature_utility, random_weight_utility,
    scale_global_with, scale_layerwise, weight_magnitude_utility, FeatureUtility, Order,
    ScaledUtility, Scaling, Squash, UtilityError, UtilityField, UtilityKind, UtilityTrace,
    WeightUtility,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("non-finite update at step {step}, layer {layer}")]
    NonFiniteUpdate { step: u64, layer: usize },
    #[error("derivatives do not match the network")]
    ShapeMismatch,
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    Sgd,
    Pgd,
    AntiPgd,
    UpsWeight,
    UpsFeature,
    UpgdWeight,
    UpgdFeature,
    UpgdWeightNonprotecting,
    UpgdFeatureNonprotecting,
}

impl Rule {
    pub const ALL: [Rule; 9] = [
        Rule::Sgd,
        Rule::Pgd,
        Rule::AntiPgd,
        Rule::UpsWeight,
        Rule::UpsFeature,
        Rule::UpgdWeight,
        Rule::UpgdFeature,
        Rule::UpgdWeightNonprotecting,
        Rule::UpgdFeatureNonprotecting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Sgd => "sgd",
            Rule::Pgd => "pgd",
            Rule::AntiPgd => "anti_pgd",
            Rule::UpsWeight => "ups_weight",
            Rule::UpsFeature => "ups_feature",
            Rule::UpgdWeight => "upgd_weight",
            Rule::UpgdFeature => "upgd_feature",
            Rule::UpgdWeightNonprotecting => "upgd_weight_nonprotecting",
            Rule::UpgdFeatureNonprotecting => "upgd_feature_nonprotecting",
        }
    }

    pub fn uses_utility(self) -> bool {
        !matches!(self, Rule::Sgd | Rule::Pgd | Rule::AntiPgd)
    }

    pub fn is_feature_wise(self) -> bool {
        matches!(
            self,
            Rule::UpsFeature | Rule::UpgdFeature | Rule::UpgdFeatureNonprotecting
        )
    }

    pub fn uses_noise(self) -> bool {
        self != Rule::Sgd
    }

    /// Perturbation scaled by `tanh(loss)` when decay is enabled; the PGD
    /// baselines keep their original form.
    fn decays_noise(self) -> bool {
        self.uses_utility()
    }

    fn form(self) -> UpdateForm {
        match self {
            Rule::Sgd => UpdateForm::Gradient,
            Rule::Pgd | Rule::AntiPgd => UpdateForm::Perturbed,
            Rule::UpsWeight | Rule::UpsFeature => UpdateForm::Search,
            Rule::UpgdWeight | Rule::UpgdFeature => UpdateForm::Protecting,
            Rule::UpgdWeightNonprotecting | Rule::UpgdFeatureNonprotecting => {
                UpdateForm::NonProtecting
            }
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| OptimError::UnknownName {
                kind: "rule",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UpdateForm {
    Gradient,
    Perturbed,
    Search,
    Protecting,
    NonProtecting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// No perturbation at all.
    Zero,
    Normal,
    /// `ξ_{t+1} = ζ_{t+1} − ζ_t` with `ζ ~ N(0, 1)`.
    AntiCorrelated,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Zero => "zero",
            NoiseKind::Normal => "normal",
            NoiseKind::AntiCorrelated => "anticorrelated",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" | "none" => Ok(NoiseKind::Zero),
            "normal" => Ok(NoiseKind::Normal),
            "anticorrelated" | "anti_correlated" => Ok(NoiseKind::AntiCorrelated),
            other => Err(OptimError::UnknownName {
                kind: "noise",
                name: other.to_string(),
            }),
        }
    }
}

/// How the global maximum `η` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaMode {
    /// Maximum of the current bias-corrected utility.
    Fresh,
    /// Running maximum since the first step.
    RunningMax,
}

impl FromStr for EtaMode {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fresh" => Ok(EtaMode::Fresh),
            "running_max" => Ok(EtaMode::RunningMax),
            other => Err(OptimError::UnknownName {
                kind: "eta mode",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub rule: Rule,
    pub step_size: f64,
    pub utility: UtilityKind,
    pub scaling: Scaling,
    pub squash: Squash,
    pub decay: f64,
    /// Noise for UPS/UPGD; PGD always draws normal noise and Anti-PGD anti-correlated noise.
    pub noise: NoiseKind,
    pub noise_decay: bool,
    pub eta_mode: EtaMode,
}

impl OptimizerConfig {
    /// Instantaneous second-order utility, global sigmoid scaling, anti-correlated noise with decay.
    pub fn new(rule: Rule, step_size: f64) -> Self {
        OptimizerConfig {
            rule,
            step_size,
            utility: UtilityKind::SecondOrder,
            scaling: Scaling::Global,
            squash: Squash::Sigmoid,
            decay: 0.0,
            noise: NoiseKind::AntiCorrelated,
            noise_decay: true,
            eta_mode: EtaMode::Fresh,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(OptimError::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(OptimError::InvalidConfig(format!(
                "utility decay {} outside [0, 1)",
                self.decay
            )));
        }
        if self.rule.uses_utility() {
            match self.utility {
                UtilityKind::TrueAblation => {
                    return Err(OptimError::InvalidConfig(
                        "ablation utility needs the batch; it is only available to the probe".into(),
                    ))
                }
                UtilityKind::WeightMagnitude if self.rule.is_feature_wise() => {
                    return Err(OptimError::InvalidConfig(
                        "weight-magnitude utility is not defined for features".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn effective_noise(&self) -> NoiseKind {
        match self.rule {
            Rule::Sgd => NoiseKind::Zero,
            Rule::Pgd => NoiseKind::Normal,
            Rule::AntiPgd => NoiseKind::AntiCorrelated,
            _ => self.noise,
        }
    }
}

/// Per-parameter perturbation source with its own random stream.
#[derive(Clone, Debug)]
pub struct NoiseState {
    kind: NoiseKind,
    rng: ChaCha8Rng,
    previous: Option<Vec<LayerParams>>,
}

impl NoiseState {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        NoiseState {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
            previous: None,
        }
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    /// Overwrite `out` with the next perturbation; the anti-correlated kind
    /// starts from `ζ_0 = 0`.
    pub fn fill(&mut self, out: &mut [LayerParams]) {
        match self.kind {
            NoiseKind::Zero => {
                for l in out.iter_mut() {
                    l.map_inplace(|v| *v = 0.0);
                }
            }
            NoiseKind::Normal => {
                for l in out.iter_mut() {
                    l.map_inplace(|v| *v = StandardNormal.sample(&mut self.rng));
                }
            }
            NoiseKind::AntiCorrelated => {
                let prev = self
                    .previous
                    .get_or_insert_with(|| out.iter().map(LayerParams::zeros_like).collect());
                let rng = &mut self.rng;
                for (l, p) in out.iter_mut().zip(prev.iter_mut()) {
                    let mut draw = |v: &mut f64, z_prev: &mut f64| {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = z - *z_prev;
                        *z_prev = z;
                    };
                    ndarray::Zip::from(&mut l.weights).and(&mut p.weights).for_each(&mut draw);
                    ndarray::Zip::from(&mut l.bias).and(&mut p.bias).for_each(&mut draw);
                }
            }
        }
    }

    /// Perturbation shaped like `net`'s parameters.
    pub fn sample_like(&mut self, net: &Network) -> Vec<LayerParams> {
        let mut out: Vec<LayerParams> = net.layers().iter().map(LayerParams::zeros_like).collect();
        self.fill(&mut out);
        out
    }
}

/// Per-parameter gate values `Ū` or per-feature gates `ū`.
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    None,
    Weight(WeightUtility),
    Feature(FeatureUtility),
}

/// Applies one update of `rule` given gradients, perturbation and gate.
///
/// The perturbation is used as given (any decay already applied). Returns the
/// index of the first layer whose update is non-finite, leaving `net`
/// untouched in that case.
pub fn apply_update(
    rule: Rule,
    step_size: f64,
    net: &mut Network,
    bwd: &BackwardTrace,
    noise: &[LayerParams],
    gate: &Gate,
) -> Result<(), usize> {
    let form = rule.form();
    let depth = net.depth();
    let mut deltas: Vec<LayerParams> = Vec::with_capacity(depth);
    for l in 0..depth {
        let d = &bwd.layers[l];
        let xi = &noise[l];
        let mut delta = xi.clone();
        let output_layer = l + 1 == depth;
        match gate {
            Gate::Feature(_) if output_layer => {
                delta.weights.assign(&d.weight_grad);
                delta.bias.assign(&d.bias_grad);
            }
            Gate::Feature(fu) => {
                let u = &fu.layers[l];
                for (i, (mut row, g_row)) in delta
                    .weights
                    .outer_iter_mut()
                    .zip(d.weight_grad.outer_iter())
                    .enumerate()
                {
                    let keep = 1.0 - u[i];
                    row.zip_mut_with(&g_row, |x, &g| *x = combine(form, g, *x, keep));
                    delta.bias[i] = combine(form, d.bias_grad[i], delta.bias[i], keep);
                }
            }
            Gate::Weight(wu) => {
                let u = &wu.layers[l];
                ndarray::Zip::from(&mut delta.weights)
                    .and(&d.weight_grad)
                    .and(&u.weights)
                    .for_each(|x, &g, &ub| *x = combine(form, g, *x, 1.0 - ub));
                ndarray::Zip::from(&mut delta.bias)
                    .and(&d.bias_grad)
                    .and(&u.bias)
                    .for_each(|x, &g, &ub| *x = combine(form, g, *x, 1.0 - ub));
            }
            Gate::None => {
                delta.weights.zip_mut_with(&d.weight_grad, |x, &g| *x = combine(form, g, *x, 1.0));
                delta.bias.zip_mut_with(&d.bias_grad, |x, &g| *x = combine(form, g, *x, 1.0));
            }
        }
        if !delta.iter().all(|v| (step_size * v).is_finite()) {
            return Err(l);
        }
        deltas.push(delta);
    }
    for (p, delta) in net.layers_mut().iter_mut().zip(&deltas) {
        p.zip_mut_with(delta, |w, d| *w -= step_size * d);
    }
    Ok(())
}

#[inline]
fn combine(form: UpdateForm, grad: f64, noise: f64, keep: f64) -> f64 {
    match form {
        UpdateForm::Gradient => grad,
        UpdateForm::Perturbed => grad + noise,
        UpdateForm::Search => noise * keep,
        UpdateForm::Protecting => (grad + noise) * keep,
        UpdateForm::NonProtecting => grad + noise * keep,
    }
}

/// Range and ordering checks on globally scaled utilities.
///
/// Ordering is checked as weak monotonicity: sorting entries by raw utility
/// must leave the scaled values non-decreasing (clamping and floating-point
/// saturation may tie neighbours but never reorder them).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScaleAudit {
    pub checks: u64,
    pub entries: u64,
    pub out_of_range: u64,
    pub order_violations: u64,
    pub non_positive_eta: u64,
}

impl ScaleAudit {
    pub fn record<U: UtilityField>(&mut self, raw: &U, scaled: &ScaledUtility<U>) {
        let raw = raw.values();
        let vals = scaled.values.values();
        self.checks += 1;
        self.entries += raw.len() as u64;
        if scaled.eta.is_some_and(|eta| eta <= 0.0) {
            self.non_positive_eta += 1;
        }
        self.out_of_range += vals.iter().filter(|v| !(0.0..=1.0).contains(*v)).count() as u64;
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
        self.order_violations += order
            .windows(2)
            .filter(|w| raw[w[0]] < raw[w[1]] && vals[w[0]] > vals[w[1]])
            .count() as u64;
    }

    pub fn merge(&mut self, other: &ScaleAudit) {
        self.checks += other.checks;
        self.entries += other.entries;
        self.out_of_range += other.out_of_range;
        self.order_violations += other.order_violations;
        self.non_positive_eta += other.non_positive_eta;
    }

    pub fn is_clean(&self) -> bool {
        self.out_of_range == 0 && self.order_violations == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Global maximum used for scaling, when applicable.
    pub eta: Option<f64>,
    pub noise_scale: f64,
}

/// Everything a single training run's optimizer carries between steps.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    noise: NoiseState,
    utility_rng: ChaCha8Rng,
    weight_trace: Option<UtilityTrace<WeightUtility>>,
    feature_trace: Option<UtilityTrace<FeatureUtility>>,
    running_eta: f64,
    steps: u64,
    audit_every: u64,
    audit: ScaleAudit,
    noise_buf: Vec<LayerParams>,
}

impl OptimizerState {
    /// `seed` drives the noise and random-utility streams only; data sampling
    /// is independent of it.
    pub fn new(config: OptimizerConfig, seed: u64) -> Result<Self, OptimError> {
        config.validate()?;
        let (weight_trace, feature_trace) = if !config.rule.uses_utility() {
            (None, None)
        } else if config.rule.is_feature_wise() {
            (None, Some(UtilityTrace::new(config.decay)?))
        } else {
            (Some(UtilityTrace::new(config.decay)?), None)
        };
        let noise = NoiseState::new(config.effective_noise(), derive_seed(seed, 0x6e6f697365));
        Ok(OptimizerState {
            noise,
            utility_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7574696c)),
            weight_trace,
            feature_trace,
            running_eta: f64::NEG_INFINITY,
            steps: 0,
            audit_every: 0,
            audit: ScaleAudit::default(),
            noise_buf: Vec::new(),
            config,
        })
    }

    /// Audit global scaling every `every` steps (0 disables).
    pub fn with_audit(mut self, every: u64) -> Self {
        self.audit_every = every;
        self
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn audit(&self) -> &ScaleAudit {
        &self.audit
    }

    /// One update from derivatives computed on `net` for the current batch.
    pub fn apply_step(
        &mut self,
        net: &mut Network,
        bwd: &BackwardTrace,
        loss: f64,
    ) -> Result<StepReport, OptimError> {
        if bwd.layers.len() != net.depth()
            || bwd
                .layers
                .iter()
                .zip(net.layers())
                .any(|(d, p)| d.weight_grad.dim() != p.weights.dim())
        {
            return Err(OptimError::ShapeMismatch);
        }
        let step = self.steps + 1;
        let rule = self.config.rule;

        let (gate, eta) = self.gate(net, bwd, step)?;

        if self.noise_buf.len() != net.depth()
            || self
                .noise_buf
                .iter()
                .zip(net.layers())
                .any(|(b, p)| !b.same_shape(p))
        {
            self.noise_buf = net.layers().iter().map(LayerParams::zeros_like).collect();
        }
        self.noise.fill(&mut self.noise_buf);
        let noise_scale = if self.config.noise_decay && rule.decays_noise() {
            loss.tanh()
        } else {
            1.0
        };
        if noise_scale != 1.0 {
            for l in &mut self.noise_buf {
                l.map_inplace(|v| *v *= noise_scale);
            }
        }

        apply_update(rule, self.config.step_size, net, bwd, &self.noise_buf, &gate)
            .map_err(|layer| OptimError::NonFiniteUpdate { step, layer })?;
        self.steps = step;
        Ok(StepReport {
            step,
            eta,
            noise_scale,
        })
    }

    fn gate(
        &mut self,
        net: &Network,
        bwd: &BackwardTrace,
        step: u64,
    ) -> Result<(Gate, Option<f64>), OptimError> {
        let cfg = self.config.clone();
        let audit_now = self.audit_every > 0 && step.is_multiple_of(self.audit_every);
        if let Some(trace) = self.weight_trace.as_mut() {
            let instant = match cfg.utility {
                UtilityKind::SecondOrder => approx_weight_utility(bwd, net, Order::Second),
                UtilityKind::FirstOrder => approx_weight_utility(bwd, net, Order::First),
                UtilityKind::WeightMagnitude => weight_magnitude_utility(net),
                UtilityKind::Random => random_weight_utility(net, &mut self.utility_rng),
                UtilityKind::TrueAblation => unreachable!("rejected by validate"),
            };
            let corrected = trace.update(&instant)?;
            let scaled = scale(&corrected, &cfg, &mut self.running_eta);
            if audit_now && cfg.scaling == Scaling::Global {
                self.audit.record(&corrected, &scaled);
            }
            let eta = scaled.eta;
            return Ok((Gate::Weight(scaled.values), eta));
        }
        if let Some(trace) = self.feature_trace.as_mut() {
            let instant = match cfg.utility {
                UtilityKind::SecondOrder => approx_feature_utility(bwd, Order::Second),
                UtilityKind::FirstOrder => approx_feature_utility(bwd, Order::First),
                UtilityKind::Random => random_feature_utility(net, &mut self.utility_rng),
                _ => unreachable!("rejected by validate"),
            };
            let corrected = trace.update(&instant)?;
            let scaled = scale(&corrected, &cfg, &mut self.running_eta);
            if audit_now && cfg.scaling == Scaling::Global {
                self.audit.record(&corrected, &scaled);
            }
            let eta = scaled.eta;
            return Ok((Gate::Feature(scaled.values), eta));
        }
        Ok((Gate::None, None))
    }
}

fn scale<U: UtilityField>(u: &U, cfg: &OptimizerConfig, running_eta: &mut f64) -> ScaledUtility<U> {
    match cfg.scaling {
        Scaling::Layerwise => scale_layerwise(u, cfg.squash),
        Scaling::Global => {
            let current = u.max_value();
            let eta = match cfg.eta_mode {
                EtaMode::Fresh => current,
                EtaMode::RunningMax => {
                    *running_eta = running_eta.max(current);
                    *running_eta
                }
            };
            scale_global_with(u, cfg.squash, eta)
        }
    }
}

/// Mixes a run seed with a stream tag (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
