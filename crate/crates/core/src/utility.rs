//! Weight and feature utilities.
//!
//! The utility of a parameter (or hidden feature) is the increase in loss
//! caused by zeroing it. [`true_weight_utility`] and [`true_feature_utility`]
//! compute it by ablation; the `approx_*` functions use the second-order
//! Taylor expansion around the current value evaluated at zero, with the
//! curvature supplied by [`crate::nn::backward`].

use crate::nn::{forward, Batch, BackwardTrace, ForwardTrace, LayerParams, Network, NnError};
use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// Threshold below which a propagation denominator is rejected.
pub const DENOMINATOR_GUARD: f64 = 1e-8;

/// Below this magnitude the global maximum is treated as zero.
pub const ETA_GUARD: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum UtilityError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("decay rate {0} outside [0, 1)")]
    InvalidDecay(f64),
    #[error("utility shape does not match the trace")]
    ShapeMismatch,
    #[error("near-zero denominator at layer {layer}, sample {sample}, feature {index}")]
    NearZeroDenominator {
        layer: usize,
        sample: usize,
        index: usize,
    },
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
}

/// Common view over per-parameter and per-feature utility containers.
pub trait UtilityField: Clone {
    fn zeros_like(&self) -> Self;
    /// All entries in canonical order (layer by layer; weights row-major, then bias).
    fn values(&self) -> Vec<f64>;
    /// One list per layer, same order as [`UtilityField::values`].
    fn layer_values(&self) -> Vec<Vec<f64>>;
    /// Visits every entry in canonical order without allocating.
    fn for_each_value(&self, f: impl FnMut(f64));
    fn map_inplace(&mut self, f: impl FnMut(&mut f64));
    fn zip_mut_with(&mut self, other: &Self, f: impl FnMut(&mut f64, f64));
    fn same_shape(&self, other: &Self) -> bool;
    /// Divide each normalisation group by its Euclidean norm (zero-norm groups become zero).
    fn normalize_groups(&mut self);

    fn max_value(&self) -> f64 {
        let mut m = f64::NEG_INFINITY;
        self.for_each_value(|v| m = m.max(v));
        m
    }
}

/// Utility per weight and bias, aligned with the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightUtility {
    pub layers: Vec<LayerParams>,
}

impl WeightUtility {
    pub fn zeros_for(net: &Network) -> Self {
        WeightUtility {
            layers: net.layers().iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn filled(net: &Network, value: f64) -> Self {
        let mut u = Self::zeros_for(net);
        u.map_inplace(|v| *v = value);
        u
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl UtilityField for WeightUtility {
    fn zeros_like(&self) -> Self {
        WeightUtility {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    fn values(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.iter().copied()).collect()
    }

    fn for_each_value(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            l.weights.for_each(|&v| f(v));
            l.bias.for_each(|&v| f(v));
        }
    }

    fn layer_values(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| l.iter().copied().collect())
            .collect()
    }

    fn map_inplace(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.map_inplace(&mut f);
        }
    }

    fn zip_mut_with(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.zip_mut_with(b, &mut f);
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    /// Groups are the rows of each layer: the weights (and bias) producing one unit.
    fn normalize_groups(&mut self) {
        for layer in &mut self.layers {
            for (i, mut row) in layer.weights.outer_iter_mut().enumerate() {
                let b = layer.bias[i];
                let norm = (row.iter().map(|v| v * v).sum::<f64>() + b * b).sqrt();
                let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                row.mapv_inplace(|v| v * scale);
                layer.bias[i] = b * scale;
            }
        }
    }
}

/// Utility per hidden feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureUtility {
    pub layers: Vec<Array1<f64>>,
}

impl FeatureUtility {
    pub fn zeros_for(net: &Network) -> Self {
        FeatureUtility {
            layers: net.hidden_widths().into_iter().map(Array1::zeros).collect(),
        }
    }

    pub fn filled(net: &Network, value: f64) -> Self {
        FeatureUtility {
            layers: net
                .hidden_widths()
                .into_iter()
                .map(|w| Array1::from_elem(w, value))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Array1::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl UtilityField for FeatureUtility {
    fn zeros_like(&self) -> Self {
        FeatureUtility {
            layers: self.layers.iter().map(|l| Array1::zeros(l.len())).collect(),
        }
    }

    fn values(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.iter().copied()).collect()
    }

    fn layer_values(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.to_vec()).collect()
    }

    fn for_each_value(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            l.for_each(|&v| f(v));
        }
    }

    fn map_inplace(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.map_inplace(&mut f);
        }
    }

    fn zip_mut_with(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.zip_mut_with(b, |x, &y| f(x, y));
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len())
    }

    /// Each hidden layer's vector is one group.
    fn normalize_groups(&mut self) {
        for layer in &mut self.layers {
            let norm = layer.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            layer.mapv_inplace(|v| v * scale);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

/// Which utility estimate an experiment uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UtilityKind {
    TrueAblation,
    SecondOrder,
    FirstOrder,
    WeightMagnitude,
    Random,
}

impl fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UtilityKind::TrueAblation => "true_ablation",
            UtilityKind::SecondOrder => "second_order",
            UtilityKind::FirstOrder => "first_order",
            UtilityKind::WeightMagnitude => "weight_magnitude",
            UtilityKind::Random => "random",
        })
    }
}

impl FromStr for UtilityKind {
    type Err = UtilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "true_ablation" | "true" => UtilityKind::TrueAblation,
            "second_order" | "second" => UtilityKind::SecondOrder,
            "first_order" | "first" => UtilityKind::FirstOrder,
            "weight_magnitude" | "magnitude" => UtilityKind::WeightMagnitude,
            "random" => UtilityKind::Random,
            other => {
                return Err(UtilityError::UnknownName {
                    kind: "utility",
                    name: other.to_string(),
                })
            }
        })
    }
}

/// Ablation utility of every weight and bias: one baseline forward pass plus
/// one per parameter.
pub fn true_weight_utility(net: &Network, batch: &Batch) -> Result<WeightUtility, UtilityError> {
    let base = net.loss(batch, None)?;
    let mut probe = net.clone();
    let mut out = WeightUtility::zeros_for(net);
    for l in 0..net.depth() {
        let (rows, cols) = net.layers()[l].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let w = probe.layers()[l].weights[[i, j]];
                if w == 0.0 {
                    continue;
                }
                probe.layers_mut()[l].weights[[i, j]] = 0.0;
                out.layers[l].weights[[i, j]] = probe.loss(batch, None)? - base;
                probe.layers_mut()[l].weights[[i, j]] = w;
            }
            let b = probe.layers()[l].bias[i];
            if b == 0.0 {
                continue;
            }
            probe.layers_mut()[l].bias[i] = 0.0;
            out.layers[l].bias[i] = probe.loss(batch, None)? - base;
            probe.layers_mut()[l].bias[i] = b;
        }
    }
    Ok(out)
}

/// Ablation utility of every hidden feature via its mask.
pub fn true_feature_utility(net: &Network, batch: &Batch) -> Result<FeatureUtility, UtilityError> {
    let base = net.loss(batch, None)?;
    let mut masks: Vec<Array1<f64>> = net.hidden_widths().into_iter().map(Array1::ones).collect();
    let mut out = FeatureUtility::zeros_for(net);
    for l in 0..masks.len() {
        for j in 0..masks[l].len() {
            masks[l][j] = 0.0;
            out.layers[l][j] = net.loss(batch, Some(&masks))? - base;
            masks[l][j] = 1.0;
        }
    }
    Ok(out)
}

/// `−F∘W` (first order) or `−F∘W + ½ S∘W²` (second order); biases likewise.
pub fn approx_weight_utility(bwd: &BackwardTrace, net: &Network, order: Order) -> WeightUtility {
    let layers = net
        .layers()
        .iter()
        .zip(&bwd.layers)
        .map(|(p, d)| {
            let curv = |c: f64| if order == Order::Second { c } else { 0.0 };
            let weights = Zip::from(&p.weights)
                .and(&d.weight_grad)
                .and(&d.weight_curv)
                .map_collect(|&w, &g, &c| -g * w + 0.5 * curv(c) * w * w);
            let bias = Zip::from(&p.bias)
                .and(&d.bias_grad)
                .and(&d.bias_curv)
                .map_collect(|&b, &g, &c| -g * b + 0.5 * curv(c) * b * b);
            LayerParams { weights, bias }
        })
        .collect();
    WeightUtility { layers }
}

/// `−f` (first order) or `−f + ½ s` (second order) from the mask derivatives at m = 1.
pub fn approx_feature_utility(bwd: &BackwardTrace, order: Order) -> FeatureUtility {
    let layers = bwd
        .mask_grad
        .iter()
        .zip(&bwd.mask_curv)
        .map(|(f, s)| match order {
            Order::First => f.mapv(|v| -v),
            Order::Second => Zip::from(f).and(s).map_collect(|&f, &s| -f + 0.5 * s),
        })
        .collect();
    FeatureUtility { layers }
}

/// `|W|` entrywise, biases included.
pub fn weight_magnitude_utility(net: &Network) -> WeightUtility {
    WeightUtility {
        layers: net
            .layers()
            .iter()
            .map(|p| LayerParams {
                weights: p.weights.mapv(f64::abs),
                bias: p.bias.mapv(f64::abs),
            })
            .collect(),
    }
}

/// Fresh i.i.d. `U(0, 1)` scores on every call.
pub fn random_weight_utility(net: &Network, rng: &mut impl Rng) -> WeightUtility {
    let mut u = WeightUtility::zeros_for(net);
    u.map_inplace(|v| *v = rng.random::<f64>());
    u
}

pub fn random_feature_utility(net: &Network, rng: &mut impl Rng) -> FeatureUtility {
    let mut u = FeatureUtility::zeros_for(net);
    u.map_inplace(|v| *v = rng.random::<f64>());
    u
}

/// Exponential moving average of a utility with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityTrace<U> {
    ema: Option<U>,
    steps: u64,
    decay: f64,
}

impl<U: UtilityField> UtilityTrace<U> {
    pub fn new(decay: f64) -> Result<Self, UtilityError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(UtilityError::InvalidDecay(decay));
        }
        Ok(UtilityTrace {
            ema: None,
            steps: 0,
            decay,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn ema(&self) -> Option<&U> {
        self.ema.as_ref()
    }

    /// `U ← βU + (1−β)M`, then returns `Û = U / (1 − β^t)`.
    pub fn update(&mut self, instantaneous: &U) -> Result<U, UtilityError> {
        let beta = self.decay;
        match &mut self.ema {
            Some(ema) => {
                if !ema.same_shape(instantaneous) {
                    return Err(UtilityError::ShapeMismatch);
                }
                ema.zip_mut_with(instantaneous, |e, m| *e = beta * *e + (1.0 - beta) * m);
            }
            None => {
                let mut ema = instantaneous.clone();
                ema.map_inplace(|m| *m *= 1.0 - beta);
                self.ema = Some(ema);
            }
        }
        self.steps += 1;
        Ok(self.corrected().expect("updated at least once"))
    }

    pub fn corrected(&self) -> Option<U> {
        let ema = self.ema.as_ref()?;
        let norm = 1.0 - self.decay.powi(self.steps.min(i32::MAX as u64) as i32);
        let mut out = ema.clone();
        out.map_inplace(|v| *v /= norm);
        Some(out)
    }
}

/// Monotone squashing function `φ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Squash {
    Sigmoid,
    Tanh,
}

impl Squash {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Squash::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Squash::Tanh => x.tanh(),
        }
    }
}

impl fmt::Display for Squash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Squash::Sigmoid => "sigmoid",
            Squash::Tanh => "tanh",
        })
    }
}

impl FromStr for Squash {
    type Err = UtilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Squash::Sigmoid),
            "tanh" => Ok(Squash::Tanh),
            other => Err(UtilityError::UnknownName {
                kind: "squash",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scaling {
    Global,
    Layerwise,
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scaling::Global => "global",
            Scaling::Layerwise => "layerwise",
        })
    }
}

impl FromStr for Scaling {
    type Err = UtilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Scaling::Global),
            "layerwise" | "layer_wise" => Ok(Scaling::Layerwise),
            other => Err(UtilityError::UnknownName {
                kind: "scaling",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaledUtility<U> {
    pub values: U,
    pub scaling: Scaling,
    pub squash: Squash,
    /// The maximum used for global scaling.
    pub eta: Option<f64>,
}

/// `φ(Û/η)/φ(1)` clamped to `[0, 1]`, with `η` the maximum over every entry.
pub fn scale_global<U: UtilityField>(utility: &U, squash: Squash) -> ScaledUtility<U> {
    scale_global_with(utility, squash, utility.max_value())
}

/// Global scaling against a caller-supplied maximum (e.g. a running max).
pub fn scale_global_with<U: UtilityField>(utility: &U, squash: Squash, eta: f64) -> ScaledUtility<U> {
    let denom = squash.apply(1.0);
    let mut values = utility.clone();
    if eta.abs() < ETA_GUARD {
        let v = (squash.apply(0.0) / denom).clamp(0.0, 1.0);
        values.map_inplace(|x| *x = v);
    } else {
        values.map_inplace(|x| *x = (squash.apply(*x / eta) / denom).clamp(0.0, 1.0));
    }
    ScaledUtility {
        values,
        scaling: Scaling::Global,
        squash,
        eta: Some(eta),
    }
}

/// `φ` of each row (weights) or each layer vector (features) divided by its Euclidean norm.
pub fn scale_layerwise<U: UtilityField>(utility: &U, squash: Squash) -> ScaledUtility<U> {
    let mut values = utility.clone();
    values.normalize_groups();
    values.map_inplace(|x| *x = squash.apply(*x));
    ScaledUtility {
        values,
        scaling: Scaling::Layerwise,
        squash,
        eta: None,
    }
}

/// Second-order weight utility obtained by propagating its first- and
/// second-order parts backward from the output layer.
///
/// Per sample, the top layer is seeded with `f = −g h W` and `s = ½ Ĥ h² W²`.
/// Below it, with `h_i` the output of unit `i` feeding the layer above,
///
/// ```text
/// f_{l,i,j} =  σ'(a_i) · h_{l-1,j} W_{l,i,j} / h_i · Σ_k f_{l+1,k,i}
/// s_{l,i,j} =  h²_{l-1,j} W²_{l,i,j} / h_i · Σ_k ( s_{l+1,k,i} σ'(a_i)² / h_i − ½ f_{l+1,k,i} σ''(a_i) )
/// ```
///
/// Biases follow the same recursion with a constant input of one. The result
/// is the batch mean of `f + s`. Fails when some `|h_i|` is below
/// [`DENOMINATOR_GUARD`]; callers then fall back to [`approx_weight_utility`].
pub fn propagate_utility(
    net: &Network,
    fwd: &ForwardTrace,
    bwd: &BackwardTrace,
) -> Result<WeightUtility, UtilityError> {
    let depth = net.depth();
    if fwd.layers.len() != depth || bwd.layers.len() != depth {
        return Err(UtilityError::ShapeMismatch);
    }
    let n = fwd.batch_size();
    let mut total = WeightUtility::zeros_for(net);

    for sample in 0..n {
        // (f, s) of the layer above, per weight and per bias
        let mut above: Option<(Array2<f64>, Array2<f64>)> = None;
        for l in (0..depth).rev() {
            let params = &net.layers()[l];
            let (rows, cols) = params.weights.dim();
            let h_prev = fwd.layer_input(l).row(sample);
            let mut f = Array2::zeros((rows, cols + 1));
            let mut s = Array2::zeros((rows, cols + 1));
            match &above {
                None => {
                    let g = bwd.layers[l].act_grad.row(sample);
                    let hs = bwd.layers[l].act_curv.row(sample);
                    for i in 0..rows {
                        for j in 0..=cols {
                            let (x, w) = input_and_weight(params, &h_prev, i, j);
                            f[[i, j]] = -g[i] * x * w;
                            s[[i, j]] = 0.5 * hs[i] * x * x * w * w;
                        }
                    }
                }
                Some((f_up, s_up)) => {
                    let act = net.activations()[l];
                    let lt = &fwd.layers[l];
                    for i in 0..rows {
                        let h_i = lt.output[[sample, i]];
                        if h_i.abs() < DENOMINATOR_GUARD {
                            return Err(UtilityError::NearZeroDenominator {
                                layer: l,
                                sample,
                                index: i,
                            });
                        }
                        let a_i = lt.pre_activation[[sample, i]];
                        let m_i = fwd.masks[l][i];
                        let d1 = act.derivative(a_i) * m_i;
                        let d2 = act.second_derivative(a_i) * m_i;
                        let f_sum: f64 = f_up.column(i).sum();
                        let s_sum: f64 = s_up.column(i).sum();
                        let first_factor = d1 * f_sum / h_i;
                        let second_factor = (s_sum * d1 * d1 / h_i - 0.5 * f_sum * d2) / h_i;
                        for j in 0..=cols {
                            let (x, w) = input_and_weight(params, &h_prev, i, j);
                            f[[i, j]] = first_factor * x * w;
                            s[[i, j]] = second_factor * x * x * w * w;
                        }
                    }
                }
            }
            let out = &mut total.layers[l];
            for i in 0..rows {
                for j in 0..cols {
                    out.weights[[i, j]] += f[[i, j]] + s[[i, j]];
                }
                out.bias[i] += f[[i, cols]] + s[[i, cols]];
            }
            // the bias column is not an input to the layer above
            above = Some((
                f.slice(ndarray::s![.., ..cols]).to_owned(),
                s.slice(ndarray::s![.., ..cols]).to_owned(),
            ));
        }
    }
    let inv_n = 1.0 / n as f64;
    total.map_inplace(|v| *v *= inv_n);
    Ok(total)
}

/// `(h_{l-1,j}, W_{l,i,j})`, or `(1, b_i)` for the bias column `j == in_dim`.
fn input_and_weight(params: &LayerParams, h_prev: &ArrayView1<f64>, i: usize, j: usize) -> (f64, f64) {
    if j == params.in_dim() {
        (1.0, params.bias[i])
    } else {
        (h_prev[j], params.weights[[i, j]])
    }
}

/// Convenience: forward + backward on `batch` and the requested estimator.
pub fn weight_utility_on(
    net: &Network,
    batch: &Batch,
    order: Order,
) -> Result<WeightUtility, UtilityError> {
    let fwd = forward(net, batch, None)?;
    let bwd = crate::nn::backward(net, &fwd, &batch.targets)?;
    Ok(approx_weight_utility(&bwd, net, order))
}
