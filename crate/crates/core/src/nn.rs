//! Dense multilayer networks with a combined first/second-order backward pass.
//!
//! A single call to [`backward`] produces, for every layer, the loss gradient
//! and a diagonal curvature estimate (the HesScale recursion) with respect to
//! weights, biases, activation inputs and the hidden-layer feature masks. All
//! arithmetic is `f64`.
//!
//! Conventions:
//! * weights of layer `l` are stored `[out_l × in_l]`, so `a_l = W_l h_{l-1} + b_l`;
//! * inputs and activations are stored batch-major, `[batch × width]`;
//! * hidden layers carry a mask `m_l` (all ones unless a caller ablates a
//!   feature), giving `h_l = m_l ∘ σ(a_l)`; the output layer is linear and any
//!   softmax belongs to the loss.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::str::FromStr;

/// Default negative-side slope for [`Activation::LeakyRelu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("a network needs at least an input and an output size, got {0} sizes")]
    TooFewLayers(usize),
    #[error("layer sizes must be positive, got {0:?}")]
    NonPositiveSize(Vec<usize>),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("class label {label} out of range for {classes} outputs")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: LEAKY_RELU_SLOPE,
        }
    }

    #[inline]
    pub fn value(self, a: f64) -> f64 {
        match self {
            Activation::Identity => a,
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
            Activation::LeakyRelu { slope } => {
                if a > 0.0 {
                    a
                } else {
                    slope * a
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if a > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    /// Second derivative; zero everywhere (kink included) for the piecewise-linear kinds.
    #[inline]
    pub fn second_derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            _ => 0.0,
        }
    }

    /// `σ(a) = σ'(a)·a` for every `a`.
    pub fn is_positively_homogeneous(self) -> bool {
        !matches!(self, Activation::Tanh)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Identity => f.write_str("identity"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu { slope } if *slope == LEAKY_RELU_SLOPE => {
                f.write_str("leaky_relu")
            }
            Activation::LeakyRelu { slope } => write!(f, "leaky_relu({slope})"),
        }
    }
}

impl FromStr for Activation {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::leaky_relu()),
            other => Err(NnError::UnknownName {
                kind: "activation",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `(1/m) Σ_k (ŷ_k − y_k)²` per sample.
    Mse,
    /// Softmax over the output layer followed by negative log-likelihood.
    SoftmaxCrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        })
    }
}

impl FromStr for LossKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "softmax_cross_entropy" | "cross_entropy" => Ok(LossKind::SoftmaxCrossEntropy),
            other => Err(NnError::UnknownName {
                kind: "loss",
                name: other.to_string(),
            }),
        }
    }
}

/// Weights and bias of one dense layer, or any per-parameter quantity aligned
/// with them (gradients, curvature, utilities, noise).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(out: usize, inp: usize) -> Self {
        LayerParams {
            weights: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (out, inp) = self.weights.dim();
        Self::zeros(out, inp)
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Weights in row-major order followed by the bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn map_inplace(&mut self, mut f: impl FnMut(&mut f64)) {
        self.weights.map_inplace(&mut f);
        self.bias.map_inplace(f);
    }

    pub fn zip_mut_with(&mut self, other: &LayerParams, mut f: impl FnMut(&mut f64, f64)) {
        self.weights.zip_mut_with(&other.weights, |a, &b| f(a, b));
        self.bias.zip_mut_with(&other.bias, |a, &b| f(a, b));
    }

    pub fn same_shape(&self, other: &LayerParams) -> bool {
        self.weights.dim() == other.weights.dim() && self.bias.len() == other.bias.len()
    }
}

/// Regression targets or class indices for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Values(Array2<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.nrows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch of `(input, target)` pairs. Carries no schedule information.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Single-sample view `n` of the batch.
    pub fn sample(&self, n: usize) -> Batch {
        let inputs = self.inputs.slice(ndarray::s![n..n + 1, ..]).to_owned();
        let targets = match &self.targets {
            Targets::Values(v) => Targets::Values(v.slice(ndarray::s![n..n + 1, ..]).to_owned()),
            Targets::Classes(c) => Targets::Classes(vec![c[n]]),
        };
        Batch { inputs, targets }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<LayerParams>,
    activations: Vec<Activation>,
    loss: LossKind,
}

impl Network {
    /// `activations` has one entry per hidden layer (`layers.len() - 1`).
    pub fn new(
        layers: Vec<LayerParams>,
        activations: Vec<Activation>,
        loss: LossKind,
    ) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::TooFewLayers(layers.len() + 1));
        }
        if activations.len() + 1 != layers.len() {
            return Err(NnError::DimensionMismatch(format!(
                "{} layers need {} hidden activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(NnError::DimensionMismatch(format!(
                    "layer {l}: bias length {} but {} rows",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if l > 0 && layers[l - 1].out_dim() != layer.in_dim() {
                return Err(NnError::DimensionMismatch(format!(
                    "layer {l} expects {} inputs but layer {} produces {}",
                    layer.in_dim(),
                    l - 1,
                    layers[l - 1].out_dim()
                )));
            }
            if !layer.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite("network parameters"));
            }
        }
        Ok(Network {
            layers,
            activations,
            loss,
        })
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths of the hidden layers, i.e. the features that carry masks.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(LayerParams::out_dim)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(LayerParams::out_dim))
            .collect()
    }

    /// Trainable scalars, biases included.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    /// Mean batch loss, optionally with feature masks; no trace is kept.
    pub fn loss(&self, batch: &Batch, masks: Option<&[Array1<f64>]>) -> Result<f64, NnError> {
        check_masks(self, masks)?;
        check_batch(self, batch)?;
        let mut h = batch.inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = affine(h.view(), layer);
            if l + 1 < self.layers.len() {
                let act = self.activations[l];
                a.mapv_inplace(|v| act.value(v));
                if let Some(masks) = masks {
                    a *= &masks[l];
                }
            }
            h = a;
        }
        let (losses, _) = output_loss(self.loss, &h, &batch.targets);
        Ok(losses.mean().unwrap_or(0.0))
    }
}

/// Kaiming-normal initialisation (`std = √(2 / fan_in)`, zero biases), the same
/// activation on every hidden layer.
pub fn build_network(
    layer_sizes: &[usize],
    activation: Activation,
    loss: LossKind,
    seed: u64,
) -> Result<Network, NnError> {
    if layer_sizes.len() < 2 {
        return Err(NnError::TooFewLayers(layer_sizes.len()));
    }
    if layer_sizes.contains(&0) {
        return Err(NnError::NonPositiveSize(layer_sizes.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weights = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(&mut rng));
            LayerParams {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect::<Vec<_>>();
    let activations = vec![activation; layers.len() - 1];
    Network::new(layers, activations, loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Activation input `a_l`, `[batch × out_l]`.
    pub pre_activation: Array2<f64>,
    /// Unmasked activation output `σ(a_l)`; equals `a_l` on the output layer.
    pub activated: Array2<f64>,
    /// Layer output fed forward: `m_l ∘ σ(a_l)` on hidden layers, `a_l` on the output layer.
    pub output: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    pub layers: Vec<LayerTrace>,
    /// One mask per hidden layer.
    pub masks: Vec<Array1<f64>>,
    /// `a_L` for mse, softmax probabilities for cross-entropy.
    pub prediction: Array2<f64>,
    pub sample_losses: Array1<f64>,
    /// Mean of `sample_losses`.
    pub loss: f64,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Input to layer `l` (`h_{l-1}`).
    pub fn layer_input(&self, l: usize) -> &Array2<f64> {
        if l == 0 {
            &self.input
        } else {
            &self.layers[l - 1].output
        }
    }

    /// Fraction of samples whose arg-max prediction matches the class label.
    pub fn accuracy(&self, targets: &Targets) -> Option<f64> {
        let Targets::Classes(classes) = targets else {
            return None;
        };
        let correct = self
            .prediction
            .outer_iter()
            .zip(classes)
            .filter(|(row, &label)| argmax(row.iter().copied()) == label)
            .count();
        Some(correct as f64 / classes.len().max(1) as f64)
    }
}

/// Per-layer derivatives from one backward pass.
///
/// Parameter-shaped fields are batch means of per-sample quantities.
/// Activation-level fields keep one row per sample, each row holding the
/// derivative of that sample's own loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDerivatives {
    pub weight_grad: Array2<f64>,
    pub bias_grad: Array1<f64>,
    pub weight_curv: Array2<f64>,
    pub bias_curv: Array1<f64>,
    pub act_grad: Array2<f64>,
    pub act_curv: Array2<f64>,
}

impl LayerDerivatives {
    pub fn grad(&self) -> LayerParams {
        LayerParams {
            weights: self.weight_grad.clone(),
            bias: self.bias_grad.clone(),
        }
    }

    pub fn curvature(&self) -> LayerParams {
        LayerParams {
            weights: self.weight_curv.clone(),
            bias: self.bias_curv.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardTrace {
    pub layers: Vec<LayerDerivatives>,
    /// `∂L/∂m_l` at the current masks, one vector per hidden layer.
    pub mask_grad: Vec<Array1<f64>>,
    /// Diagonal curvature estimate `∂²L/∂m_l²`, one vector per hidden layer.
    pub mask_curv: Vec<Array1<f64>>,
}

pub fn forward(
    net: &Network,
    batch: &Batch,
    masks: Option<&[Array1<f64>]>,
) -> Result<ForwardTrace, NnError> {
    check_masks(net, masks)?;
    check_batch(net, batch)?;
    let masks: Vec<Array1<f64>> = match masks {
        Some(m) => m.to_vec(),
        None => net
            .hidden_widths()
            .into_iter()
            .map(Array1::ones)
            .collect(),
    };
    let depth = net.depth();
    let mut layers = Vec::with_capacity(depth);
    for (l, layer) in net.layers.iter().enumerate() {
        let h_prev = if l == 0 {
            batch.inputs.view()
        } else {
            layers.last().map(|t: &LayerTrace| t.output.view()).unwrap()
        };
        let pre = affine(h_prev, layer);
        let trace = if l + 1 < depth {
            let act = net.activations[l];
            let activated = pre.mapv(|v| act.value(v));
            let output = &activated * &masks[l];
            LayerTrace {
                pre_activation: pre,
                activated,
                output,
            }
        } else {
            LayerTrace {
                activated: pre.clone(),
                output: pre.clone(),
                pre_activation: pre,
            }
        };
        layers.push(trace);
    }
    let logits = &layers[depth - 1].output;
    let (sample_losses, prediction) = output_loss(net.loss, logits, &batch.targets);
    let loss = sample_losses.mean().unwrap_or(0.0);
    Ok(ForwardTrace {
        input: batch.inputs.clone(),
        layers,
        masks,
        prediction,
        sample_losses,
        loss,
    })
}

pub fn backward(
    net: &Network,
    trace: &ForwardTrace,
    targets: &Targets,
) -> Result<BackwardTrace, NnError> {
    let depth = net.depth();
    if trace.layers.len() != depth || trace.masks.len() + 1 != depth {
        return Err(NnError::DimensionMismatch(format!(
            "trace has {} layers for a {depth}-layer network",
            trace.layers.len()
        )));
    }
    for (l, (layer, lt)) in net.layers.iter().zip(&trace.layers).enumerate() {
        if lt.pre_activation.ncols() != layer.out_dim()
            || trace.layer_input(l).ncols() != layer.in_dim()
        {
            return Err(NnError::DimensionMismatch(format!(
                "trace layer {l} does not match the network"
            )));
        }
    }
    let n = trace.batch_size();
    if targets.len() != n {
        return Err(NnError::DimensionMismatch(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    let inv_n = 1.0 / n as f64;

    let (mut g, mut hess) = output_derivatives(net.loss, &trace.prediction, targets)?;
    let mut out = Vec::with_capacity(depth);
    let mut mask_grad = Vec::with_capacity(depth - 1);
    let mut mask_curv = Vec::with_capacity(depth - 1);

    for l in (0..depth).rev() {
        let layer = &net.layers[l];
        let h_prev = trace.layer_input(l);
        let h_prev_sq = h_prev.mapv(|v| v * v);
        let weight_grad = g.t().dot(h_prev) * inv_n;
        let weight_curv = hess.t().dot(&h_prev_sq) * inv_n;
        let bias_grad = g.mean_axis(Axis(0)).expect("non-empty batch");
        let bias_curv = hess.mean_axis(Axis(0)).expect("non-empty batch");

        let (next_g, next_hess) = if l > 0 {
            let below = &trace.layers[l - 1];
            let act = net.activations[l - 1];
            let mask = &trace.masks[l - 1];
            // derivatives with respect to the masked output h̄_{l-1}
            let g_out = g.dot(&layer.weights);
            let w_sq = layer.weights.mapv(|w| w * w);
            let hess_out = hess.dot(&w_sq);

            let mut fm = Array2::zeros(g_out.raw_dim());
            let mut sm = Array2::zeros(g_out.raw_dim());
            Zip::from(&mut fm)
                .and(&mut sm)
                .and(&g_out)
                .and(&hess_out)
                .and(&below.activated)
                .for_each(|fm, sm, &go, &ho, &s| {
                    *fm = go * s;
                    *sm = ho * s * s;
                });
            mask_grad.push(fm.mean_axis(Axis(0)).expect("non-empty batch"));
            mask_curv.push(sm.mean_axis(Axis(0)).expect("non-empty batch"));

            let mut g_below = Array2::zeros(g_out.raw_dim());
            let mut hess_below = Array2::zeros(g_out.raw_dim());
            Zip::indexed(&mut g_below)
                .and(&mut hess_below)
                .and(&g_out)
                .and(&hess_out)
                .and(&below.pre_activation)
                .for_each(|(_, j), gb, hb, &go, &ho, &a| {
                    let m = mask[j];
                    let d1 = act.derivative(a);
                    let d2 = act.second_derivative(a);
                    *gb = go * m * d1;
                    *hb = ho * m * m * d1 * d1 + go * m * d2;
                });
            (Some(g_below), Some(hess_below))
        } else {
            (None, None)
        };

        out.push(LayerDerivatives {
            weight_grad,
            bias_grad,
            weight_curv,
            bias_curv,
            act_grad: g,
            act_curv: hess,
        });
        if let (Some(ng), Some(nh)) = (next_g, next_hess) {
            g = ng;
            hess = nh;
        } else {
            break;
        }
    }
    out.reverse();
    mask_grad.reverse();
    mask_curv.reverse();

    let finite = out.iter().all(|d| {
        d.weight_grad.iter().all(|v| v.is_finite()) && d.weight_curv.iter().all(|v| v.is_finite())
    });
    if !finite {
        return Err(NnError::NonFinite("backward derivatives"));
    }
    Ok(BackwardTrace {
        layers: out,
        mask_grad,
        mask_curv,
    })
}

fn affine(h: ArrayView2<f64>, layer: &LayerParams) -> Array2<f64> {
    let mut a = h.dot(&layer.weights.t());
    a += &layer.bias;
    a
}

fn check_batch(net: &Network, batch: &Batch) -> Result<(), NnError> {
    if batch.inputs.ncols() != net.input_dim() {
        return Err(NnError::DimensionMismatch(format!(
            "input width {} but network expects {}",
            batch.inputs.ncols(),
            net.input_dim()
        )));
    }
    if batch.is_empty() {
        return Err(NnError::DimensionMismatch("empty batch".into()));
    }
    if batch.targets.len() != batch.len() {
        return Err(NnError::DimensionMismatch(format!(
            "{} targets for {} inputs",
            batch.targets.len(),
            batch.len()
        )));
    }
    match &batch.targets {
        Targets::Values(v) => {
            if net.loss != LossKind::Mse || v.ncols() != net.output_dim() {
                return Err(NnError::DimensionMismatch(format!(
                    "regression targets of width {} for a {} network with {} outputs",
                    v.ncols(),
                    net.loss,
                    net.output_dim()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(NnError::NonFinite("targets"));
            }
        }
        Targets::Classes(c) => {
            if net.loss != LossKind::SoftmaxCrossEntropy {
                return Err(NnError::DimensionMismatch(
                    "class targets need a cross-entropy network".into(),
                ));
            }
            if let Some(&label) = c.iter().find(|&&c| c >= net.output_dim()) {
                return Err(NnError::LabelOutOfRange {
                    label,
                    classes: net.output_dim(),
                });
            }
        }
    }
    if !batch.inputs.iter().all(|x| x.is_finite()) {
        return Err(NnError::NonFinite("inputs"));
    }
    Ok(())
}

fn check_masks(net: &Network, masks: Option<&[Array1<f64>]>) -> Result<(), NnError> {
    let Some(masks) = masks else {
        return Ok(());
    };
    let widths = net.hidden_widths();
    if masks.len() != widths.len() || masks.iter().zip(&widths).any(|(m, &w)| m.len() != w) {
        return Err(NnError::DimensionMismatch(format!(
            "mask lengths {:?} do not match hidden widths {widths:?}",
            masks.iter().map(|m| m.len()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Per-sample losses and the prediction matrix (logits or probabilities).
fn output_loss(kind: LossKind, logits: &Array2<f64>, targets: &Targets) -> (Array1<f64>, Array2<f64>) {
    match (kind, targets) {
        (LossKind::Mse, Targets::Values(y)) => {
            let m = logits.ncols() as f64;
            let losses = Zip::from(logits.rows())
                .and(y.rows())
                .map_collect(|p, t| {
                    p.iter()
                        .zip(t.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / m
                });
            (losses, logits.clone())
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(c)) => {
            let mut probs = logits.clone();
            let mut losses = Array1::zeros(logits.nrows());
            for (n, mut row) in probs.outer_iter_mut().enumerate() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                losses[n] = log_z - row[c[n]];
                row.mapv_inplace(|v| (v - log_z).exp());
            }
            (losses, probs)
        }
        _ => unreachable!("targets validated against the loss kind"),
    }
}

/// Exact per-sample gradient and Hessian diagonal of the loss w.r.t. `a_L`.
fn output_derivatives(
    kind: LossKind,
    prediction: &Array2<f64>,
    targets: &Targets,
) -> Result<(Array2<f64>, Array2<f64>), NnError> {
    match (kind, targets) {
        (LossKind::Mse, Targets::Values(y)) => {
            let m = prediction.ncols() as f64;
            let g = (prediction - y) * (2.0 / m);
            let h = Array2::from_elem(prediction.raw_dim(), 2.0 / m);
            Ok((g, h))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(c)) => {
            let mut g = prediction.clone();
            for (n, &label) in c.iter().enumerate() {
                g[[n, label]] -= 1.0;
            }
            let h = prediction.mapv(|p| p * (1.0 - p));
            Ok((g, h))
        }
        _ => Err(NnError::DimensionMismatch(format!(
            "targets do not fit a {kind} loss"
        ))),
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    pub(crate) fn scalar_net(weights: &[f64], act: Activation) -> Network {
        let layers = weights
            .iter()
            .map(|&w| LayerParams {
                weights: array![[w]],
                bias: array![0.0],
            })
            .collect::<Vec<_>>();
        let acts = vec![act; layers.len() - 1];
        Network::new(layers, acts, LossKind::Mse).unwrap()
    }

    fn scalar_batch(x: f64, y: f64) -> Batch {
        Batch {
            inputs: array![[x]],
            targets: Targets::Values(array![[y]]),
        }
    }

    #[test]
    fn parameter_count_of_probe_network() {
        let net = build_network(&[5, 50, 1], Activation::Tanh, LossKind::Mse, 0).unwrap();
        assert_eq!(net.num_params(), 351);
    }

    #[test]
    fn kaiming_std_for_fan_in_two() {
        let net = build_network(&[2, 4000, 1], Activation::Relu, LossKind::Mse, 3).unwrap();
        let w = &net.layers()[0].weights;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        // 8000 draws of N(0, 1): sample variance within a few standard errors of 1
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        assert!(net.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_network(&[3, 7, 2], Activation::Tanh, LossKind::Mse, 11).unwrap();
        let b = build_network(&[3, 7, 2], Activation::Tanh, LossKind::Mse, 11).unwrap();
        let c = build_network(&[3, 7, 2], Activation::Tanh, LossKind::Mse, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert_eq!(
            build_network(&[4], Activation::Tanh, LossKind::Mse, 0),
            Err(NnError::TooFewLayers(1))
        );
        assert!(matches!(
            build_network(&[4, 0, 1], Activation::Tanh, LossKind::Mse, 0),
            Err(NnError::NonPositiveSize(_))
        ));
    }

    #[test]
    fn single_weight_forward_and_backward() {
        let net = scalar_net(&[2.0], Activation::Identity);
        let batch = scalar_batch(3.0, 0.0);
        let fwd = forward(&net, &batch, None).unwrap();
        assert_eq!(fwd.prediction[[0, 0]], 6.0);
        assert_eq!(fwd.loss, 36.0);
        let bwd = backward(&net, &fwd, &batch.targets).unwrap();
        assert_eq!(bwd.layers[0].weight_grad[[0, 0]], 36.0);
        assert_eq!(bwd.layers[0].weight_curv[[0, 0]], 18.0);
    }

    #[test]
    fn chain_mask_derivatives() {
        let net = scalar_net(&[2.0, 3.0], Activation::Identity);
        let batch = scalar_batch(1.0, 0.0);
        let fwd = forward(&net, &batch, None).unwrap();
        let bwd = backward(&net, &fwd, &batch.targets).unwrap();
        assert_eq!(bwd.mask_grad[0][0], 72.0);
        assert_eq!(bwd.mask_curv[0][0], 72.0);
    }

    #[test]
    fn zero_residual_zeroes_first_order() {
        let net = scalar_net(&[2.0, 3.0], Activation::Identity);
        let batch = scalar_batch(1.0, 6.0);
        let fwd = forward(&net, &batch, None).unwrap();
        let bwd = backward(&net, &fwd, &batch.targets).unwrap();
        for d in &bwd.layers {
            assert!(d.weight_grad.iter().all(|&v| v == 0.0));
            assert!(d.bias_grad.iter().all(|&v| v == 0.0));
            assert!(d.weight_curv.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(bwd.mask_grad[0][0], 0.0);
    }

    #[test]
    fn masks_zero_and_ones() {
        let net = build_network(&[3, 5, 4, 2], Activation::Tanh, LossKind::Mse, 1).unwrap();
        let batch = Batch {
            inputs: array![[0.1, -0.2, 0.3], [0.5, 0.0, -0.4]],
            targets: Targets::Values(array![[1.0, 0.0], [0.0, 1.0]]),
        };
        let plain = forward(&net, &batch, None).unwrap();
        let ones = vec![Array1::ones(5), Array1::ones(4)];
        assert_eq!(forward(&net, &batch, Some(&ones)).unwrap(), plain);
        let zeroed = vec![Array1::zeros(5), Array1::ones(4)];
        let masked = forward(&net, &batch, Some(&zeroed)).unwrap();
        assert!(masked.layers[0].output.iter().all(|&v| v == 0.0));
        assert_relative_eq!(net.loss(&batch, Some(&zeroed)).unwrap(), masked.loss);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let net = build_network(&[3, 4, 2], Activation::Relu, LossKind::Mse, 1).unwrap();
        let wide = Batch {
            inputs: Array2::zeros((2, 4)),
            targets: Targets::Values(Array2::zeros((2, 2))),
        };
        assert!(matches!(
            forward(&net, &wide, None),
            Err(NnError::DimensionMismatch(_))
        ));
        let nan = Batch {
            inputs: array![[f64::NAN, 0.0, 0.0]],
            targets: Targets::Values(Array2::zeros((1, 2))),
        };
        assert_eq!(forward(&net, &nan, None), Err(NnError::NonFinite("inputs")));
        let ok = Batch {
            inputs: Array2::zeros((1, 3)),
            targets: Targets::Values(Array2::zeros((1, 2))),
        };
        let bad_mask = vec![Array1::ones(3)];
        assert!(forward(&net, &ok, Some(&bad_mask)).is_err());

        let other = build_network(&[3, 5, 2], Activation::Relu, LossKind::Mse, 1).unwrap();
        let trace = forward(&net, &ok, None).unwrap();
        assert!(backward(&other, &trace, &ok.targets).is_err());
    }

    #[test]
    fn cross_entropy_output_layer() {
        let layers = vec![LayerParams {
            weights: array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            bias: array![0.0, 0.5, -0.5],
        }];
        let net = Network::new(layers, vec![], LossKind::SoftmaxCrossEntropy).unwrap();
        let batch = Batch {
            inputs: array![[0.3, -0.7]],
            targets: Targets::Classes(vec![1]),
        };
        let fwd = forward(&net, &batch, None).unwrap();
        let p = fwd.prediction.row(0).to_owned();
        assert_relative_eq!(p.sum(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(fwd.loss, -p[1].ln(), epsilon = 1e-14);
        let bwd = backward(&net, &fwd, &batch.targets).unwrap();
        for k in 0..3 {
            let expect = p[k] - if k == 1 { 1.0 } else { 0.0 };
            assert_relative_eq!(bwd.layers[0].act_grad[[0, k]], expect, epsilon = 1e-15);
            assert_relative_eq!(bwd.layers[0].act_curv[[0, k]], p[k] * (1.0 - p[k]), epsilon = 1e-15);
        }
        assert_eq!(fwd.accuracy(&batch.targets), Some(if argmax(p.iter().copied()) == 1 { 1.0 } else { 0.0 }));
    }

    #[test]
    fn activation_names_round_trip() {
        for act in [
            Activation::Identity,
            Activation::Tanh,
            Activation::Relu,
            Activation::leaky_relu(),
        ] {
            assert_eq!(act.to_string().parse::<Activation>().unwrap(), act);
        }
        assert!("sigmoid".parse::<Activation>().is_err());
    }

    #[test]
    fn homogeneous_activations() {
        for act in [Activation::Identity, Activation::Relu, Activation::leaky_relu()] {
            for a in [-2.5, -0.1, 0.3, 4.0] {
                assert_eq!(act.value(a), act.derivative(a) * a);
            }
        }
    }
}
