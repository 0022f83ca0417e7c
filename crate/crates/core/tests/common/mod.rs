//! Independent oracles and random problem generators shared by the
//! integration suites.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use upgd::utility::{
    approx_feature_utility, approx_weight_utility, propagate_utility, true_weight_utility, Order,
    UtilityError,
};
use upgd::nn::{
    backward, forward, Activation, BackwardTrace, Batch, ForwardTrace, LayerParams, LossKind,
    Network, Targets,
};

pub const ACTIVATIONS: [Activation; 4] = [
    Activation::Identity,
    Activation::Tanh,
    Activation::Relu,
    Activation::LeakyRelu { slope: 0.01 },
];
pub const LOSSES: [LossKind; 2] = [LossKind::Mse, LossKind::SoftmaxCrossEntropy];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let d = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| d.sample(rng))
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<f64> {
    let d = Normal::new(0.0, std).unwrap();
    Array1::from_shape_fn(len, |_| d.sample(rng))
}

/// Network with the given layer sizes, `N(0, 1/fan_in)`-ish weights and
/// optional small random biases.
pub fn random_network(
    rng: &mut ChaCha8Rng,
    sizes: &[usize],
    activation: Activation,
    loss: LossKind,
    with_bias: bool,
) -> Network {
    let layers = sizes
        .windows(2)
        .map(|w| LayerParams {
            weights: normal_matrix(rng, w[1], w[0], 1.2 / (w[0] as f64).sqrt()),
            bias: if with_bias {
                normal_vector(rng, w[1], 0.3)
            } else {
                Array1::zeros(w[1])
            },
        })
        .collect();
    Network::new(layers, vec![activation; sizes.len() - 2], loss).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, net: &Network, n: usize) -> Batch {
    let inputs = normal_matrix(rng, n, net.input_dim(), 1.0);
    let m = net.output_dim();
    let targets = match net.loss_kind() {
        LossKind::Mse => Targets::Values(normal_matrix(rng, n, m, 1.0)),
        LossKind::SoftmaxCrossEntropy => Targets::Classes((0..n).map(|_| rng.random_range(0..m)).collect()),
    };
    Batch { inputs, targets }
}

/// Random net of depth 1..=4 with widths 1..=8 (at least 2 outputs for
/// cross-entropy), plus a batch of 1..=4 samples.
pub fn random_problem(rng: &mut ChaCha8Rng, activation: Activation, loss: LossKind) -> (Network, Batch) {
    let depth = rng.random_range(1..=4);
    let mut sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=8)).collect();
    if loss == LossKind::SoftmaxCrossEntropy {
        sizes[depth] = rng.random_range(2..=8);
    }
    let net = random_network(rng, &sizes, activation, loss, true);
    let n = rng.random_range(1..=4);
    let batch = random_batch(rng, &net, n);
    (net, batch)
}

pub fn derivatives(net: &Network, batch: &Batch) -> (ForwardTrace, BackwardTrace) {
    let fwd = forward(net, batch, None).unwrap();
    let bwd = backward(net, &fwd, &batch.targets).unwrap();
    (fwd, bwd)
}

/// Smallest |pre-activation| over hidden units; piecewise-linear
/// activations are not differentiable at 0.
pub fn min_hidden_preactivation(fwd: &ForwardTrace) -> f64 {
    let hidden = fwd.layers.len() - 1;
    fwd.layers[..hidden]
        .iter()
        .flat_map(|l| l.pre_activation.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Visits every parameter as (layer, flat index, value).
pub fn param_count(net: &Network) -> Vec<(usize, usize)> {
    net.layers()
        .iter()
        .enumerate()
        .flat_map(|(l, p)| (0..p.len()).map(move |k| (l, k)))
        .collect()
}

pub fn param_mut(net: &mut Network, l: usize, k: usize) -> &mut f64 {
    net.layers_mut()[l].iter_mut().nth(k).unwrap()
}

/// Central difference `∂L/∂θ` for every parameter.
pub fn fd_gradient(net: &Network, batch: &Batch, h: f64) -> Vec<f64> {
    let mut probe = net.clone();
    param_count(net)
        .into_iter()
        .map(|(l, k)| {
            let w = *param_mut(&mut probe, l, k);
            *param_mut(&mut probe, l, k) = w + h;
            let up = probe.loss(batch, None).unwrap();
            *param_mut(&mut probe, l, k) = w - h;
            let down = probe.loss(batch, None).unwrap();
            *param_mut(&mut probe, l, k) = w;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central second difference `∂²L/∂θ²` for every parameter.
pub fn fd_curvature(net: &Network, batch: &Batch, h: f64) -> Vec<f64> {
    let mut probe = net.clone();
    let base = net.loss(batch, None).unwrap();
    param_count(net)
        .into_iter()
        .map(|(l, k)| {
            let w = *param_mut(&mut probe, l, k);
            *param_mut(&mut probe, l, k) = w + h;
            let up = probe.loss(batch, None).unwrap();
            *param_mut(&mut probe, l, k) = w - h;
            let down = probe.loss(batch, None).unwrap();
            *param_mut(&mut probe, l, k) = w;
            (up - 2.0 * base + down) / (h * h)
        })
        .collect()
}

pub fn flat(params: impl IntoIterator<Item = LayerParams>) -> Vec<f64> {
    params.into_iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).collect()
}

pub fn grads(bwd: &BackwardTrace) -> Vec<f64> {
    flat(bwd.layers.iter().map(|d| d.grad()))
}

pub fn curvatures(bwd: &BackwardTrace) -> Vec<f64> {
    flat(bwd.layers.iter().map(|d| d.curvature()))
}

/// Norm-wise relative error `max|a − b| / max|b|` (0 when both vanish).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn abs_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Width-1 chain `1 → 1 → … → 1` with MSE loss and a batch of 1..=3.
pub fn random_chain(
    rng: &mut ChaCha8Rng,
    depth: usize,
    activation: Activation,
    with_bias: bool,
) -> (Network, Batch) {
    let layers = (0..depth)
        .map(|_| {
            // keep |w| ≥ 0.3 so no link of the chain is nearly cut
            let w: f64 = StandardNormal.sample(rng);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let b: f64 = if with_bias { { let z: f64 = StandardNormal.sample(rng); 0.5 * z } } else { 0.0 };
            LayerParams {
                weights: Array2::from_elem((1, 1), sign * (0.3 + 0.9 * w.abs())),
                bias: Array1::from_elem(1, b),
            }
        })
        .collect();
    let net = Network::new(layers, vec![activation; depth - 1], LossKind::Mse).unwrap();
    let n = rng.random_range(1..=3);
    let batch = random_batch(rng, &net, n);
    (net, batch)
}

/// Worst error seen by an oracle sweep, with the number of instances used.
#[derive(Clone, Copy, Debug)]
pub struct Sweep {
    pub worst: f64,
    pub instances: usize,
}

impl Sweep {
    pub fn new() -> Self {
        Sweep { worst: 0.0, instances: 0 }
    }

    pub fn push(&mut self, err: f64) {
        self.worst = if err.is_nan() || self.worst.is_nan() { f64::NAN } else { self.worst.max(err) };
        self.instances += 1;
    }
}

/// Resamples until no hidden pre-activation sits within `margin` of a kink.
pub fn kink_free_problem(
    rng: &mut ChaCha8Rng,
    margin: f64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (Network, Batch),
) -> (Network, Batch) {
    loop {
        let (net, batch) = make(rng);
        let act = net.activations().first().copied().unwrap_or(Activation::Identity);
        if act.is_positively_homogeneous() && act != Activation::Identity {
            let fwd = forward(&net, &batch, None).unwrap();
            if min_hidden_preactivation(&fwd) < margin {
                continue;
            }
        }
        return (net, batch);
    }
}

/// Backward gradients against central differences, cycling through every
/// activation × loss pair.
pub fn gradient_sweep(instances: usize, seed: u64) -> Sweep {
    let mut rng = rng(seed);
    let mut sweep = Sweep::new();
    for k in 0..instances {
        let act = ACTIVATIONS[k % ACTIVATIONS.len()];
        let loss = LOSSES[(k / ACTIVATIONS.len()) % LOSSES.len()];
        let (net, batch) = kink_free_problem(&mut rng, 1e-3, |r| random_problem(r, act, loss));
        let (_, bwd) = derivatives(&net, &batch);
        sweep.push(rel_err(&grads(&bwd), &fd_gradient(&net, &batch, 1e-5)));
    }
    sweep
}

/// Diagonal curvature of width-1 MSE chains against second differences.
pub fn chain_curvature_sweep(instances: usize, seed: u64) -> Sweep {
    let mut rng = rng(seed);
    let mut sweep = Sweep::new();
    for k in 0..instances {
        let act = ACTIVATIONS[k % ACTIVATIONS.len()];
        let depth = 1 + (k / ACTIVATIONS.len()) % 4;
        let (net, batch) = kink_free_problem(&mut rng, 1e-2, |r| random_chain(r, depth, act, true));
        let (_, bwd) = derivatives(&net, &batch);
        sweep.push(abs_err(&curvatures(&bwd), &fd_curvature(&net, &batch, 1e-4)));
    }
    sweep
}

/// Second-order utility against ablation on a single linear layer with
/// squared error, where the Taylor expansion is exact. Returns the sweep and
/// the smallest first-order discrepancy seen (which should stay large).
pub fn quadratic_sweep(instances: usize, seed: u64) -> (Sweep, f64) {
    let mut rng = rng(seed);
    let mut sweep = Sweep::new();
    let mut first_gap = f64::INFINITY;
    for _ in 0..instances {
        let sizes = [rng.random_range(1..=8), rng.random_range(1..=8)];
        let net = random_network(&mut rng, &sizes, Activation::Identity, LossKind::Mse, true);
        let n = rng.random_range(1..=4);
        let batch = random_batch(&mut rng, &net, n);
        let (_, bwd) = derivatives(&net, &batch);
        let truth = true_weight_utility(&net, &batch).unwrap().layers;
        let truth = flat(truth);
        let second = flat(approx_weight_utility(&bwd, &net, Order::Second).layers);
        let first = flat(approx_weight_utility(&bwd, &net, Order::First).layers);
        sweep.push(rel_err(&second, &truth));
        first_gap = first_gap.min(rel_err(&first, &truth));
    }
    (sweep, first_gap)
}

/// Approximate feature utility against the sum of the utilities of the
/// feature's outgoing weights, for both orders.
pub fn outgoing_sum_sweep(instances: usize, seed: u64) -> Sweep {
    let mut rng = rng(seed);
    let mut sweep = Sweep::new();
    for k in 0..instances {
        let act = ACTIVATIONS[k % ACTIVATIONS.len()];
        let loss = LOSSES[(k / ACTIVATIONS.len()) % LOSSES.len()];
        let (net, batch) = loop {
            let p = random_problem(&mut rng, act, loss);
            if p.0.depth() >= 2 {
                break p;
            }
        };
        let (_, bwd) = derivatives(&net, &batch);
        for order in [Order::First, Order::Second] {
            let features = approx_feature_utility(&bwd, order);
            let weights = approx_weight_utility(&bwd, &net, order);
            let mut lhs = Vec::new();
            let mut rhs = Vec::new();
            for (l, u) in features.layers.iter().enumerate() {
                let outgoing = &weights.layers[l + 1].weights;
                for (i, &v) in u.iter().enumerate() {
                    lhs.push(v);
                    rhs.push(outgoing.column(i).sum());
                }
            }
            sweep.push(rel_err(&lhs, &rhs));
        }
    }
    sweep
}

/// Incoming against outgoing weight utility of every hidden unit of
/// bias-free width-1 chains with positively homogeneous activations, for the
/// first- and second-order estimates and the ablation utility.
pub fn conservation_sweep(instances: usize, seed: u64) -> Sweep {
    const HOMOGENEOUS: [Activation; 3] = [
        Activation::Identity,
        Activation::Relu,
        Activation::LeakyRelu { slope: 0.01 },
    ];
    let mut rng = rng(seed);
    let mut sweep = Sweep::new();
    for k in 0..instances {
        let act = HOMOGENEOUS[k % HOMOGENEOUS.len()];
        let depth = 2 + (k / HOMOGENEOUS.len()) % 4;
        let (net, batch) = random_chain(&mut rng, depth, act, false);
        let (_, bwd) = derivatives(&net, &batch);
        let fields = [
            approx_weight_utility(&bwd, &net, Order::First),
            approx_weight_utility(&bwd, &net, Order::Second),
            true_weight_utility(&net, &batch).unwrap(),
        ];
        for u in fields {
            let incoming: Vec<f64> = (0..depth - 1).map(|l| u.layers[l].weights[[0, 0]]).collect();
            let outgoing: Vec<f64> = (1..depth).map(|l| u.layers[l].weights[[0, 0]]).collect();
            sweep.push(rel_err(&incoming, &outgoing));
        }
    }
    sweep
}

/// Utility propagation against the direct second-order estimate. Instances
/// tripping the denominator guard are redrawn; returns the sweep and the
/// number of redraws.
pub fn propagation_sweep(instances: usize, seed: u64) -> (Sweep, usize) {
    let mut rng = rng(seed);
    let mut sweep = Sweep::new();
    let mut redrawn = 0;
    for k in 0..instances {
        let act = ACTIVATIONS[k % ACTIVATIONS.len()];
        let loss = LOSSES[(k / ACTIVATIONS.len()) % LOSSES.len()];
        loop {
            assert!(redrawn < 10_000, "denominator guard keeps tripping for {act:?}");
            let (mut net, batch) = random_problem(&mut rng, act, loss);
            if act == Activation::Relu {
                // a dead unit outputs exactly 0; push most units into the active half
                let hidden = net.depth() - 1;
                for layer in &mut net.layers_mut()[..hidden] {
                    layer.bias.mapv_inplace(|b| b + 3.0);
                }
            }
            let (fwd, bwd) = derivatives(&net, &batch);
            match propagate_utility(&net, &fwd, &bwd) {
                Ok(p) => {
                    let direct = approx_weight_utility(&bwd, &net, Order::Second);
                    sweep.push(rel_err(&flat(p.layers), &flat(direct.layers)));
                    break;
                }
                Err(UtilityError::NearZeroDenominator { .. }) => redrawn += 1,
                Err(e) => panic!("propagation failed: {e}"),
            }
        }
    }
    (sweep, redrawn)
}
