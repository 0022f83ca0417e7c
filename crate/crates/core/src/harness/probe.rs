//! Utility-quality probe: rank agreement between approximate and true
//! (ablation) utilities while a network is trained with SGD.
//!
//! Every step evaluates all utilities on the incoming batch *before* the
//! SGD update on that batch.

use super::config::{ExperimentConfig, ProbeKind};
use super::output::{fmt_opt, step_cells, STEP_COLUMNS};
use super::runner::network_seed;
use super::HarnessError;
use crate::metrics::{flatten_utilities, spearman, Scope, StepRecord};
use crate::nn::{backward, build_network, forward, LayerParams, Network};
use crate::optim::{apply_update, derive_seed, Gate, Rule, ScaleAudit};
use crate::tasks::TaskStream;
use crate::utility::{
    approx_feature_utility, approx_weight_utility, random_feature_utility, random_weight_utility,
    scale_global, true_feature_utility, true_weight_utility, weight_magnitude_utility, Order,
    Squash, UtilityField,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::PathBuf;

const RANDOM_UTILITY_STREAM: u64 = 0x70726f6265;

/// Estimators compared against the ablation utility.
pub fn estimators(kind: ProbeKind) -> &'static [&'static str] {
    match kind {
        ProbeKind::Weight => &["first_order", "second_order", "weight_magnitude", "random"],
        ProbeKind::Feature => &["first_order", "second_order", "random"],
    }
}

/// `global_<estimator>` then `layer<l>_<estimator>` for each layer.
pub fn probe_columns(kind: ProbeKind, layers: usize) -> Vec<String> {
    let est = estimators(kind);
    let mut cols: Vec<String> = est.iter().map(|e| format!("global_{e}")).collect();
    for l in 0..layers {
        cols.extend(est.iter().map(|e| format!("layer{l}_{e}")));
    }
    cols
}

#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub seed: u64,
    pub columns: Vec<String>,
    pub steps: Vec<StepRecord>,
    /// One row per step; `None` where the correlation is undefined
    /// (e.g. a constant utility vector).
    pub rows: Vec<Vec<Option<f64>>>,
    pub audit: ScaleAudit,
    pub file: PathBuf,
}

impl ProbeRun {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Mean of the defined values of `name` over 1-based steps `from..=to`.
    pub fn mean_over(&self, name: &str, from: u64, to: u64) -> Option<f64> {
        let k = self.column(name)?;
        let vals: Vec<f64> = self
            .steps
            .iter()
            .zip(&self.rows)
            .filter(|(s, _)| (from..=to).contains(&s.step))
            .filter_map(|(_, row)| row[k])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct ProbeSummary {
    pub runs: Vec<ProbeRun>,
}

impl ProbeSummary {
    pub fn audit(&self) -> ScaleAudit {
        let mut total = ScaleAudit::default();
        for r in &self.runs {
            total.merge(&r.audit);
        }
        total
    }

    /// Per-seed means of `name` over steps `from..=to`.
    pub fn seed_means(&self, name: &str, from: u64, to: u64) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.mean_over(name, from, to)).collect()
    }
}

fn correlations<U: UtilityField>(truth: &U, estimates: &[U]) -> Vec<Option<f64>> {
    let rho = |a: &[f64], b: &[f64]| spearman(a, b).ok().map(|r| r.rho);
    let truth_global = &flatten_utilities(truth, Scope::Global)[0];
    let truth_layers = flatten_utilities(truth, Scope::PerLayer);
    let mut row: Vec<Option<f64>> = estimates
        .iter()
        .map(|e| rho(&flatten_utilities(e, Scope::Global)[0], truth_global))
        .collect();
    let est_layers: Vec<Vec<Vec<f64>>> = estimates.iter().map(|e| flatten_utilities(e, Scope::PerLayer)).collect();
    for (l, t) in truth_layers.iter().enumerate() {
        row.extend(est_layers.iter().map(|e| rho(&e[l], t)));
    }
    row
}

/// Probe a single seed without writing anything.
pub fn probe_seed(cfg: &ExperimentConfig, seed: u64) -> Result<ProbeRun, HarnessError> {
    let mut net = build_network(&cfg.layer_sizes(), cfg.activation, cfg.loss(), network_seed(seed))?;
    let mut stream = TaskStream::new(cfg.stream, cfg.batch_size, seed, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, RANDOM_UTILITY_STREAM));
    let kind = cfg.probe.kind;
    let layers = match kind {
        ProbeKind::Weight => net.depth(),
        ProbeKind::Feature => net.depth() - 1,
    };
    let zeros: Vec<LayerParams> = net.layers().iter().map(LayerParams::zeros_like).collect();
    let mut run = ProbeRun {
        seed,
        columns: probe_columns(kind, layers),
        steps: Vec::with_capacity(cfg.steps as usize),
        rows: Vec::with_capacity(cfg.steps as usize),
        audit: ScaleAudit::default(),
        file: PathBuf::from(format!("probe_seed{seed}.csv")),
    };
    for t in 1..=cfg.steps {
        let task_index = stream.task_index();
        let batch = stream.next_batch();
        let fwd = forward(&net, &batch, None)?;
        let bwd = backward(&net, &fwd, &batch.targets)?;
        let audit_now = cfg.audit_every > 0 && t % cfg.audit_every == 0;
        let row = match kind {
            ProbeKind::Weight => {
                let truth = true_weight_utility(&net, &batch)?;
                let second = approx_weight_utility(&bwd, &net, Order::Second);
                if audit_now {
                    run.audit.record(&second, &scale_global(&second, Squash::Sigmoid));
                }
                correlations(
                    &truth,
                    &[
                        approx_weight_utility(&bwd, &net, Order::First),
                        second,
                        weight_magnitude_utility(&net),
                        random_weight_utility(&net, &mut rng),
                    ],
                )
            }
            ProbeKind::Feature => {
                let truth = true_feature_utility(&net, &batch)?;
                let second = approx_feature_utility(&bwd, Order::Second);
                if audit_now {
                    run.audit.record(&second, &scale_global(&second, Squash::Sigmoid));
                }
                correlations(
                    &truth,
                    &[
                        approx_feature_utility(&bwd, Order::First),
                        second,
                        random_feature_utility(&net, &mut rng),
                    ],
                )
            }
        };
        run.steps.push(StepRecord {
            step: t,
            task_index,
            loss: fwd.loss,
            accuracy: fwd.accuracy(&batch.targets),
        });
        run.rows.push(row);
        sgd(&mut net, &bwd, &zeros, cfg.probe.step_size).map_err(|layer| {
            HarnessError::Summary(format!("probe seed {seed}: non-finite SGD update at step {t}, layer {layer}"))
        })?;
    }
    Ok(run)
}

fn sgd(net: &mut Network, bwd: &crate::nn::BackwardTrace, zeros: &[LayerParams], step: f64) -> Result<(), usize> {
    apply_update(Rule::Sgd, step, net, bwd, zeros, &Gate::None)
}

/// Runs the probe for every configured seed and writes `probe_seed<n>.csv`.
pub fn run_quality_probe(cfg: &ExperimentConfig) -> Result<ProbeSummary, HarnessError> {
    if cfg.stream.is_classification() {
        return Err(HarnessError::Summary("the utility probe needs a regression stream".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let runs: Vec<Result<ProbeRun, HarnessError>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let run = probe_seed(cfg, seed)?;
                write_probe(cfg, &run)?;
                Ok(run)
            })
            .collect()
    });
    Ok(ProbeSummary {
        runs: runs.into_iter().collect::<Result<_, _>>()?,
    })
}

fn write_probe(cfg: &ExperimentConfig, run: &ProbeRun) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(cfg.out_dir.join(&run.file))?;
    let header: Vec<&str> = STEP_COLUMNS
        .iter()
        .copied()
        .chain(run.columns.iter().map(String::as_str))
        .collect();
    w.write_record(&header)?;
    for (s, row) in run.steps.iter().zip(&run.rows) {
        let cells: Vec<String> = step_cells(s)
            .into_iter()
            .chain(row.iter().map(|v| fmt_opt(*v)))
            .collect();
        w.write_record(&cells)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
