//! Sweeps over (rule × step size × seed) grids.

use super::config::ExperimentConfig;
use super::output::{fmt_f64, fmt_opt, read_steps, step_label, write_steps};
use super::HarnessError;
use crate::metrics::{mean, summarize_run, RunRecord, StepRecord};
use crate::nn::{backward, build_network, forward};
use crate::optim::{derive_seed, OptimizerState, Rule, ScaleAudit};
use crate::tasks::{load_mnist_dir, MnistDataset, TaskStream};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::sync::Arc;

const NETWORK_STREAM: u64 = 0x6e6574;
const OPTIMIZER_STREAM: u64 = 0x6f7074;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const BEST_FILE: &str = "best.csv";
pub const RUNS_DIR: &str = "runs";

const SUMMARY_COLUMNS: [&str; 16] = [
    "index",
    "rule",
    "step_size",
    "seed",
    "status",
    "steps",
    "loss_auc",
    "accuracy_auc",
    "first5_loss",
    "last5_loss",
    "first5_accuracy",
    "last5_accuracy",
    "scale_checks",
    "scale_out_of_range",
    "scale_order_violations",
    "file",
];

/// Seed for the network initialisation of run `seed`.
pub fn network_seed(seed: u64) -> u64 {
    derive_seed(seed, NETWORK_STREAM)
}

/// Seed for the optimizer's noise and utility streams of run `seed`.
pub fn optimizer_seed(seed: u64) -> u64 {
    derive_seed(seed, OPTIMIZER_STREAM)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, reason: String },
}

impl RunStatus {
    pub fn is_diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<StepRecord>,
    pub status: RunStatus,
    pub audit: ScaleAudit,
}

impl RunOutcome {
    pub fn summary(&self) -> Option<RunRecord> {
        let mut record = summarize_run(&self.records).ok()?;
        record.diverged |= self.status.is_diverged();
        Some(record)
    }
}

/// Loads the MNIST training set when the stream needs it.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Option<Arc<MnistDataset>>, HarnessError> {
    if !cfg.stream.needs_mnist() {
        return Ok(None);
    }
    let dir = cfg.mnist_dir.as_ref().ok_or(HarnessError::MissingMnist)?;
    Ok(Some(Arc::new(load_mnist_dir(dir)?)))
}

/// One online training run: forward on the incoming batch, record its loss,
/// then update. Stops at the first non-finite loss or update.
pub fn train(
    cfg: &ExperimentConfig,
    rule: Rule,
    step_size: f64,
    seed: u64,
    dataset: Option<Arc<MnistDataset>>,
) -> Result<RunOutcome, HarnessError> {
    let mut net = build_network(&cfg.layer_sizes(), cfg.activation, cfg.loss(), network_seed(seed))?;
    let mut stream = TaskStream::new(cfg.stream, cfg.batch_size, seed, dataset)?;
    let mut opt = OptimizerState::new(cfg.optimizer.build(rule, step_size), optimizer_seed(seed))?
        .with_audit(cfg.audit_every);
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut status = RunStatus::Completed;
    for t in 1..=cfg.steps {
        let task_index = stream.task_index();
        let batch = stream.next_batch();
        let fwd = match forward(&net, &batch, None) {
            Ok(f) => f,
            Err(e) => {
                status = RunStatus::Diverged { step: t, reason: e.to_string() };
                break;
            }
        };
        records.push(StepRecord {
            step: t,
            task_index,
            loss: fwd.loss,
            accuracy: fwd.accuracy(&batch.targets),
        });
        if !fwd.loss.is_finite() {
            status = RunStatus::Diverged { step: t, reason: "non-finite loss".into() };
            break;
        }
        let step = backward(&net, &fwd, &batch.targets)
            .map_err(|e| e.to_string())
            .and_then(|bwd| opt.apply_step(&mut net, &bwd, fwd.loss).map_err(|e| e.to_string()));
        if let Err(reason) = step {
            status = RunStatus::Diverged { step: t, reason };
            break;
        }
    }
    Ok(RunOutcome {
        records,
        status,
        audit: opt.audit().clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    pub index: usize,
    pub rule: Rule,
    pub step_size: f64,
    pub seed: u64,
}

impl CellSpec {
    pub fn file_name(&self) -> String {
        format!("{}__lr{}__seed{}.csv", self.rule, step_label(self.step_size), self.seed)
    }
}

/// Grid in rule-major, then step-size, then seed order.
pub fn grid(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for &rule in &cfg.rules {
        for &step_size in &cfg.step_sizes {
            for &seed in &cfg.seeds {
                cells.push(CellSpec {
                    index: cells.len(),
                    rule,
                    step_size,
                    seed,
                });
            }
        }
    }
    cells
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub spec: CellSpec,
    pub status: RunStatus,
    pub record: Option<RunRecord>,
    pub audit: ScaleAudit,
    /// Per-run CSV relative to the output directory.
    pub file: PathBuf,
}

impl CellResult {
    pub fn score(&self) -> f64 {
        self.record.as_ref().map_or(f64::INFINITY, RunRecord::selection_score)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestStepSize {
    pub rule: Rule,
    /// `None` when every step size diverged for some seed.
    pub step_size: Option<f64>,
    pub mean_score: f64,
    pub mean_loss_auc: f64,
    pub mean_accuracy_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub best: Vec<BestStepSize>,
}

impl SweepSummary {
    pub fn diverged(&self) -> usize {
        self.cells.iter().filter(|c| c.status.is_diverged()).count()
    }

    pub fn audit(&self) -> ScaleAudit {
        let mut total = ScaleAudit::default();
        for c in &self.cells {
            total.merge(&c.audit);
        }
        total
    }

    pub fn best_for(&self, rule: Rule) -> Option<&BestStepSize> {
        self.best.iter().find(|b| b.rule == rule)
    }

    /// Cells of `rule` at its selected step size, in seed order.
    pub fn best_cells(&self, rule: Rule) -> Vec<&CellResult> {
        let Some(step) = self.best_for(rule).and_then(|b| b.step_size) else {
            return Vec::new();
        };
        self.cells
            .iter()
            .filter(|c| c.spec.rule == rule && c.spec.step_size == step)
            .collect()
    }
}

/// Best step size per rule: lowest mean selection score across seeds; the
/// earliest grid entry wins ties.
pub fn select_best(rules: &[Rule], cells: &[CellResult]) -> Vec<BestStepSize> {
    rules
        .iter()
        .map(|&rule| {
            let mut steps: Vec<f64> = Vec::new();
            for c in cells.iter().filter(|c| c.spec.rule == rule) {
                if !steps.contains(&c.spec.step_size) {
                    steps.push(c.spec.step_size);
                }
            }
            let mut best = BestStepSize {
                rule,
                step_size: None,
                mean_score: f64::INFINITY,
                mean_loss_auc: f64::NAN,
                mean_accuracy_auc: None,
            };
            for step in steps {
                let group: Vec<&CellResult> = cells
                    .iter()
                    .filter(|c| c.spec.rule == rule && c.spec.step_size == step)
                    .collect();
                let score = mean(group.iter().map(|c| c.score()));
                if score < best.mean_score {
                    let records: Vec<&RunRecord> = group.iter().filter_map(|c| c.record.as_ref()).collect();
                    let acc: Option<Vec<f64>> = records.iter().map(|r| r.accuracy_auc).collect();
                    best = BestStepSize {
                        rule,
                        step_size: Some(step),
                        mean_score: score,
                        mean_loss_auc: mean(records.iter().map(|r| r.loss_auc)),
                        mean_accuracy_auc: acc.map(|a| mean(a.into_iter())),
                    };
                }
            }
            best
        })
        .collect()
}

/// Runs every grid cell on a pool of `cfg.workers` threads and writes one
/// CSV per run plus `summary.csv` and `best.csv`. Output does not depend on
/// the worker count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SweepSummary, HarnessError> {
    let dataset = load_dataset(cfg)?;
    let runs_dir = cfg.out_dir.join(RUNS_DIR);
    std::fs::create_dir_all(&runs_dir).map_err(|e| HarnessError::io(&runs_dir, e))?;
    let cells = grid(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let results: Vec<Result<CellResult, HarnessError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|spec| {
                let outcome = train(cfg, spec.rule, spec.step_size, spec.seed, dataset.clone())?;
                let file = PathBuf::from(RUNS_DIR).join(spec.file_name());
                write_steps(&cfg.out_dir.join(&file), &outcome.records)?;
                Ok(CellResult {
                    spec: spec.clone(),
                    record: outcome.summary(),
                    status: outcome.status,
                    audit: outcome.audit,
                    file,
                })
            })
            .collect()
    });
    let cells = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let best = select_best(&cfg.rules, &cells);
    let summary = SweepSummary {
        out_dir: cfg.out_dir.clone(),
        cells,
        best,
    };
    write_summary(&cfg.out_dir.join(SUMMARY_FILE), &summary.cells)?;
    write_best(&cfg.out_dir.join(BEST_FILE), &summary.best)?;
    Ok(summary)
}

fn write_summary(path: &Path, cells: &[CellResult]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for c in cells {
        let r = c.record.as_ref();
        let status = match &c.status {
            RunStatus::Completed => "ok".to_string(),
            RunStatus::Diverged { step, .. } => format!("diverged@{step}"),
        };
        w.write_record([
            c.spec.index.to_string(),
            c.spec.rule.to_string(),
            fmt_f64(c.spec.step_size),
            c.spec.seed.to_string(),
            status,
            r.map_or(0, |r| r.steps).to_string(),
            fmt_opt(r.map(|r| r.loss_auc)),
            fmt_opt(r.and_then(|r| r.accuracy_auc)),
            fmt_opt(r.map(|r| r.first_tasks_loss(5))),
            fmt_opt(r.map(|r| r.last_tasks_loss(5))),
            fmt_opt(r.and_then(|r| r.first_tasks_accuracy(5))),
            fmt_opt(r.and_then(|r| r.last_tasks_accuracy(5))),
            c.audit.checks.to_string(),
            c.audit.out_of_range.to_string(),
            c.audit.order_violations.to_string(),
            c.file.display().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn write_best(path: &Path, best: &[BestStepSize]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rule", "step_size", "mean_score", "mean_loss_auc", "mean_accuracy_auc"])?;
    for b in best {
        w.write_record([
            b.rule.to_string(),
            fmt_opt(b.step_size),
            fmt_f64(b.mean_score),
            fmt_f64(b.mean_loss_auc),
            fmt_opt(b.mean_accuracy_auc),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Re-derives every run summary of a finished sweep from its per-step CSVs.
#[derive(Clone, Debug)]
pub struct DirSummary {
    pub cells: Vec<CellResult>,
    pub best: Vec<BestStepSize>,
    /// Rows whose stored AUC differs from the one recomputed from the run CSV.
    pub mismatches: Vec<usize>,
}

pub fn summarize(dir: &Path) -> Result<DirSummary, HarnessError> {
    let path = dir.join(SUMMARY_FILE);
    let mut rdr = csv::Reader::from_path(&path)?;
    let mut cells = Vec::new();
    let mut rules = Vec::new();
    let mut mismatches = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let bad = |what: &str| HarnessError::Summary(format!("{}: bad {what} in row {:?}", path.display(), row));
        let spec = CellSpec {
            index: row[0].parse().map_err(|_| bad("index"))?,
            rule: row[1].parse().map_err(|_| bad("rule"))?,
            step_size: row[2].parse().map_err(|_| bad("step_size"))?,
            seed: row[3].parse().map_err(|_| bad("seed"))?,
        };
        let status = match row[4].strip_prefix("diverged@") {
            Some(step) => RunStatus::Diverged {
                step: step.parse().map_err(|_| bad("status"))?,
                reason: "recorded as diverged".into(),
            },
            None => RunStatus::Completed,
        };
        let file = PathBuf::from(&row[15]);
        let records = read_steps(&dir.join(&file)).map_err(HarnessError::Summary)?;
        let mut record = summarize_run(&records).ok();
        if let Some(r) = record.as_mut() {
            r.diverged |= status.is_diverged();
        }
        let stored = super::output::parse_opt(&row[6]).map_err(HarnessError::Summary)?;
        let recomputed = record.as_ref().map(|r| r.loss_auc);
        let same = match (stored, recomputed) {
            (Some(a), Some(b)) => a == b || (a.is_nan() && b.is_nan()),
            (None, None) => true,
            _ => false,
        };
        if !same {
            mismatches.push(spec.index);
        }
        if !rules.contains(&spec.rule) {
            rules.push(spec.rule);
        }
        cells.push(CellResult {
            spec,
            status,
            record,
            audit: ScaleAudit::default(),
            file,
        });
    }
    let best = select_best(&rules, &cells);
    Ok(DirSummary {
        cells,
        best,
        mismatches,
    })
}
