//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Set `UPGD_ACCEPTANCE=1,2,7`
//! to run a subset; `UPGD_MNIST_DIR` overrides the bundled MNIST files.
//! Criteria 7–11 train real networks and take tens of minutes in total.

mod common;

use common::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use upgd::harness::config::MNIST_DIR_ENV;
use upgd::harness::runner::load_dataset;
use upgd::harness::{presets, run_experiment, run_quality_probe, train, ExperimentConfig};
use upgd::metrics::{mean, median, summarize_run, RunRecord, StepRecord};
use upgd::optim::{Rule, ScaleAudit};
use upgd::tasks::StreamKind;

type Check = fn(&mut Context) -> Result<Verdict, String>;

const CRITERIA: [(u32, &str, Check); 13] = [
    (1, "gradient oracle", gradient_oracle),
    (2, "chain curvature", chain_curvature),
    (3, "quadratic exactness", quadratic_exactness),
    (4, "outgoing-sum identity", outgoing_sum),
    (5, "conservation on chains", conservation),
    (6, "propagation equivalence", propagation),
    (7, "utility-quality probe", quality_probe),
    (8, "changing adder, linear", changing_adder),
    (9, "permuted adder, tanh", permuted_adder),
    (10, "stationary MNIST", stationary_mnist),
    (11, "label-permuted MNIST", label_permuted_mnist),
    (12, "determinism", determinism),
    (13, "scaling contract", scaling_contract),
];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict, String> {
    Ok(Verdict { pass, detail })
}

/// State shared between criteria: scale audits from every training run.
#[derive(Default)]
struct Context {
    audits: BTreeMap<u32, ScaleAudit>,
}

impl Context {
    fn audit(&mut self, criterion: u32, audit: &ScaleAudit) {
        self.audits.entry(criterion).or_default().merge(audit);
    }
}

fn main() -> ExitCode {
    let selected: Option<Vec<u32>> = std::env::var("UPGD_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    if std::env::var_os(MNIST_DIR_ENV).is_none() {
        let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        // SAFETY: set before any other thread is spawned
        unsafe { std::env::set_var(MNIST_DIR_ENV, bundled) };
    }

    let mut ctx = Context::default();
    let mut failed = Vec::new();
    for (id, name, check) in CRITERIA {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match check(&mut ctx) {
            Ok(v) if v.pass => ("PASS", v.detail),
            Ok(v) => ("FAIL", v.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failed.push(id);
        }
        println!(
            "criterion {id:>2} {name:<26} {status}  {detail}  [{:.1}s]",
            start.elapsed().as_secs_f64()
        );
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}

fn gradient_oracle(_: &mut Context) -> Result<Verdict, String> {
    let s = gradient_sweep(200, 1);
    verdict(
        s.worst <= 1e-6,
        format!("max relative error {:.2e} over {} nets (tolerance 1e-6)", s.worst, s.instances),
    )
}

fn chain_curvature(_: &mut Context) -> Result<Verdict, String> {
    let s = chain_curvature_sweep(100, 2);
    verdict(
        s.worst <= 1e-4,
        format!("max absolute error {:.2e} over {} chains (tolerance 1e-4)", s.worst, s.instances),
    )
}

fn quadratic_exactness(_: &mut Context) -> Result<Verdict, String> {
    let (s, first_gap) = quadratic_sweep(100, 3);
    verdict(
        s.worst <= 1e-10 && first_gap > 1e-6,
        format!(
            "second-order max relative error {:.2e} (tolerance 1e-10); first-order min error {first_gap:.2e} over {} instances",
            s.worst, s.instances
        ),
    )
}

fn outgoing_sum(_: &mut Context) -> Result<Verdict, String> {
    let s = outgoing_sum_sweep(100, 4);
    verdict(
        s.worst <= 1e-10,
        format!("max relative error {:.2e} over {} nets × 2 orders (tolerance 1e-10)", s.worst, s.instances / 2),
    )
}

fn conservation(_: &mut Context) -> Result<Verdict, String> {
    let s = conservation_sweep(100, 5);
    verdict(
        s.worst <= 1e-10,
        format!(
            "max relative in/out mismatch {:.2e} over {} chains × (first, second, ablation) (tolerance 1e-10)",
            s.worst,
            s.instances / 3
        ),
    )
}

fn propagation(_: &mut Context) -> Result<Verdict, String> {
    let (s, redrawn) = propagation_sweep(100, 6);
    verdict(
        s.worst <= 1e-8,
        format!(
            "max relative error {:.2e} over {} nets, {redrawn} redrawn by the denominator guard (tolerance 1e-8)",
            s.worst, s.instances
        ),
    )
}

fn scratch(tag: &str) -> Result<tempfile::TempDir, String> {
    tempfile::Builder::new().prefix(tag).tempdir().map_err(|e| e.to_string())
}

fn quality_probe(ctx: &mut Context) -> Result<Verdict, String> {
    let dir = scratch("probe")?;
    let mut cfg = ExperimentConfig::preset("quality-probe").map_err(|e| e.to_string())?;
    cfg.out_dir = dir.path().to_path_buf();
    let summary = run_quality_probe(&cfg).map_err(|e| e.to_string())?;
    ctx.audit(7, &summary.audit());
    let avg = |name: &str| {
        let m = summary.seed_means(&format!("global_{name}"), 200, 2000);
        m.iter().sum::<f64>() / m.len() as f64
    };
    let (first, second, magnitude, random) =
        (avg("first_order"), avg("second_order"), avg("weight_magnitude"), avg("random"));
    verdict(
        second > first && second > magnitude && random.abs() <= 0.05,
        format!(
            "mean Spearman over steps 200..2000, {} seeds: second {second:.3}, first {first:.3}, magnitude {magnitude:.3}, random {random:+.3}",
            summary.runs.len()
        ),
    )
}

/// Runs the full step-size grid for `rules` and returns, per rule, the
/// selected step size and the per-seed run records at that step size.
fn adder_sweep(
    ctx: &mut Context,
    criterion: u32,
    preset: &str,
    rules: &[Rule],
) -> Result<Vec<(Rule, f64, Vec<RunRecord>)>, String> {
    let dir = scratch(preset)?;
    let mut cfg = ExperimentConfig::preset(preset).map_err(|e| e.to_string())?;
    cfg.rules = rules.to_vec();
    cfg.out_dir = dir.path().to_path_buf();
    let summary = run_experiment(&cfg).map_err(|e| e.to_string())?;
    ctx.audit(criterion, &summary.audit());
    rules
        .iter()
        .map(|&rule| {
            let best = summary.best_for(rule).and_then(|b| b.step_size);
            let best = best.ok_or_else(|| format!("every {rule} run diverged"))?;
            let records = summary
                .best_cells(rule)
                .into_iter()
                .filter_map(|c| c.record.clone())
                .collect();
            Ok((rule, best, records))
        })
        .collect()
}

fn median_of(records: &[RunRecord], f: impl Fn(&RunRecord) -> f64) -> f64 {
    median(&records.iter().map(f).collect::<Vec<_>>())
}

fn changing_adder(ctx: &mut Context) -> Result<Verdict, String> {
    let runs = adder_sweep(ctx, 8, "changing-adder", &[Rule::Sgd, Rule::UpgdWeight])?;
    let (_, sgd_step, sgd) = &runs[0];
    let (_, upgd_step, upgd) = &runs[1];
    let sgd_last = median_of(sgd, |r| r.last_tasks_loss(5));
    let upgd_last = median_of(upgd, |r| r.last_tasks_loss(5));
    verdict(
        upgd_last < sgd_last && upgd.len() == 5 && sgd.len() == 5,
        format!(
            "median last-5-task loss: upgd_weight {upgd_last:.4} (α={upgd_step:e}) vs sgd {sgd_last:.4} (α={sgd_step:e}), {} seeds",
            upgd.len()
        ),
    )
}

fn permuted_adder(ctx: &mut Context) -> Result<Verdict, String> {
    let runs = adder_sweep(ctx, 9, "permuted-adder", &[Rule::Sgd, Rule::UpgdWeight])?;
    let (_, sgd_step, sgd) = &runs[0];
    let (_, upgd_step, upgd) = &runs[1];
    let (sgd_first, sgd_last) = (median_of(sgd, |r| r.first_tasks_loss(5)), median_of(sgd, |r| r.last_tasks_loss(5)));
    let (upgd_first, upgd_last) = (median_of(upgd, |r| r.first_tasks_loss(5)), median_of(upgd, |r| r.last_tasks_loss(5)));
    verdict(
        sgd_last > sgd_first && upgd_last <= 1.1 * upgd_first && upgd.len() == 5 && sgd.len() == 5,
        format!(
            "median first/last-5-task loss: sgd {sgd_first:.4} → {sgd_last:.4} (α={sgd_step:e}); upgd_weight {upgd_first:.4} → {upgd_last:.4} (α={upgd_step:e})"
        ),
    )
}

/// Step sizes tried at full length for the MNIST criteria. The full grid at
/// 20000 steps is several hours on one core; the end points are dropped.
const MNIST_STEP_SIZES: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Full-length seed-0 run of every step size in [`MNIST_STEP_SIZES`]; keeps
/// the one with the best selection score (summed loss or accuracy).
fn select_step_size(
    ctx: &mut Context,
    criterion: u32,
    cfg: &ExperimentConfig,
    rule: Rule,
) -> Result<(f64, Vec<StepRecord>), String> {
    let data = load_dataset(cfg).map_err(|e| e.to_string())?;
    let mut best: Option<(f64, f64, Vec<StepRecord>)> = None;
    for step in MNIST_STEP_SIZES {
        let out = train(cfg, rule, step, 0, data.clone()).map_err(|e| e.to_string())?;
        ctx.audit(criterion, &out.audit);
        if out.status.is_diverged() {
            continue;
        }
        let score = summarize_run(&out.records).map_err(|e| e.to_string())?.selection_score();
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, step, out.records));
        }
    }
    best.map(|(_, step, records)| (step, records))
        .ok_or_else(|| format!("every {rule} run diverged"))
}

fn train_run(
    ctx: &mut Context,
    criterion: u32,
    cfg: &ExperimentConfig,
    rule: Rule,
    step_size: f64,
    seed: u64,
) -> Result<Vec<StepRecord>, String> {
    let data = load_dataset(cfg).map_err(|e| e.to_string())?;
    let out = train(cfg, rule, step_size, seed, data).map_err(|e| e.to_string())?;
    ctx.audit(criterion, &out.audit);
    if out.status.is_diverged() {
        return Err(format!("{rule} α={step_size:e} seed {seed} diverged: {:?}", out.status));
    }
    Ok(out.records)
}

fn accuracy_over(records: &[StepRecord], from: u64, to: u64) -> f64 {
    mean(
        records
            .iter()
            .filter(|r| (from..=to).contains(&r.step))
            .filter_map(|r| r.accuracy),
    )
}

fn stationary_mnist(ctx: &mut Context) -> Result<Verdict, String> {
    let cfg = ExperimentConfig::preset("stationary-mnist").map_err(|e| e.to_string())?;
    let rules = [Rule::Sgd, Rule::UpsWeight, Rule::UpgdWeight];
    let n = cfg.steps;
    let quarter = n / 4;
    let mut steps = Vec::new();
    let mut first = Vec::new();
    let mut last = Vec::new();
    for rule in rules {
        let (step, records) = select_step_size(ctx, 10, &cfg, rule)?;
        steps.push(step);
        first.push(accuracy_over(&records, 1, quarter));
        last.push(accuracy_over(&records, n - quarter + 1, n));
    }
    let (ups_first, ups_last) = (first[1], last[1]);
    let (sgd_last, upgd_last) = (last[0], last[2]);
    let a = ups_last > ups_first && ups_last >= 0.10 + 0.20;
    let b = (upgd_last - sgd_last).abs() <= 0.02;
    verdict(
        a && b,
        format!(
            "(a) ups_weight quarter accuracy {ups_first:.3} → {ups_last:.3} [{}]; (b) final quarter upgd_weight {upgd_last:.3} vs sgd {sgd_last:.3} [{}]; α: sgd {:e}, ups {:e}, upgd {:e}",
            if a { "ok" } else { "no" },
            if b { "ok" } else { "no" },
            steps[0],
            steps[1],
            steps[2]
        ),
    )
}

fn label_permuted_mnist(ctx: &mut Context) -> Result<Verdict, String> {
    let cfg = ExperimentConfig::preset("label-permuted-mnist").map_err(|e| e.to_string())?;
    let rules = [Rule::Sgd, Rule::UpgdWeight];
    let mut steps = Vec::new();
    let mut per_rule = Vec::new();
    for rule in rules {
        let (step, seed0) = select_step_size(ctx, 11, &cfg, rule)?;
        let mut records = vec![summarize_run(&seed0).map_err(|e| e.to_string())?];
        for &seed in cfg.seeds.iter().filter(|&&s| s != 0) {
            let run = train_run(ctx, 11, &cfg, rule, step, seed)?;
            records.push(summarize_run(&run).map_err(|e| e.to_string())?);
        }
        steps.push(step);
        per_rule.push(records);
    }
    let acc = |r: &RunRecord, last: bool| {
        if last { r.last_tasks_accuracy(5) } else { r.first_tasks_accuracy(5) }.unwrap_or(f64::NAN)
    };
    let sgd_last = median_of(&per_rule[0], |r| acc(r, true));
    let upgd_first = median_of(&per_rule[1], |r| acc(r, false));
    let upgd_last = median_of(&per_rule[1], |r| acc(r, true));
    verdict(
        upgd_last >= upgd_first - 0.01 && upgd_last > sgd_last,
        format!(
            "median 5-task accuracy over {} seeds: upgd_weight first {upgd_first:.3}, last {upgd_last:.3}; sgd last {sgd_last:.3}; α: sgd {:e}, upgd {:e}",
            cfg.seeds.len(),
            steps[0],
            steps[1]
        ),
    )
}

fn files(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

/// Every preset, shortened, run twice with one worker and once with three.
fn determinism(_: &mut Context) -> Result<Verdict, String> {
    let mut compared = 0;
    let mut differing = Vec::new();
    for name in presets::NAMES {
        let mut cfg = ExperimentConfig::preset(name).map_err(|e| format!("{name}: {e}"))?;
        cfg.steps = cfg.steps.min(60);
        cfg.seeds.truncate(2);
        cfg.step_sizes.truncate(2);
        let mut outputs = Vec::new();
        for workers in [1, 1, 3] {
            let dir = scratch(name)?;
            cfg.workers = workers;
            cfg.out_dir = dir.path().to_path_buf();
            if matches!(cfg.stream, StreamKind::UtilityProbeAdder { .. }) {
                run_quality_probe(&cfg).map_err(|e| e.to_string())?;
            } else {
                run_experiment(&cfg).map_err(|e| e.to_string())?;
            }
            outputs.push(files(dir.path())?);
        }
        compared += outputs[0].len();
        if outputs[0].is_empty() || outputs.iter().any(|o| o != &outputs[0]) {
            differing.push(name);
        }
    }
    verdict(
        differing.is_empty(),
        format!(
            "{compared} CSVs from {} shortened presets byte-identical across reruns and 1 vs 3 workers{}",
            presets::NAMES.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {differing:?}") }
        ),
    )
}

fn scaling_contract(ctx: &mut Context) -> Result<Verdict, String> {
    if ctx.audits.is_empty() {
        return Err("no audited runs (criteria 7–11 were not selected)".into());
    }
    let mut total = ScaleAudit::default();
    for a in ctx.audits.values() {
        total.merge(a);
    }
    let sources: Vec<String> = ctx.audits.iter().map(|(c, a)| format!("{c}:{}", a.checks)).collect();
    verdict(
        total.checks > 0 && total.out_of_range == 0 && total.order_violations == 0,
        format!(
            "{} audited steps ({} entries; per criterion {}), {} out of [0,1], {} order violations, {} steps with η ≤ 0",
            total.checks,
            total.entries,
            sources.join(" "),
            total.out_of_range,
            total.order_violations,
            total.non_positive_eta
        ),
    )
}
