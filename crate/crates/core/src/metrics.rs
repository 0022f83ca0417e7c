//! Rank correlation, utility flattening and run summaries.

use crate::utility::UtilityField;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two items, got {0}")]
    TooFewItems(usize),
    #[error("input is constant; rank correlation undefined")]
    ConstantInput,
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("no step records")]
    EmptyRun,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankCorrelation {
    pub rho: f64,
    pub n_items: usize,
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold equal values; ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(u: &[f64], v: &[f64]) -> Result<RankCorrelation, MetricsError> {
    if u.len() != v.len() {
        return Err(MetricsError::LengthMismatch(u.len(), v.len()));
    }
    if u.len() < 2 {
        return Err(MetricsError::TooFewItems(u.len()));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let constant = |s: &[f64]| s.iter().all(|&x| x == s[0]);
    if constant(u) || constant(v) {
        return Err(MetricsError::ConstantInput);
    }
    let rho = pearson(&average_ranks(u), &average_ranks(v)).clamp(-1.0, 1.0);
    Ok(RankCorrelation { rho, n_items: u.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Global,
    PerLayer,
}

/// Global scope yields one list with every layer concatenated; per-layer
/// scope one list per layer.
pub fn flatten_utilities<U: UtilityField>(utility: &U, scope: Scope) -> Vec<Vec<f64>> {
    match scope {
        Scope::Global => vec![utility.values()],
        Scope::PerLayer => utility.layer_values(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub task_index: u64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskAggregate {
    pub task: u64,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub steps: usize,
    pub loss_auc: f64,
    pub accuracy_auc: Option<f64>,
    pub tasks: Vec<TaskAggregate>,
    pub diverged: bool,
}

impl RunRecord {
    /// Lower is better: loss AUC for regression, negative accuracy AUC for
    /// classification. Diverged runs score `+∞`.
    pub fn selection_score(&self) -> f64 {
        if self.diverged {
            return f64::INFINITY;
        }
        match self.accuracy_auc {
            Some(acc) => -acc,
            None => self.loss_auc,
        }
    }

    pub fn first_tasks_loss(&self, k: usize) -> f64 {
        mean(self.tasks.iter().take(k).map(|t| t.mean_loss))
    }

    pub fn last_tasks_loss(&self, k: usize) -> f64 {
        mean(self.tasks.iter().rev().take(k).map(|t| t.mean_loss))
    }

    pub fn first_tasks_accuracy(&self, k: usize) -> Option<f64> {
        let acc: Option<Vec<f64>> = self.tasks.iter().take(k).map(|t| t.mean_accuracy).collect();
        acc.map(|a| mean(a.into_iter()))
    }

    pub fn last_tasks_accuracy(&self, k: usize) -> Option<f64> {
        let acc: Option<Vec<f64>> = self.tasks.iter().rev().take(k).map(|t| t.mean_accuracy).collect();
        acc.map(|a| mean(a.into_iter()))
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_auc / self.steps as f64
    }

    pub fn mean_accuracy(&self) -> Option<f64> {
        self.accuracy_auc.map(|a| a / self.steps as f64)
    }
}

pub fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Median of a non-empty list (average of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Aggregates per-step records, grouping consecutive records by `task_index`.
/// A record with a non-finite loss marks the run as diverged.
pub fn summarize_run(records: &[StepRecord]) -> Result<RunRecord, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let classification = records.iter().all(|r| r.accuracy.is_some());
    let mut tasks: Vec<TaskAggregate> = Vec::new();
    let mut group: Vec<&StepRecord> = Vec::new();
    let mut flush = |group: &mut Vec<&StepRecord>| {
        if let Some(first) = group.first() {
            tasks.push(TaskAggregate {
                task: first.task_index,
                steps: group.len(),
                mean_loss: mean(group.iter().map(|r| r.loss)),
                mean_accuracy: classification
                    .then(|| mean(group.iter().map(|r| r.accuracy.unwrap_or(f64::NAN)))),
            });
        }
        group.clear();
    };
    for r in records {
        if group.first().is_some_and(|g| g.task_index != r.task_index) {
            flush(&mut group);
        }
        group.push(r);
    }
    flush(&mut group);
    Ok(RunRecord {
        steps: records.len(),
        loss_auc: records.iter().map(|r| r.loss).sum(),
        accuracy_auc: classification.then(|| records.iter().filter_map(|r| r.accuracy).sum()),
        diverged: records.iter().any(|r| !r.loss.is_finite()),
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, Activation, LossKind};
    use crate::utility::{FeatureUtility, WeightUtility};

    fn regression(losses: &[f64], period: u64) -> Vec<StepRecord> {
        losses
            .iter()
            .enumerate()
            .map(|(k, &loss)| StepRecord {
                step: k as u64 + 1,
                task_index: k as u64 / period,
                loss,
                accuracy: None,
            })
            .collect()
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[3.0, 1.0, 2.0], &[3.0, 1.0, 2.0]).unwrap().rho, 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        let r = spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r.rho - 0.5).abs() < 1e-15);
        assert_eq!(r.n_items, 3);
    }

    #[test]
    fn spearman_errors() {
        assert_eq!(spearman(&[1.0, 2.0], &[1.0]), Err(MetricsError::LengthMismatch(2, 1)));
        assert_eq!(spearman(&[1.0], &[1.0]), Err(MetricsError::TooFewItems(1)));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::ConstantInput));
        assert_eq!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]), Err(MetricsError::NonFinite));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn flatten_counts() {
        let net = build_network(&[5, 50, 1], Activation::Relu, LossKind::Mse, 0).unwrap();
        let w = WeightUtility::zeros_for(&net);
        assert_eq!(flatten_utilities(&w, Scope::Global)[0].len(), 351);
        assert_eq!(flatten_utilities(&w, Scope::PerLayer).len(), 2);
        let deep = build_network(&[5, 50, 50, 1], Activation::Relu, LossKind::Mse, 0).unwrap();
        let f = FeatureUtility::zeros_for(&deep);
        assert_eq!(flatten_utilities(&f, Scope::Global)[0].len(), 100);
    }

    #[test]
    fn constant_loss_auc() {
        let run = summarize_run(&regression(&[2.0; 10], 100)).unwrap();
        assert_eq!(run.loss_auc, 20.0);
        assert_eq!(run.tasks.len(), 1);
        assert_eq!(run.selection_score(), 20.0);
    }

    #[test]
    fn tasks_partition_and_windows() {
        let losses: Vec<f64> = (0..500).map(|k| (k / 100) as f64).collect();
        let run = summarize_run(&regression(&losses, 100)).unwrap();
        assert_eq!(run.tasks.len(), 5);
        assert_eq!(run.tasks[3].mean_loss, 3.0);
        assert_eq!(run.first_tasks_loss(2), 0.5);
        assert_eq!(run.last_tasks_loss(2), 3.5);
        assert!(run.accuracy_auc.is_none());
    }

    #[test]
    fn all_correct_accuracy() {
        let records: Vec<StepRecord> = (0..20)
            .map(|k| StepRecord {
                step: k + 1,
                task_index: k / 10,
                loss: 0.1,
                accuracy: Some(1.0),
            })
            .collect();
        let run = summarize_run(&records).unwrap();
        assert!(run.tasks.iter().all(|t| t.mean_accuracy == Some(1.0)));
        assert_eq!(run.selection_score(), -20.0);
        assert_eq!(run.last_tasks_accuracy(5), Some(1.0));
    }

    #[test]
    fn divergence_is_flagged() {
        let run = summarize_run(&regression(&[1.0, f64::NAN], 1)).unwrap();
        assert!(run.diverged);
        assert_eq!(run.selection_score(), f64::INFINITY);
        assert_eq!(summarize_run(&[]), Err(MetricsError::EmptyRun));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
