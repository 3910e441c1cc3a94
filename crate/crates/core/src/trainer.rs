//! Mini-batch training, evaluation, loss comparisons and λ sweeps.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{resolved_class_weights, Dataset, SplitIndices};
use crate::error::{Error, Result};
use crate::losses::{self, ClassWeight, LossConfig, LossKind};
use crate::metrics::MetricsReport;
use crate::numerics::{
    adamax_step, backward_train, forward, init_params, AdamaxConfig, ModelParams, OptimizerState,
};

/// Loss selection as written in a config file. Class weights default to the
/// balanced weights of the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<ClassWeight>>,
}

fn default_lambda() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(kind: LossKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            class_weights: None,
        }
    }

    pub fn resolve(&self, d: &Dataset, allow_degenerate: bool) -> Result<LossConfig> {
        let weights = match &self.class_weights {
            Some(w) => w.clone(),
            None => resolved_class_weights(d, allow_degenerate)?,
        };
        let cfg = LossConfig::new(self.kind, self.lambda, weights);
        cfg.validate()?;
        if cfg.n_groups() != d.n_groups() {
            return Err(Error::InvalidConfig(format!(
                "{} class weights for {} groups",
                cfg.n_groups(),
                d.n_groups()
            )));
        }
        Ok(cfg)
    }

    /// Short display label such as `GAP_MULTI(λ=1)`.
    pub fn label(&self) -> String {
        match self.kind {
            LossKind::Oe => "OE".to_string(),
            k => format!("{k}(λ={})", self.lambda),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Mean training loss over the epoch's steps.
    #[default]
    TrainLoss,
    /// Loss on the evaluation set in evaluation mode.
    EvalLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs_max: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub early_stop_min_delta: f64,
    pub early_stop_patience: usize,
    pub monitor: Monitor,
    pub threshold: f64,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub allow_degenerate_groups: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::new(LossKind::GapMulti, 1.0),
            epochs_max: 50,
            steps_per_epoch: 1000,
            batch_size: 64,
            early_stop_min_delta: 1e-4,
            early_stop_patience: 5,
            monitor: Monitor::TrainLoss,
            threshold: 0.5,
            seed: 0,
            hidden_sizes: vec![64, 32, 16],
            dropout_rate: 0.1,
            learning_rate: 1e-3,
            allow_degenerate_groups: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs_max == 0 {
            return bad("epochs_max must be at least 1".into());
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if !(self.early_stop_min_delta > 0.0) {
            return bad("early_stop_min_delta must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be positive".into());
        }
        Ok(())
    }

    pub fn layer_sizes(&self, n_inputs: usize, n_outputs: usize) -> Vec<usize> {
        std::iter::once(n_inputs)
            .chain(self.hidden_sizes.iter().copied())
            .chain(std::iter::once(n_outputs))
            .collect()
    }
}

/// Keras-style early stopping on a scalar stream.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    min_delta: f64,
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(min_delta: f64, patience: usize) -> Self {
        Self {
            min_delta,
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
            epoch: 0,
        }
    }

    /// Records one epoch's monitored value; returns true when training
    /// should stop.
    pub fn update(&mut self, value: f64) -> bool {
        self.epoch += 1;
        if value < self.best - self.min_delta {
            self.best = value;
            self.best_epoch = self.epoch;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }

    /// 1-based epoch of the last improvement.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Number of epochs run before stopping on `values`, or `None` if the
/// stream ends first.
pub fn stopping_epoch(values: &[f64], min_delta: f64, patience: usize) -> Option<usize> {
    let mut es = EarlyStopping::new(min_delta, patience);
    values
        .iter()
        .position(|&v| es.update(v))
        .map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
    /// Monitored value per epoch (equal to `epoch_losses` for the train monitor).
    pub monitored: Vec<f64>,
    pub eval_reports: Vec<MetricsReport>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub converged_epoch: usize,
}

pub fn train(d_train: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainTrace)> {
    train_with_eval(d_train, None, cfg)
}

/// Trains on `d_train`, reporting metrics on `d_eval` (or the training data)
/// after every epoch.
pub fn train_with_eval(
    d_train: &Dataset,
    d_eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    cfg.validate()?;
    d_train.validate()?;
    if cfg.monitor == Monitor::EvalLoss && d_eval.is_none() {
        return Err(Error::InvalidConfig(
            "eval_loss monitor requires an evaluation dataset".into(),
        ));
    }
    let eval_set = d_eval.unwrap_or(d_train);
    if eval_set.feature_dim() != d_train.feature_dim() || eval_set.n_groups() != d_train.n_groups() {
        return Err(Error::Shape("evaluation data does not match training data".into()));
    }
    let loss_cfg = cfg.loss.resolve(d_train, cfg.allow_degenerate_groups)?;

    let sizes = cfg.layer_sizes(d_train.feature_dim(), d_train.n_groups());
    let mut params = init_params(&sizes, cfg.seed)?.with_dropout(cfg.dropout_rate);
    let mut state = OptimizerState::new(
        &params,
        AdamaxConfig {
            learning_rate: cfg.learning_rate,
            ..AdamaxConfig::default()
        },
    )?;

    let targets = d_train.labels_f64();
    let eval_targets = eval_set.labels_f64();
    let n = d_train.n_samples();
    let batch = cfg.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut es = EarlyStopping::new(cfg.early_stop_min_delta, cfg.early_stop_patience);
    let mut trace = TrainTrace {
        epoch_losses: Vec::new(),
        monitored: Vec::new(),
        eval_reports: Vec::new(),
        epochs_run: 0,
        stopped_early: false,
        converged_epoch: 0,
    };
    let mut step: u64 = 0;
    for _epoch in 0..cfg.epochs_max {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let x = d_train.features.select(Axis(0), idx);
            let y = targets.select(Axis(0), idx);
            let dropout_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step;
            let (loss, grads) = backward_train(&params, x.view(), y.view(), &loss_cfg, dropout_seed)?;
            (params, state) = adamax_step(params, &grads, state)?;
            total += loss;
            step += 1;
        }
        let epoch_loss = total / cfg.steps_per_epoch as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NumericInput(format!(
                "training loss diverged at epoch {}",
                trace.epochs_run + 1
            )));
        }
        let probs = forward(&params, eval_set.features.view(), false, 0)?;
        let report =
            MetricsReport::compute(&eval_set.group_names, eval_targets.view(), probs.view(), cfg.threshold)?;
        let monitored = match cfg.monitor {
            Monitor::TrainLoss => epoch_loss,
            Monitor::EvalLoss => losses::evaluate_loss(eval_targets.view(), probs.view(), &loss_cfg)?,
        };
        trace.epoch_losses.push(epoch_loss);
        trace.monitored.push(monitored);
        trace.eval_reports.push(report);
        trace.epochs_run += 1;
        log::debug!("epoch {} loss {epoch_loss:.6}", trace.epochs_run);
        if es.update(monitored) {
            trace.stopped_early = true;
            break;
        }
    }
    trace.converged_epoch = es.best_epoch();
    Ok((params, trace))
}

/// Metrics of a trained network on a dataset.
pub fn evaluate(params: &ModelParams, d_test: &Dataset, threshold: f64) -> Result<MetricsReport> {
    let probs = forward(params, d_test.features.view(), false, 0)?;
    if probs.ncols() != d_test.n_groups() {
        return Err(Error::Shape(format!(
            "network has {} outputs, dataset has {} groups",
            probs.ncols(),
            d_test.n_groups()
        )));
    }
    MetricsReport::compute(&d_test.group_names, d_test.labels_f64().view(), probs.view(), threshold)
}

/// Per-group weighted BCE of a trained network on a dataset.
pub fn group_errors_on(
    params: &ModelParams,
    d: &Dataset,
    weights: &[ClassWeight],
) -> Result<Vec<f64>> {
    let probs = forward(params, d.features.view(), false, 0)?;
    Ok(losses::group_errors(d.labels_f64().view(), probs.view(), weights)?.0)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self { mean, std }
    }
}

/// One training run on the fixed split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub report: MetricsReport,
    /// Pairwise penalty of the test-set group errors under the run's weights.
    pub test_pairwise_penalty: f64,
    pub epochs_run: usize,
    pub converged_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub label: String,
    pub loss: LossSpec,
    pub avg_ba: Stat,
    pub max_diff: Stat,
    pub hamming: Stat,
    pub macro_precision: Stat,
    pub macro_recall: Stat,
    pub macro_f1: Stat,
    pub epochs_run: Stat,
    /// Mean BA per group over seeds, `None` if undefined in any run.
    pub mean_group_ba: Vec<Option<f64>>,
    /// Heatmap of the mean per-group BA.
    pub mean_ba_diff_matrix: Vec<Vec<Option<f64>>>,
    /// Groups for which this loss had the best mean BA.
    pub best_ba_count: usize,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub group_names: Vec<String>,
    pub n_seeds: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub losses: Vec<LossSummary>,
}

/// Largest Avg BA drop from the baseline that still counts as preserving utility.
pub const DEFAULT_BA_TOLERANCE: f64 = 0.02;

impl ComparisonReport {
    pub fn by_label(&self, label: &str) -> Option<&LossSummary> {
        self.losses.iter().find(|l| l.label == label)
    }

    /// Picks one λ for a loss family: the lowest mean Max Diff among the
    /// configs whose mean Avg BA is within `ba_tolerance` of `baseline`,
    /// otherwise the config with the highest mean Avg BA.
    pub fn select_lambda(
        &self,
        kind: LossKind,
        baseline: &LossSummary,
        ba_tolerance: f64,
    ) -> Option<&LossSummary> {
        let family: Vec<&LossSummary> = self.losses.iter().filter(|l| l.loss.kind == kind).collect();
        let floor = baseline.avg_ba.mean - ba_tolerance;
        family
            .iter()
            .filter(|l| l.avg_ba.mean >= floor)
            .min_by(|a, b| a.max_diff.mean.total_cmp(&b.max_diff.mean))
            .or_else(|| family.iter().max_by(|a, b| a.avg_ba.mean.total_cmp(&b.avg_ba.mean)))
            .copied()
    }
}

/// Seeds used for the `k`-th repetition of a config.
pub fn run_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

fn run_once(train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<RunResult> {
    let (params, trace) = train_with_eval(train_set, Some(test_set), cfg)?;
    let report = evaluate(&params, test_set, cfg.threshold)?;
    let weights = cfg
        .loss
        .resolve(train_set, cfg.allow_degenerate_groups)?
        .class_weights;
    let errs = group_errors_on(&params, test_set, &weights)?;
    Ok(RunResult {
        seed: cfg.seed,
        report,
        test_pairwise_penalty: losses::pairwise_penalty(&errs),
        epochs_run: trace.epochs_run,
        converged_epoch: trace.converged_epoch,
    })
}

fn summarize(cfg: &TrainConfig, runs: Vec<RunResult>, n_groups: usize) -> LossSummary {
    let col = |f: &dyn Fn(&RunResult) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let mean_group_ba: Vec<Option<f64>> = (0..n_groups)
        .map(|g| {
            let vals: Option<Vec<f64>> = runs
                .iter()
                .map(|r| r.report.per_group_ba.get_index(g).and_then(|(_, v)| *v))
                .collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let matrix = mean_group_ba
        .iter()
        .map(|a| {
            mean_group_ba
                .iter()
                .map(|b| match (a, b) {
                    (Some(a), Some(b)) => Some((a - b).abs()),
                    _ => None,
                })
                .collect()
        })
        .collect();
    LossSummary {
        label: cfg.loss.label(),
        loss: cfg.loss.clone(),
        avg_ba: Stat::of(&col(&|r| r.report.avg_ba)),
        max_diff: Stat::of(&col(&|r| r.report.max_diff)),
        hamming: Stat::of(&col(&|r| r.report.hamming)),
        macro_precision: Stat::of(&col(&|r| r.report.macro_precision)),
        macro_recall: Stat::of(&col(&|r| r.report.macro_recall)),
        macro_f1: Stat::of(&col(&|r| r.report.macro_f1)),
        epochs_run: Stat::of(&col(&|r| r.epochs_run as f64)),
        mean_group_ba,
        mean_ba_diff_matrix: matrix,
        best_ba_count: 0,
        runs,
    }
}

/// Trains every config with `n_seeds` seeds on a fixed split and summarizes
/// mean and sample standard deviation of each metric. Runs execute in
/// parallel; results do not depend on scheduling.
pub fn compare_losses(
    d: &Dataset,
    split: &SplitIndices,
    configs: &[TrainConfig],
    n_seeds: usize,
) -> Result<ComparisonReport> {
    if configs.len() < 2 {
        return Err(Error::InvalidConfig("compare needs at least two configs".into()));
    }
    if n_seeds < 2 {
        return Err(Error::InvalidConfig("compare needs at least two seeds".into()));
    }
    let train_set = d.subset(&split.train_indices);
    let test_set = d.subset(&split.test_indices);
    let jobs: Vec<(usize, TrainConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(c, cfg)| {
            (0..n_seeds).map(move |k| {
                let mut cfg = cfg.clone();
                cfg.seed = run_seed(cfg.seed, k);
                (c, cfg)
            })
        })
        .collect();
    let results: Vec<(usize, RunResult)> = jobs
        .par_iter()
        .map(|(c, cfg)| run_once(&train_set, &test_set, cfg).map(|r| (*c, r)))
        .collect::<Result<_>>()?;

    let g = d.n_groups();
    let mut summaries: Vec<LossSummary> = configs
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let runs = results
                .iter()
                .filter(|(i, _)| *i == c)
                .map(|(_, r)| r.clone())
                .collect();
            summarize(cfg, runs, g)
        })
        .collect();
    for k in 0..g {
        let best = summaries
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.mean_group_ba[k].map(|v| (i, v)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = best {
            summaries[i].best_ba_count += 1;
        }
    }
    Ok(ComparisonReport {
        group_names: d.group_names.clone(),
        n_seeds,
        n_train: train_set.n_samples(),
        n_test: test_set.n_samples(),
        losses: summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub avg_ba: Stat,
    pub max_diff: Stat,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: LossKind,
    pub n_seeds: usize,
    /// Sorted by ascending λ.
    pub rows: Vec<SweepRow>,
}

/// Trains `base_cfg` at each λ with paired seeds.
pub fn lambda_sweep(
    d: &Dataset,
    split: &SplitIndices,
    base_cfg: &TrainConfig,
    lambdas: &[f64],
    n_seeds: usize,
) -> Result<SweepReport> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one λ".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::InvalidConfig(format!("λ must be non-negative, got {l}")));
    }
    if n_seeds == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let train_set = d.subset(&split.train_indices);
    let test_set = d.subset(&split.test_indices);
    let jobs: Vec<(usize, TrainConfig)> = sorted
        .iter()
        .enumerate()
        .flat_map(|(i, &lambda)| {
            (0..n_seeds).map(move |k| {
                let mut cfg = base_cfg.clone();
                cfg.loss.lambda = lambda;
                cfg.seed = run_seed(base_cfg.seed, k);
                (i, cfg)
            })
        })
        .collect();
    let results: Vec<(usize, RunResult)> = jobs
        .par_iter()
        .map(|(i, cfg)| run_once(&train_set, &test_set, cfg).map(|r| (*i, r)))
        .collect::<Result<_>>()?;
    let rows = sorted
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let runs: Vec<RunResult> = results
                .iter()
                .filter(|(j, _)| *j == i)
                .map(|(_, r)| r.clone())
                .collect();
            let ab: Vec<f64> = runs.iter().map(|r| r.report.avg_ba).collect();
            let md: Vec<f64> = runs.iter().map(|r| r.report.max_diff).collect();
            SweepRow {
                lambda,
                avg_ba: Stat::of(&ab),
                max_diff: Stat::of(&md),
                runs,
            }
        })
        .collect();
    Ok(SweepReport {
        kind: base_cfg.loss.kind,
        n_seeds,
        rows,
    })
}

/// Probabilities of a network over a feature matrix (evaluation mode).
pub fn predict(params: &ModelParams, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    forward(params, features, false, 0)
}
