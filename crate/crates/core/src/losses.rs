//! Training objectives over per-group weighted cross-entropy.
//!
//! Every objective here is built from weighted binary cross-entropy terms
//! computed over sets of (sample, output) cells:
//!
//! * `OE`: sum over groups of the group's weighted BCE.
//! * `GAP_MULTI`: `OE + λ Σ_{i<j} (err_i − err_j)²` over all group pairs.
//! * `SOO`: `OE + λ Σ_g |err_g − mean(err)|`, the deviation-from-mean form.
//! * `CLA`: pooled weighted BCE plus `λ Σ_y Σ_g |err(y, g) − err(y)|`.
//!
//! Groups are either output columns (multi-label mode, the default) or
//! partitions of a single label column by a demographic id column
//! (partitioned mode, the two-group legacy layout).
//!
//! [`loss_and_grad`] returns the loss together with its derivative with
//! respect to every (clamped) predicted probability, which the network
//! backward pass chains through the sigmoid.

use std::ops::Deref;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "OE")]
    Oe,
    #[serde(rename = "GAP_MULTI")]
    GapMulti,
    #[serde(rename = "CLA")]
    Cla,
    #[serde(rename = "SOO")]
    Soo,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Oe => "OE",
            LossKind::GapMulti => "GAP_MULTI",
            LossKind::Cla => "CLA",
            LossKind::Soo => "SOO",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How cells are assigned to groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupIndexing {
    /// Group `g` is output column `g` over every sample.
    #[default]
    MultiLabel,
    /// Targets are `N × 2`: column 0 is the label, column 1 the group id.
    /// Predictions are `N × 1`; group `g` is the rows whose id equals `g`.
    Partitioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeight {
    pub pos: f64,
    pub neg: f64,
}

impl ClassWeight {
    pub const UNIT: ClassWeight = ClassWeight { pos: 1.0, neg: 1.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default)]
    pub lambda: f64,
    pub class_weights: Vec<ClassWeight>,
    #[serde(default)]
    pub indexing: GroupIndexing,
}

impl LossConfig {
    pub fn new(kind: LossKind, lambda: f64, class_weights: Vec<ClassWeight>) -> Self {
        Self {
            kind,
            lambda,
            class_weights,
            indexing: GroupIndexing::MultiLabel,
        }
    }

    pub fn with_indexing(mut self, indexing: GroupIndexing) -> Self {
        self.indexing = indexing;
        self
    }

    pub fn n_groups(&self) -> usize {
        self.class_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.class_weights.is_empty() {
            return Err(Error::InvalidConfig("class_weights is empty".into()));
        }
        for (g, w) in self.class_weights.iter().enumerate() {
            let ok = |x: f64| x.is_finite() && x > 0.0;
            if !ok(w.pos) || !ok(w.neg) {
                return Err(Error::InvalidConfig(format!(
                    "class weight for group {g} must be positive and finite, got ({}, {})",
                    w.pos, w.neg
                )));
            }
        }
        Ok(())
    }
}

/// Per-group weighted cross-entropy errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupErrorVector(pub Vec<f64>);

impl Deref for GroupErrorVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Weighted cross-entropy of a single cell, on the clamped probability.
#[inline]
fn cell_ce(label: bool, p: f64, w: ClassWeight) -> f64 {
    let p = clamp_prob(p);
    if label {
        -w.pos * p.ln()
    } else {
        -w.neg * (1.0 - p).ln()
    }
}

/// Derivative of [`cell_ce`] with respect to the unclamped probability.
/// Zero where the clamp is active.
#[inline]
fn cell_ce_dp(label: bool, p: f64, w: ClassWeight) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if label {
        -w.pos / p
    } else {
        w.neg / (1.0 - p)
    }
}

fn parse_label(v: f64, what: &str) -> Result<bool> {
    if v == 1.0 {
        Ok(true)
    } else if v == 0.0 {
        Ok(false)
    } else {
        Err(Error::NumericInput(format!("{what} must be 0 or 1, got {v}")))
    }
}

/// Mean weighted BCE: `mean_i −[w_pos·y·ln p + w_neg·(1−y)·ln(1−p)]`.
pub fn wbce(y_true: &[f64], y_pred: &[f64], w_pos: f64, w_neg: f64) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "wbce: {} targets vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("wbce on zero samples".into()));
    }
    let w = ClassWeight {
        pos: w_pos,
        neg: w_neg,
    };
    let mut sum = 0.0;
    for (&y, &p) in y_true.iter().zip(y_pred) {
        sum += cell_ce(parse_label(y, "target")?, p, w);
    }
    Ok(sum / y_true.len() as f64)
}

/// One (sample, output) cell with its group assignment.
#[derive(Debug, Clone, Copy)]
struct Cell {
    row: usize,
    col: usize,
    group: usize,
    label: bool,
}

/// Cells grouped and validated for one batch.
struct CellLayout {
    cells: Vec<Cell>,
    n_groups: usize,
}

impl CellLayout {
    fn build(
        y_true: ArrayView2<f64>,
        y_pred: ArrayView2<f64>,
        n_groups: usize,
        indexing: GroupIndexing,
    ) -> Result<Self> {
        let n = y_true.nrows();
        if y_pred.nrows() != n {
            return Err(Error::Shape(format!(
                "{} target rows vs {} prediction rows",
                n,
                y_pred.nrows()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput("loss over zero samples".into()));
        }
        let mut cells = Vec::new();
        match indexing {
            GroupIndexing::MultiLabel => {
                if y_true.ncols() != n_groups || y_pred.ncols() != n_groups {
                    return Err(Error::Shape(format!(
                        "expected {n_groups} group columns, got targets {} and predictions {}",
                        y_true.ncols(),
                        y_pred.ncols()
                    )));
                }
                cells.reserve(n * n_groups);
                // column-major so each group's cells are contiguous
                for g in 0..n_groups {
                    for r in 0..n {
                        cells.push(Cell {
                            row: r,
                            col: g,
                            group: g,
                            label: parse_label(y_true[[r, g]], "target")?,
                        });
                    }
                }
            }
            GroupIndexing::Partitioned => {
                if y_true.ncols() != 2 || y_pred.ncols() != 1 {
                    return Err(Error::Shape(format!(
                        "partitioned mode needs N×2 targets and N×1 predictions, got {} and {}",
                        y_true.ncols(),
                        y_pred.ncols()
                    )));
                }
                let mut by_group: Vec<Vec<Cell>> = vec![Vec::new(); n_groups];
                for r in 0..n {
                    let id = y_true[[r, 1]];
                    if !(id >= 0.0 && id.fract() == 0.0 && (id as usize) < n_groups) {
                        return Err(Error::NumericInput(format!(
                            "row {r}: group id {id} outside 0..{n_groups}"
                        )));
                    }
                    let g = id as usize;
                    by_group[g].push(Cell {
                        row: r,
                        col: 0,
                        group: g,
                        label: parse_label(y_true[[r, 0]], "target")?,
                    });
                }
                cells = by_group.into_iter().flatten().collect();
            }
        }
        for c in &cells {
            let p = y_pred[[c.row, c.col]];
            if !p.is_finite() {
                return Err(Error::NumericInput(format!(
                    "prediction at ({}, {}) is {p}",
                    c.row, c.col
                )));
            }
        }
        Ok(Self { cells, n_groups })
    }

    fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_groups];
        for c in &self.cells {
            counts[c.group] += 1;
        }
        counts
    }

    fn group_errors(&self, y_pred: ArrayView2<f64>, weights: &[ClassWeight]) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_groups];
        for c in &self.cells {
            sums[c.group] += cell_ce(c.label, y_pred[[c.row, c.col]], weights[c.group]);
        }
        sums.iter()
            .zip(self.group_counts())
            .map(|(&s, n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }
}

fn check_weights(weights: &[ClassWeight], n_groups: usize) -> Result<()> {
    if weights.len() != n_groups {
        return Err(Error::Shape(format!(
            "{} class weights for {} groups",
            weights.len(),
            n_groups
        )));
    }
    Ok(())
}

/// Per-group weighted BCE in multi-label mode: group `g` is column `g`.
pub fn group_errors(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
) -> Result<GroupErrorVector> {
    group_errors_indexed(y_true, y_pred, weights, GroupIndexing::MultiLabel)
}

/// Per-group weighted BCE with explicit group indexing. In partitioned mode
/// an empty partition contributes zero.
pub fn group_errors_indexed(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
    indexing: GroupIndexing,
) -> Result<GroupErrorVector> {
    let layout = CellLayout::build(y_true, y_pred, weights.len(), indexing)?;
    check_weights(weights, layout.n_groups)?;
    Ok(GroupErrorVector(layout.group_errors(y_pred, weights)))
}

fn sum_errors(errs: &[f64]) -> f64 {
    errs.iter().sum()
}

/// Sum of per-group errors (the OE term).
pub fn overall_loss(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
) -> Result<f64> {
    Ok(sum_errors(&group_errors(y_true, y_pred, weights)?))
}

/// The individual squared differences `(err_i − err_j)²` for `i < j`, in
/// lexicographic pair order.
pub fn pairwise_terms(errs: &[f64]) -> Vec<f64> {
    let g = errs.len();
    let mut terms = Vec::with_capacity(g * g.saturating_sub(1) / 2);
    for i in 0..g {
        for j in (i + 1)..g {
            let d = errs[i] - errs[j];
            terms.push(d * d);
        }
    }
    terms
}

/// Sum of squared error differences over all unordered group pairs.
pub fn pairwise_penalty(errs: &[f64]) -> f64 {
    pairwise_terms(errs).iter().sum()
}

/// Parallel form of [`pairwise_penalty`]. Terms are computed concurrently
/// per row of the pair triangle and reduced in pair order, so the result is
/// bit-identical to the serial form for any thread count.
pub fn pairwise_penalty_par(errs: &[f64]) -> f64 {
    let g = errs.len();
    let rows: Vec<Vec<f64>> = (0..g)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..g)
                .map(|j| {
                    let d = errs[i] - errs[j];
                    d * d
                })
                .collect()
        })
        .collect();
    rows.iter().flatten().sum()
}

fn mean_abs_deviation_sum(errs: &[f64]) -> f64 {
    let mean = sum_errors(errs) / errs.len() as f64;
    errs.iter().map(|e| (e - mean).abs()).sum()
}

/// `OE + λ · Σ_{i<j} (err_i − err_j)²`.
pub fn gap_multi_loss(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
    lambda: f64,
) -> Result<f64> {
    let errs = group_errors(y_true, y_pred, weights)?;
    Ok(gap_multi_from_errors(&errs, lambda))
}

fn gap_multi_from_errors(errs: &[f64], lambda: f64) -> f64 {
    sum_errors(errs) + lambda * pairwise_penalty(errs)
}

/// Two-group form: `OE + λ (err_1 − err_0)²`.
pub fn gap_binary_loss(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
    lambda: f64,
) -> Result<f64> {
    if weights.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "binary GAP needs exactly 2 groups, got {}",
            weights.len()
        )));
    }
    let errs = group_errors(y_true, y_pred, weights)?;
    let d = errs[1] - errs[0];
    Ok(sum_errors(&errs) + lambda * (d * d))
}

/// `OE + λ · Σ_g |err_g − mean(err)|`.
pub fn soo_loss(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
    lambda: f64,
) -> Result<f64> {
    let errs = group_errors(y_true, y_pred, weights)?;
    Ok(soo_from_errors(&errs, lambda))
}

fn soo_from_errors(errs: &[f64], lambda: f64) -> f64 {
    sum_errors(errs) + lambda * mean_abs_deviation_sum(errs)
}

/// The error terms CLA is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaTerms {
    /// Weighted BCE pooled over every cell.
    pub pooled: f64,
    /// Label-conditioned error pooled over groups, indexed by label (0, 1),
    /// as a class-weighted mean.
    /// `None` when no cell carries that label.
    pub by_label: [Option<f64>; 2],
    /// Label-and-group conditioned error, `[label][group]`.
    pub by_label_group: [Vec<Option<f64>>; 2],
}

impl ClaTerms {
    /// `Σ_y Σ_g |err(y, g) − err(y)|`; empty cells contribute zero.
    pub fn regularizer(&self) -> f64 {
        let mut total = 0.0;
        for y in 0..2 {
            let Some(pooled_y) = self.by_label[y] else {
                continue;
            };
            for cell in self.by_label_group[y].iter().flatten() {
                total += (cell - pooled_y).abs();
            }
        }
        total
    }
}

/// Running `(weighted CE sum, normaliser)` pairs. The pooled term is a mean
/// over cells; label-conditioned terms are normalised by class-weight mass,
/// so within a cell they reduce to the plain cross-entropy mean.
struct ClaAccum {
    total: (f64, f64),
    label: [(f64, f64); 2],
    label_group: [Vec<(f64, f64)>; 2],
}

fn cla_accumulate(layout: &CellLayout, y_pred: ArrayView2<f64>, weights: &[ClassWeight]) -> ClaAccum {
    let g = layout.n_groups;
    let mut acc = ClaAccum {
        total: (0.0, 0.0),
        label: [(0.0, 0.0); 2],
        label_group: [vec![(0.0, 0.0); g], vec![(0.0, 0.0); g]],
    };
    for c in &layout.cells {
        let w = weights[c.group];
        let ce = cell_ce(c.label, y_pred[[c.row, c.col]], w);
        let mass = if c.label { w.pos } else { w.neg };
        let y = c.label as usize;
        acc.total.0 += ce;
        acc.total.1 += 1.0;
        acc.label[y].0 += ce;
        acc.label[y].1 += mass;
        acc.label_group[y][c.group].0 += ce;
        acc.label_group[y][c.group].1 += mass;
    }
    acc
}

fn mean_of((sum, n): (f64, f64)) -> Option<f64> {
    (n > 0.0).then(|| sum / n)
}

impl ClaAccum {
    fn terms(&self) -> ClaTerms {
        ClaTerms {
            pooled: mean_of(self.total).unwrap_or(0.0),
            by_label: [mean_of(self.label[0]), mean_of(self.label[1])],
            by_label_group: [
                self.label_group[0].iter().copied().map(mean_of).collect(),
                self.label_group[1].iter().copied().map(mean_of).collect(),
            ],
        }
    }
}

/// Computes the pooled, label-conditioned and label-and-group conditioned
/// errors that make up CLA (multi-label mode).
pub fn cla_terms(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
) -> Result<ClaTerms> {
    cla_terms_indexed(y_true, y_pred, weights, GroupIndexing::MultiLabel)
}

pub fn cla_terms_indexed(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
    indexing: GroupIndexing,
) -> Result<ClaTerms> {
    let layout = CellLayout::build(y_true, y_pred, weights.len(), indexing)?;
    Ok(cla_accumulate(&layout, y_pred, weights).terms())
}

/// `wBCE + λ · Σ_y Σ_g |wBCE(y, g) − wBCE(y)|`.
pub fn cla_loss(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    weights: &[ClassWeight],
    lambda: f64,
) -> Result<f64> {
    let t = cla_terms(y_true, y_pred, weights)?;
    Ok(t.pooled + lambda * t.regularizer())
}

/// Loss value for any configuration.
pub fn evaluate_loss(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    config: &LossConfig,
) -> Result<f64> {
    config.validate()?;
    let layout = CellLayout::build(y_true, y_pred, config.n_groups(), config.indexing)?;
    Ok(value_on_layout(&layout, y_pred, config))
}

fn value_on_layout(layout: &CellLayout, y_pred: ArrayView2<f64>, config: &LossConfig) -> f64 {
    let w = &config.class_weights;
    match config.kind {
        LossKind::Oe => sum_errors(&layout.group_errors(y_pred, w)),
        LossKind::GapMulti => gap_multi_from_errors(&layout.group_errors(y_pred, w), config.lambda),
        LossKind::Soo => soo_from_errors(&layout.group_errors(y_pred, w), config.lambda),
        LossKind::Cla => {
            let t = cla_accumulate(layout, y_pred, w).terms();
            t.pooled + config.lambda * t.regularizer()
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Derivative of a group-error objective with respect to each group error.
fn group_objective_grad(kind: LossKind, errs: &[f64], lambda: f64) -> Vec<f64> {
    let g = errs.len();
    match kind {
        LossKind::Oe => vec![1.0; g],
        LossKind::GapMulti => (0..g)
            .map(|i| {
                let spread: f64 = (0..g).filter(|&j| j != i).map(|j| errs[i] - errs[j]).sum();
                1.0 + 2.0 * lambda * spread
            })
            .collect(),
        LossKind::Soo => {
            let mean = sum_errors(errs) / g as f64;
            let signs: Vec<f64> = errs.iter().map(|e| sign(e - mean)).collect();
            let mean_sign = signs.iter().sum::<f64>() / g as f64;
            signs.iter().map(|s| 1.0 + lambda * (s - mean_sign)).collect()
        }
        LossKind::Cla => unreachable!("CLA is not a group-error objective"),
    }
}

/// Loss value and its derivative with respect to each entry of `y_pred`.
///
/// The value is bit-identical to [`evaluate_loss`] on the same inputs.
pub fn loss_and_grad(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    config: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    config.validate()?;
    let layout = CellLayout::build(y_true, y_pred, config.n_groups(), config.indexing)?;
    let value = value_on_layout(&layout, y_pred, config);
    let w = &config.class_weights;
    let mut grad = Array2::zeros(y_pred.raw_dim());

    match config.kind {
        LossKind::Oe | LossKind::GapMulti | LossKind::Soo => {
            let errs = layout.group_errors(y_pred, w);
            let d_err = group_objective_grad(config.kind, &errs, config.lambda);
            let counts = layout.group_counts();
            for c in &layout.cells {
                let p = y_pred[[c.row, c.col]];
                let scale = d_err[c.group] / counts[c.group] as f64;
                grad[[c.row, c.col]] += scale * cell_ce_dp(c.label, p, w[c.group]);
            }
        }
        LossKind::Cla => {
            let acc = cla_accumulate(&layout, y_pred, w);
            let t = acc.terms();
            let lambda = config.lambda;
            // d/d err(y,g) = λ·sign, d/d err(y) = −λ·Σ_g sign
            let mut cell_sign = [vec![0.0; layout.n_groups], vec![0.0; layout.n_groups]];
            let mut label_coef = [0.0; 2];
            for y in 0..2 {
                if let Some(pooled_y) = t.by_label[y] {
                    for (g, cell) in t.by_label_group[y].iter().enumerate() {
                        if let Some(v) = cell {
                            cell_sign[y][g] = sign(v - pooled_y);
                        }
                    }
                    label_coef[y] = -lambda * cell_sign[y].iter().sum::<f64>();
                }
            }
            let n_total = acc.total.1;
            for c in &layout.cells {
                let y = c.label as usize;
                let p = y_pred[[c.row, c.col]];
                let cell_mass = acc.label_group[y][c.group].1;
                let label_mass = acc.label[y].1;
                let scale = 1.0 / n_total
                    + lambda * cell_sign[y][c.group] / cell_mass
                    + label_coef[y] / label_mass;
                grad[[c.row, c.col]] += scale * cell_ce_dp(c.label, p, w[c.group]);
            }
        }
    }
    Ok((value, grad))
}
