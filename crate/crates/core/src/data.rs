//! Datasets: synthetic generation, CSV ingestion, stratified splitting,
//! class weights and prevalence statistics.
//!
//! CSV layout is `f0,...,f{F-1},g:<name0>,...,g:<name{G-1}>` with decimal
//! features and `0`/`1` labels. Features are written with the shortest
//! round-trip representation so `load(save(d)) == d` bit for bit.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassWeight;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    /// `N × G`, entries 0 or 1.
    pub labels: Array2<u8>,
    pub group_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Array2<u8>, group_names: Vec<String>) -> Result<Self> {
        let d = Self {
            features,
            labels,
            group_names,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, f) = self.features.dim();
        if n == 0 || f == 0 {
            return Err(Error::EmptyInput(format!("dataset is {n} × {f}")));
        }
        if self.labels.nrows() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows vs {} label rows",
                self.labels.nrows()
            )));
        }
        if self.labels.ncols() == 0 || self.labels.ncols() != self.group_names.len() {
            return Err(Error::Shape(format!(
                "{} label columns vs {} group names",
                self.labels.ncols(),
                self.group_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.group_names {
            if name.is_empty() || !seen.insert(name) {
                return Err(Error::InvalidConfig(format!(
                    "group names must be unique and non-empty, got {:?}",
                    self.group_names
                )));
            }
        }
        if let Some(((r, c), _)) = self.labels.indexed_iter().find(|(_, &v)| v > 1) {
            return Err(Error::Ingestion {
                row: r,
                column: self.group_names[c].clone(),
                message: "label must be 0 or 1".into(),
            });
        }
        if let Some(((r, c), v)) = self.features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NumericInput(format!("feature ({r}, {c}) is {v}")));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.labels.ncols()
    }

    pub fn labels_f64(&self) -> Array2<f64> {
        self.labels.mapv(f64::from)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(ndarray::Axis(0), indices),
            labels: self.labels.select(ndarray::Axis(0), indices),
            group_names: self.group_names.clone(),
        }
    }

    pub fn positive_counts(&self) -> Vec<usize> {
        self.labels
            .columns()
            .into_iter()
            .map(|c| c.iter().filter(|&&v| v == 1).count())
            .collect()
    }
}

fn default_correlation() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub feature_dim: usize,
    /// Per-group positive probability, each strictly inside (0, 1).
    pub base_rates: Vec<f64>,
    /// Norm of each group's prototype in feature space.
    pub separability: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Probability that a row's labels come from one shared uniform draw
    /// instead of independent draws. Marginal rates are unchanged; higher
    /// values produce more rows targeting several groups at once.
    #[serde(default = "default_correlation")]
    pub correlation: f64,
    /// Optional per-group multipliers on `separability`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_separability: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_names: Option<Vec<String>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let g = self.base_rates.len();
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if g == 0 {
            return bad("base_rates is empty".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.n_samples < 10 * g {
            return bad(format!(
                "n_samples must be at least 10 per group ({}), got {}",
                10 * g,
                self.n_samples
            ));
        }
        if let Some(r) = self.base_rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return bad(format!("base rate {r} outside (0, 1)"));
        }
        if !(self.separability >= 0.0 && self.separability.is_finite()) {
            return bad(format!("separability must be non-negative, got {}", self.separability));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be positive, got {}", self.noise_scale));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad(format!("correlation must lie in [0, 1], got {}", self.correlation));
        }
        if let Some(m) = &self.group_separability {
            if m.len() != g || m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("group_separability needs one non-negative entry per group".into());
            }
        }
        if let Some(names) = &self.group_names {
            if names.len() != g {
                return bad(format!("{} group names for {g} groups", names.len()));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.group_names
            .clone()
            .unwrap_or_else(|| (0..self.base_rates.len()).map(|g| format!("group{g}")).collect())
    }
}

/// Labels are per-group Bernoulli draws; each row's features are the sum of
/// the prototypes of its positive groups plus isotropic Gaussian noise.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let g = spec.base_rates.len();
    let f = spec.feature_dim;
    let n = spec.n_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let prototypes: Vec<Array1<f64>> = (0..g)
        .map(|k| {
            let v = Array1::from_shape_fn(f, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = v.dot(&v).sqrt().max(f64::MIN_POSITIVE);
            let scale = spec.group_separability.as_ref().map_or(1.0, |m| m[k]);
            v * (spec.separability * scale / norm)
        })
        .collect();

    let mut features = Array2::zeros((n, f));
    let mut labels = Array2::zeros((n, g));
    for i in 0..n {
        let shared = (rng.random::<f64>() < spec.correlation).then(|| rng.random::<f64>());
        for k in 0..g {
            let u = shared.unwrap_or_else(|| rng.random::<f64>());
            if u < spec.base_rates[k] {
                labels[[i, k]] = 1;
            }
        }
        let mut row = features.row_mut(i);
        for k in 0..g {
            if labels[[i, k]] == 1 {
                row += &prototypes[k];
            }
        }
        for v in row.iter_mut() {
            *v += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Dataset::new(features, labels, spec.names())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    #[default]
    Csv,
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Csv => {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(file)
        }
    }
}

pub fn save_dataset(d: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    match format {
        DataFormat::Csv => std::fs::write(path, to_csv(d)).map_err(|e| Error::io(path, e)),
    }
}

pub fn to_csv(d: &Dataset) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..d.feature_dim())
        .map(|j| format!("f{j}"))
        .chain(d.group_names.iter().map(|n| format!("g:{n}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (x, y) in d.features.rows().into_iter().zip(d.labels.rows()) {
        let cells: Vec<String> = x
            .iter()
            .map(|v| format!("{v:?}"))
            .chain(y.iter().map(|v| v.to_string()))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut n_features = 0;
    let mut group_names = Vec::new();
    for (j, col) in header.iter().enumerate() {
        if let Some(name) = col.strip_prefix("g:") {
            group_names.push(name.to_string());
        } else if group_names.is_empty() && col == format!("f{j}") {
            n_features += 1;
        } else {
            return Err(Error::Ingestion {
                row: 0,
                column: col.to_string(),
                message: format!("expected `f{j}` or a `g:<name>` column after features"),
            });
        }
    }
    if n_features == 0 || group_names.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            column: String::new(),
            message: "header needs at least one feature and one group column".into(),
        });
    }
    let width = n_features + group_names.len();
    let mut feats = Vec::new();
    let mut labs = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Ingestion {
                row,
                column: String::new(),
                message: format!("expected {width} cells, found {}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            if j < n_features {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Ingestion {
                    row,
                    column: header[j].to_string(),
                    message: format!("`{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Ingestion {
                        row,
                        column: header[j].to_string(),
                        message: format!("`{cell}` is not finite"),
                    });
                }
                feats.push(v);
            } else {
                let v = match cell.trim() {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => {
                        return Err(Error::Ingestion {
                            row,
                            column: header[j].to_string(),
                            message: format!("label `{other}` is not 0 or 1"),
                        })
                    }
                };
                labs.push(v);
            }
        }
        n += 1;
    }
    let features = Array2::from_shape_vec((n, n_features), feats)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let labels = Array2::from_shape_vec((n, group_names.len()), labs)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(features, labels, group_names)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Desired remaining counts per side, index 0 = train, 1 = test.
struct SplitState {
    side: Vec<Option<usize>>,
    want_total: [f64; 2],
    want_label: Vec<[f64; 2]>,
    remaining_pos: Vec<usize>,
}

impl SplitState {
    fn pick_side(&self, label: usize) -> usize {
        let [train, test] = self.want_label[label];
        if self.want_total[1] < 1.0 {
            0
        } else if self.want_total[0] < 1.0 {
            1
        } else if train != test {
            usize::from(test > train)
        } else {
            usize::from(self.want_total[1] > self.want_total[0])
        }
    }

    fn assign(&mut self, d: &Dataset, row: usize, s: usize) {
        self.side[row] = Some(s);
        self.want_total[s] -= 1.0;
        for (k, &v) in d.labels.row(row).iter().enumerate() {
            if v == 1 {
                self.want_label[k][s] -= 1.0;
                self.remaining_pos[k] -= 1;
            }
        }
    }
}

/// Multi-label iterative stratification.
///
/// Rows are assigned label by label, rarest label first: every unassigned
/// row carrying the label goes to whichever side still wants the most
/// positives of it. Rows with no positive label fill the remaining slots.
/// The test side receives exactly `round(N · test_fraction)` rows.
pub fn stratified_split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = d.n_samples();
    let g = d.n_groups();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let pos_counts = d.positive_counts();
    for (name, &c) in d.group_names.iter().zip(&pos_counts) {
        if c < 2 {
            log::warn!("group `{name}` has {c} positives; stratification on it is best effort");
        }
    }
    let mut state = SplitState {
        side: vec![None; n],
        want_total: [(n - n_test) as f64, n_test as f64],
        want_label: pos_counts
            .iter()
            .map(|&c| [c as f64 * (1.0 - test_fraction), c as f64 * test_fraction])
            .collect(),
        remaining_pos: pos_counts,
    };

    // rarest label among unassigned rows first
    while let Some(k) = (0..g)
        .filter(|&k| state.remaining_pos[k] > 0)
        .min_by_key(|&k| (state.remaining_pos[k], k))
    {
        for &row in &order {
            if state.side[row].is_none() && d.labels[[row, k]] == 1 {
                let s = state.pick_side(k);
                state.assign(d, row, s);
            }
        }
    }
    for &row in &order {
        if state.side[row].is_none() {
            let s = if state.want_total[1] >= 1.0 { 1 } else { 0 };
            state.assign(d, row, s);
        }
    }
    let side = state.side;
    let mut split = SplitIndices {
        train_indices: Vec::with_capacity(n - n_test),
        test_indices: Vec::with_capacity(n_test),
    };
    for (row, s) in side.into_iter().enumerate() {
        match s.expect("every row assigned") {
            0 => split.train_indices.push(row),
            _ => split.test_indices.push(row),
        }
    }
    Ok(split)
}

/// Balanced class weights for one group, `None` when it has no positives or
/// no negatives.
pub fn class_weight_for(column: ArrayView1<u8>) -> Option<ClassWeight> {
    let n = column.len();
    let pos = column.iter().filter(|&&v| v == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    Some(ClassWeight {
        pos: n as f64 / (2.0 * pos as f64),
        neg: n as f64 / (2.0 * neg as f64),
    })
}

/// `w_pos = N / (2·n_pos)`, `w_neg = N / (2·n_neg)` per group.
pub fn class_weights(d: &Dataset) -> Vec<Option<ClassWeight>> {
    d.labels.columns().into_iter().map(class_weight_for).collect()
}

/// Class weights with degenerate groups rejected, or replaced by unit
/// weights when `allow_degenerate` is set.
pub fn resolved_class_weights(d: &Dataset, allow_degenerate: bool) -> Result<Vec<ClassWeight>> {
    class_weights(d)
        .into_iter()
        .enumerate()
        .map(|(g, w)| match w {
            Some(w) => Ok(w),
            None if allow_degenerate => {
                log::warn!(
                    "group `{}` lacks positives or negatives; using unit weights",
                    d.group_names[g]
                );
                Ok(ClassWeight::UNIT)
            }
            None => Err(Error::DegenerateGroup {
                group: d.group_names[g].clone(),
                reason: "class weights undefined without both positive and negative samples"
                    .into(),
            }),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceReport {
    pub n_samples: usize,
    pub group_names: Vec<String>,
    pub positives_per_group: Vec<usize>,
    /// `targets_per_row[k]` = number of rows with exactly `k` positive groups.
    pub targets_per_row: Vec<usize>,
}

pub fn prevalence_stats(d: &Dataset) -> PrevalenceReport {
    let mut hist = vec![0usize; d.n_groups() + 1];
    for row in d.labels.rows() {
        hist[row.iter().filter(|&&v| v == 1).count()] += 1;
    }
    PrevalenceReport {
        n_samples: d.n_samples(),
        group_names: d.group_names.clone(),
        positives_per_group: d.positive_counts(),
        targets_per_row: hist,
    }
}
