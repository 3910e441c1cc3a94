//! Thresholded group metrics: confusion counts, balanced accuracy, Max Diff,
//! Hamming loss, macro precision/recall/F1 and the pairwise BA heatmap.
//!
//! A prediction is positive when its probability is `>= threshold`.
//! Values are stored in `[0, 1]`; reports scale them by 100 only for display.

use std::fmt::Write as _;

use indexmap::IndexMap;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl GroupConfusion {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.positives())
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.negatives())
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.positives())
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.positives() + self.negatives())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Why a group's balanced accuracy is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedBa {
    NoPositives,
    NoNegatives,
    Empty,
}

impl std::fmt::Display for UndefinedBa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UndefinedBa::NoPositives => "no positive samples",
            UndefinedBa::NoNegatives => "no negative samples",
            UndefinedBa::Empty => "no samples",
        })
    }
}

pub fn confusion(y_true: &[f64], y_pred_prob: &[f64], threshold: f64) -> Result<GroupConfusion> {
    if y_true.len() != y_pred_prob.len() {
        return Err(Error::Shape(format!(
            "{} targets vs {} predictions",
            y_true.len(),
            y_pred_prob.len()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut c = GroupConfusion::default();
    for (&y, &p) in y_true.iter().zip(y_pred_prob) {
        let predicted = p >= threshold;
        match (y == 1.0, predicted) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(TPR + TNR) / 2`.
pub fn balanced_accuracy(c: &GroupConfusion) -> std::result::Result<f64, UndefinedBa> {
    match (c.positives(), c.negatives()) {
        (0, 0) => Err(UndefinedBa::Empty),
        (0, _) => Err(UndefinedBa::NoPositives),
        (_, 0) => Err(UndefinedBa::NoNegatives),
        (p, n) => Ok((c.tp as f64 / p as f64 + c.tn as f64 / n as f64) / 2.0),
    }
}

pub fn avg_ba(bas: &[f64]) -> Result<f64> {
    if bas.is_empty() {
        return Err(Error::EmptyInput("average of zero balanced accuracies".into()));
    }
    Ok(bas.iter().sum::<f64>() / bas.len() as f64)
}

pub fn max_diff(bas: &[f64]) -> Result<f64> {
    if bas.is_empty() {
        return Err(Error::EmptyInput("max diff of zero balanced accuracies".into()));
    }
    let max = bas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = bas.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Fraction of mispredicted cells.
pub fn hamming_loss(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    threshold: f64,
) -> Result<f64> {
    if y_true.dim() != y_pred.dim() {
        return Err(Error::Shape(format!(
            "targets {:?} vs predictions {:?}",
            y_true.dim(),
            y_pred.dim()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("hamming loss of an empty matrix".into()));
    }
    let wrong = y_true
        .iter()
        .zip(y_pred.iter())
        .filter(|(&y, &p)| (y == 1.0) != (p >= threshold))
        .count();
    Ok(wrong as f64 / y_true.len() as f64)
}

/// Macro precision, recall and F1; zero-denominator cells count as 0.
pub fn macro_prf(confusions: &[GroupConfusion]) -> Result<(f64, f64, f64)> {
    if confusions.is_empty() {
        return Err(Error::EmptyInput("macro P/R/F1 over zero groups".into()));
    }
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in confusions {
        let p = ratio(c.tp, c.tp + c.fp).unwrap_or(0.0);
        let r = ratio(c.tp, c.tp + c.fn_).unwrap_or(0.0);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let n = confusions.len() as f64;
    Ok((p_sum / n, r_sum / n, f_sum / n))
}

/// `|ba_i − ba_j|` for every pair; symmetric with a zero diagonal.
pub fn ba_diff_matrix(bas: &[f64]) -> Vec<Vec<f64>> {
    bas.iter()
        .map(|a| bas.iter().map(|b| (a - b).abs()).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndefinedGroup {
    pub group: String,
    pub reason: UndefinedBa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    /// `null` for groups whose BA is undefined.
    pub per_group_ba: IndexMap<String, Option<f64>>,
    pub avg_ba: f64,
    pub max_diff: f64,
    pub hamming: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Row-major, over all groups; entries touching an undefined group are `null`.
    pub ba_diff_matrix: Vec<Vec<Option<f64>>>,
    pub confusion: IndexMap<String, GroupConfusion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined_groups: Vec<UndefinedGroup>,
}

impl MetricsReport {
    /// Builds the full report from `N × G` targets and probabilities.
    pub fn compute(
        group_names: &[String],
        y_true: ArrayView2<f64>,
        y_prob: ArrayView2<f64>,
        threshold: f64,
    ) -> Result<Self> {
        if y_true.ncols() != group_names.len() {
            return Err(Error::Shape(format!(
                "{} group names for {} columns",
                group_names.len(),
                y_true.ncols()
            )));
        }
        let hamming = hamming_loss(y_true, y_prob, threshold)?;
        let confusions = (0..group_names.len())
            .map(|g| {
                let yt: Vec<f64> = y_true.column(g).to_vec();
                let yp: Vec<f64> = y_prob.column(g).to_vec();
                confusion(&yt, &yp, threshold)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_confusions(group_names, &confusions, threshold, hamming)
    }

    pub fn from_confusions(
        group_names: &[String],
        confusions: &[GroupConfusion],
        threshold: f64,
        hamming: f64,
    ) -> Result<Self> {
        let mut per_group = Vec::with_capacity(confusions.len());
        let mut undefined = Vec::new();
        for (name, c) in group_names.iter().zip(confusions) {
            match balanced_accuracy(c) {
                Ok(ba) => per_group.push(Some(ba)),
                Err(reason) => {
                    log::warn!("balanced accuracy undefined for group `{name}`: {reason}");
                    undefined.push(UndefinedGroup {
                        group: name.clone(),
                        reason,
                    });
                    per_group.push(None);
                }
            }
        }
        let defined: Vec<f64> = per_group.iter().flatten().copied().collect();
        let avg = avg_ba(&defined)?;
        let spread = max_diff(&defined)?;
        let (p, r, f) = macro_prf(confusions)?;
        let matrix = per_group
            .iter()
            .map(|a| {
                per_group
                    .iter()
                    .map(|b| match (a, b) {
                        (Some(a), Some(b)) => Some((a - b).abs()),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            threshold,
            per_group_ba: group_names.iter().cloned().zip(per_group).collect(),
            avg_ba: avg,
            max_diff: spread,
            hamming,
            macro_precision: p,
            macro_recall: r,
            macro_f1: f,
            ba_diff_matrix: matrix,
            confusion: group_names.iter().cloned().zip(confusions.iter().copied()).collect(),
            undefined_groups: undefined,
        })
    }

    pub fn group_names(&self) -> Vec<String> {
        self.per_group_ba.keys().cloned().collect()
    }

    /// Balanced accuracies of the groups where it is defined, in group order.
    pub fn defined_bas(&self) -> Vec<f64> {
        self.per_group_ba.values().flatten().copied().collect()
    }

    pub fn confusions(&self) -> Vec<GroupConfusion> {
        self.confusion.values().copied().collect()
    }

    /// Largest entry of the BA difference matrix.
    pub fn max_matrix_entry(&self) -> f64 {
        self.ba_diff_matrix
            .iter()
            .flatten()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    /// The pairwise heatmap as CSV, groups as header row and first column.
    pub fn heatmap_csv(&self) -> String {
        matrix_csv(&self.group_names(), &self.ba_diff_matrix)
    }

    /// Human-readable summary with BA values scaled to percentages.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        for (name, ba) in &self.per_group_ba {
            match ba {
                Some(v) => writeln!(out, "{name:>20}  BA {:6.2}", v * 100.0),
                None => writeln!(out, "{name:>20}  BA    n/a"),
            }
            .expect("writing to a String");
        }
        writeln!(
            out,
            "Avg BA {:.2}  Max Diff {:.2}  HL {:.2}  P/R/F1 {:.4}/{:.4}/{:.4}",
            self.avg_ba * 100.0,
            self.max_diff * 100.0,
            self.hamming * 100.0,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1
        )
        .expect("writing to a String");
        out
    }
}

/// Square group matrix as CSV; undefined cells are left empty.
pub fn matrix_csv(names: &[String], matrix: &[Vec<Option<f64>>]) -> String {
    let mut out = String::from("group");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (name, row) in names.iter().zip(matrix) {
        out.push_str(name);
        for v in row {
            out.push(',');
            if let Some(v) = v {
                write!(out, "{v}").expect("writing to a String");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(tp: u64, fn_: u64, fp: u64, tn: u64) -> GroupConfusion {
        GroupConfusion { tp, fn_, fp, tn }
    }

    #[test]
    fn confusion_perfect() {
        let got = confusion(&[1.0, 0.0, 1.0], &[0.9, 0.1, 0.6], 0.5).unwrap();
        assert_eq!(got, c(2, 0, 0, 1));
    }

    #[test]
    fn confusion_table_case_one_group_a() {
        // 100 positives with 80 above threshold, 100 negatives with 30 above
        let mut y = vec![1.0; 100];
        y.extend(vec![0.0; 100]);
        let mut p: Vec<f64> = (0..100).map(|i| if i < 80 { 0.9 } else { 0.1 }).collect();
        p.extend((0..100).map(|i| if i < 30 { 0.9 } else { 0.1 }));
        let got = confusion(&y, &p, 0.5).unwrap();
        assert_eq!(got, c(80, 20, 30, 70));
    }

    #[test]
    fn threshold_ties_predict_positive() {
        let got = confusion(&[1.0, 0.0], &[0.5, 0.5], 0.5).unwrap();
        assert_eq!(got, c(1, 0, 1, 0));
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(confusion(&[1.0], &[], 0.5), Err(Error::Shape(_))));
        assert!(confusion(&[1.0], &[0.3], 1.0).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert!((balanced_accuracy(&c(80, 20, 30, 70)).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(balanced_accuracy(&c(5, 0, 0, 9)).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&c(4, 4, 7, 7)).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&c(0, 0, 3, 4)), Err(UndefinedBa::NoPositives));
        assert_eq!(balanced_accuracy(&c(1, 2, 0, 0)), Err(UndefinedBa::NoNegatives));
        assert_eq!(balanced_accuracy(&c(0, 0, 0, 0)), Err(UndefinedBa::Empty));
    }

    #[test]
    fn avg_ba_and_max_diff_on_reference_rows() {
        let gap = [83.18, 83.86, 83.47, 83.42, 78.95, 78.32, 82.58];
        assert!((avg_ba(&gap).unwrap() - 81.97).abs() < 0.005);
        assert!((max_diff(&gap).unwrap() - 5.54).abs() < 1e-9);
        let oe = [80.31, 86.91, 81.07, 84.87, 64.99, 67.91, 75.01];
        assert!((max_diff(&oe).unwrap() - 21.92).abs() < 1e-9);
        assert_eq!(avg_ba(&[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(avg_ba(&[0.3, 0.3, 0.3]).unwrap(), 0.3);
        assert_eq!(max_diff(&[0.4, 0.4]).unwrap(), 0.0);
        assert!(avg_ba(&[]).is_err());
        assert!(max_diff(&[]).is_err());
    }

    #[test]
    fn hamming_examples() {
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let perfect = array![[0.9, 0.1], [0.2, 0.8]];
        let one_wrong = array![[0.9, 0.6], [0.2, 0.8]];
        let all_wrong = array![[0.1, 0.9], [0.8, 0.2]];
        assert_eq!(hamming_loss(y.view(), perfect.view(), 0.5).unwrap(), 0.0);
        assert_eq!(hamming_loss(y.view(), one_wrong.view(), 0.5).unwrap(), 0.25);
        assert_eq!(hamming_loss(y.view(), all_wrong.view(), 0.5).unwrap(), 1.0);
        let empty = ndarray::Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            hamming_loss(empty.view(), empty.view(), 0.5),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn macro_prf_examples() {
        let perfect = c(3, 0, 0, 5);
        assert_eq!(macro_prf(&[perfect, perfect]).unwrap(), (1.0, 1.0, 1.0));
        let (p, r, f) = macro_prf(&[c(2, 1, 1, 0), perfect]).unwrap();
        for v in [p, r, f] {
            assert!((v - 5.0 / 6.0).abs() < 1e-12);
        }
        let (p, _, f) = macro_prf(&[c(0, 3, 0, 5)]).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn diff_matrix_examples() {
        let m = ba_diff_matrix(&[0.7, 0.8]);
        assert_eq!(m[0][0], 0.0);
        assert!((m[0][1] - 0.1).abs() < 1e-12);
        assert_eq!(m[0][1], m[1][0]);
        assert!(ba_diff_matrix(&[0.5, 0.5, 0.5]).iter().flatten().all(|&v| v == 0.0));

        let oe = [80.31, 86.91, 81.07, 84.87, 64.99, 67.91, 75.01];
        let m = ba_diff_matrix(&oe);
        let (mut best, mut at) = (0.0, (0, 0));
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    at = (i, j);
                }
            }
        }
        // Black (1) vs Native American (4)
        assert_eq!(at, (1, 4));
        assert!((best - 21.92).abs() < 1e-9);
    }

    #[test]
    fn report_flags_degenerate_group() {
        let names = vec!["a".to_string(), "b".to_string()];
        let y = array![[1.0, 0.0], [0.0, 0.0]];
        let p = array![[0.9, 0.2], [0.1, 0.7]];
        let r = MetricsReport::compute(&names, y.view(), p.view(), 0.5).unwrap();
        assert_eq!(r.per_group_ba["b"], None);
        assert_eq!(r.undefined_groups[0].reason, UndefinedBa::NoPositives);
        assert_eq!(r.avg_ba, 1.0);
        assert_eq!(r.ba_diff_matrix[0][1], None);
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn heatmap_csv_layout() {
        let names = vec!["x".to_string(), "y".to_string()];
        let conf = [c(1, 0, 0, 1), c(1, 1, 0, 2)];
        let r = MetricsReport::from_confusions(&names, &conf, 0.5, 0.0).unwrap();
        let csv = r.heatmap_csv();
        assert_eq!(csv, "group,x,y\nx,0,0.25\ny,0.25,0\n");
    }
}
