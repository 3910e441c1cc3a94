//! Equalized odds vs accuracy parity for two groups.
//!
//! Under shared rates `(tpr, fpr)` a group's accuracy is
//! `π·tpr + (1 − π)·(1 − fpr)` with `π = P / (P + N)`, so the accuracy gap
//! between two groups factors as `(π_A − π_B)·(tpr + fpr − 1)`. It vanishes
//! everywhere when base rates match, and otherwise only on the chance line
//! `tpr + fpr = 1`. The grid scan here checks that numerically and
//! [`fpned_ap_consistency`] gives the exact integer criterion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID_RESOLUTION: usize = 1001;
pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub positives: u64,
    pub negatives: u64,
    pub tpr: f64,
    pub fpr: f64,
}

impl GroupRates {
    pub fn new(positives: u64, negatives: u64, tpr: f64, fpr: f64) -> Result<Self> {
        if positives == 0 || negatives == 0 {
            return Err(Error::InvalidConfig(format!(
                "group counts must be positive, got P={positives} N={negatives}"
            )));
        }
        if positives > MAX_COUNT || negatives > MAX_COUNT {
            return Err(Error::InvalidConfig(format!(
                "group counts must not exceed {MAX_COUNT}"
            )));
        }
        if !(0.0..=1.0).contains(&tpr) || !(0.0..=1.0).contains(&fpr) {
            return Err(Error::InvalidConfig(format!(
                "rates must lie in [0, 1], got tpr={tpr} fpr={fpr}"
            )));
        }
        Ok(Self {
            positives,
            negatives,
            tpr,
            fpr,
        })
    }

    /// `P / N`.
    pub fn base_rate(&self) -> f64 {
        self.positives as f64 / self.negatives as f64
    }
}

/// Upper bound on a single count, so exact cross-products fit in `u128`.
pub const MAX_COUNT: u64 = 1 << 62;

/// Positive and negative counts of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub positives: u64,
    pub negatives: u64,
}

impl GroupCounts {
    pub fn new(positives: u64, negatives: u64) -> Result<Self> {
        if positives == 0 || negatives == 0 {
            return Err(Error::InvalidConfig(format!(
                "group counts must be positive, got P={positives} N={negatives}"
            )));
        }
        if positives > MAX_COUNT || negatives > MAX_COUNT {
            return Err(Error::InvalidConfig(format!(
                "group counts must not exceed {MAX_COUNT}"
            )));
        }
        Ok(Self {
            positives,
            negatives,
        })
    }
}

/// `(tpr·P + N·(1 − fpr)) / (P + N)`.
pub fn acc_from_rates(r: &GroupRates) -> f64 {
    let p = r.positives as f64;
    let n = r.negatives as f64;
    (r.tpr * p + n * (1.0 - r.fpr)) / (p + n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Feasibility {
    AllFeasible,
    OnlyRandomLine,
    Empty,
    /// Some but not all points feasible, not confined to the chance line.
    /// Only reachable when `epsilon` is too coarse for the base-rate gap.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityScan {
    pub grid_resolution: usize,
    pub epsilon: f64,
    pub excluded_random_line: bool,
    /// Grid points where `|Acc_A − Acc_B| <= epsilon`, as `(tpr, fpr)`.
    pub feasible_points: Vec<(f64, f64)>,
    pub points_scanned: usize,
    pub classification: Feasibility,
}

impl FeasibilityScan {
    pub fn grid_spacing(&self) -> f64 {
        1.0 / (self.grid_resolution - 1) as f64
    }
}

fn grid_value(i: usize, resolution: usize) -> f64 {
    i as f64 / (resolution - 1) as f64
}

/// Scans a `(tpr, fpr)` grid with both groups sharing the rates (equalized
/// odds by construction) and collects the points where accuracy parity also
/// holds within `epsilon`.
pub fn eo_ap_scan(
    a: GroupCounts,
    b: GroupCounts,
    grid_resolution: usize,
    epsilon: f64,
) -> Result<FeasibilityScan> {
    eo_ap_scan_with(a, b, grid_resolution, epsilon, false)
}

/// As [`eo_ap_scan`], optionally skipping grid points on `tpr + fpr = 1`.
pub fn eo_ap_scan_with(
    a: GroupCounts,
    b: GroupCounts,
    grid_resolution: usize,
    epsilon: f64,
    exclude_random_line: bool,
) -> Result<FeasibilityScan> {
    GroupCounts::new(a.positives, a.negatives)?;
    GroupCounts::new(b.positives, b.negatives)?;
    if grid_resolution < 11 {
        return Err(Error::InvalidConfig(format!(
            "grid resolution must be at least 11, got {grid_resolution}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let last = grid_resolution - 1;
    // row i is tpr = i/last; columns are fpr. Rows are merged in order.
    let rows: Vec<(usize, Vec<(f64, f64)>)> = (0..grid_resolution)
        .into_par_iter()
        .map(|i| {
            let tpr = grid_value(i, grid_resolution);
            let mut scanned = 0;
            let mut hits = Vec::new();
            for j in 0..grid_resolution {
                if exclude_random_line && i + j == last {
                    continue;
                }
                scanned += 1;
                let fpr = grid_value(j, grid_resolution);
                let acc_a = acc_from_rates(&GroupRates {
                    positives: a.positives,
                    negatives: a.negatives,
                    tpr,
                    fpr,
                });
                let acc_b = acc_from_rates(&GroupRates {
                    positives: b.positives,
                    negatives: b.negatives,
                    tpr,
                    fpr,
                });
                if (acc_a - acc_b).abs() <= epsilon {
                    hits.push((tpr, fpr));
                }
            }
            (scanned, hits)
        })
        .collect();
    let points_scanned = rows.iter().map(|(n, _)| n).sum();
    let feasible_points: Vec<(f64, f64)> = rows.into_iter().flat_map(|(_, h)| h).collect();

    let spacing = grid_value(1, grid_resolution);
    let on_line = |&(t, f): &(f64, f64)| ((t + f - 1.0).abs() / std::f64::consts::SQRT_2) <= spacing;
    let classification = if feasible_points.is_empty() {
        Feasibility::Empty
    } else if feasible_points.len() == points_scanned {
        Feasibility::AllFeasible
    } else if feasible_points.iter().all(on_line) {
        Feasibility::OnlyRandomLine
    } else {
        log::warn!("feasible set is neither complete nor confined to the chance line");
        Feasibility::Mixed
    };

    Ok(FeasibilityScan {
        grid_resolution,
        epsilon,
        excluded_random_line: exclude_random_line,
        feasible_points,
        points_scanned,
        classification,
    })
}

/// Exact base-rate equality `P_A / N_A == P_B / N_B` by cross-multiplication.
pub fn equal_base_rates(a: GroupCounts, b: GroupCounts) -> bool {
    (a.positives as u128) * (b.negatives as u128) == (b.positives as u128) * (a.negatives as u128)
}

/// `(Σ_g |pooled_fpr − fpr_g|, Σ_g |pooled_fnr − fnr_g|)`.
pub fn fpned(
    group_fprs: &[f64],
    group_fnrs: &[f64],
    pooled_fpr: f64,
    pooled_fnr: f64,
) -> Result<(f64, f64)> {
    if group_fprs.len() != group_fnrs.len() {
        return Err(Error::Shape(format!(
            "{} FPRs vs {} FNRs",
            group_fprs.len(),
            group_fnrs.len()
        )));
    }
    if group_fprs.is_empty() {
        return Err(Error::EmptyInput("FPNED over zero groups".into()));
    }
    let fped = group_fprs.iter().map(|f| (pooled_fpr - f).abs()).sum();
    let fned = group_fnrs.iter().map(|f| (pooled_fnr - f).abs()).sum();
    Ok((fped, fned))
}

/// Whether groups with equal error rates (zero FPNED) can also have equal
/// accuracy at every operating point: true iff base rates are equal.
///
/// Accuracy is affine in the shared `(tpr, fpr)`, so it agrees everywhere iff
/// it agrees at three affinely independent operating points. Those are
/// chosen at `{0, 1}` corners where accuracy is an exact integer fraction.
pub fn fpned_ap_consistency(a: GroupCounts, b: GroupCounts) -> bool {
    // (tpr, fpr) corners: (1, 0), (0, 0), (1, 1)
    let corners = [(1u128, 0u128), (0, 0), (1, 1)];
    corners.iter().all(|&(tpr, fpr)| {
        let correct = |c: GroupCounts| {
            let (p, n) = (c.positives as u128, c.negatives as u128);
            (tpr * p + (1 - fpr) * n, p + n)
        };
        let (na, da) = correct(a);
        let (nb, db) = correct(b);
        na * db == nb * da
    })
}

/// One row of the two-group illustration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub case: u8,
    pub group: &'static str,
    pub targeted: u64,
    pub not_targeted: u64,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
    pub acc: f64,
    pub tpr: f64,
    pub fpr: f64,
}

impl ScenarioRow {
    fn from_counts(case: u8, group: &'static str, tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        let pos = tp + fn_;
        let neg = fp + tn;
        Self {
            case,
            group,
            targeted: pos,
            not_targeted: neg,
            tp,
            fn_,
            fp,
            tn,
            acc: (tp + tn) as f64 / (pos + neg) as f64,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        }
    }
}

/// Case I applies TPR 0.80 / FPR 0.30 to both groups (equalized odds);
/// Case II uses the reference accuracy-parity confusion counts.
pub fn table2_scenario() -> Vec<ScenarioRow> {
    let eo = |group, pos: u64, neg: u64| {
        let tp = (0.80 * pos as f64).round() as u64;
        let fp = (0.30 * neg as f64).round() as u64;
        ScenarioRow::from_counts(1, group, tp, pos - tp, fp, neg - fp)
    };
    vec![
        eo("Group-A", 100, 100),
        eo("Group-B", 20, 180),
        ScenarioRow::from_counts(2, "Group-A", 77, 23, 23, 77),
        ScenarioRow::from_counts(2, "Group-B", 15, 5, 41, 139),
    ]
}

/// Published cells: targeted, not targeted, TP, FN, FP, TN, then Acc, TPR, FPR
/// at two decimals.
pub const TABLE2_REFERENCE: [([u64; 6], [f64; 3]); 4] = [
    ([100, 100, 80, 20, 30, 70], [0.75, 0.80, 0.30]),
    ([20, 180, 16, 4, 54, 126], [0.71, 0.80, 0.30]),
    ([100, 100, 77, 23, 23, 77], [0.77, 0.77, 0.23]),
    ([20, 180, 15, 5, 41, 139], [0.77, 0.75, 0.23]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMismatch {
    pub row: usize,
    pub column: &'static str,
    pub expected: f64,
    pub got: f64,
}

/// Compares the reconstruction to the reference table: counts exactly,
/// rates after rounding to two decimals.
pub fn table2_mismatches(rows: &[ScenarioRow]) -> Vec<CellMismatch> {
    const COUNT_COLS: [&str; 6] = ["targeted", "not_targeted", "tp", "fn", "fp", "tn"];
    const RATE_COLS: [&str; 3] = ["acc", "tpr", "fpr"];
    let round2 = |x: f64| (x * 100.0).round() / 100.0;
    let mut out = Vec::new();
    for (i, (row, (counts, rates))) in rows.iter().zip(TABLE2_REFERENCE.iter()).enumerate() {
        let got_counts = [row.targeted, row.not_targeted, row.tp, row.fn_, row.fp, row.tn];
        for k in 0..6 {
            if got_counts[k] != counts[k] {
                out.push(CellMismatch {
                    row: i,
                    column: COUNT_COLS[k],
                    expected: counts[k] as f64,
                    got: got_counts[k] as f64,
                });
            }
        }
        let got_rates = [row.acc, row.tpr, row.fpr];
        for k in 0..3 {
            if (round2(got_rates[k]) - rates[k]).abs() > 1e-9 {
                out.push(CellMismatch {
                    row: i,
                    column: RATE_COLS[k],
                    expected: rates[k],
                    got: got_rates[k],
                });
            }
        }
    }
    if rows.len() != TABLE2_REFERENCE.len() {
        out.push(CellMismatch {
            row: rows.len(),
            column: "rows",
            expected: TABLE2_REFERENCE.len() as f64,
            got: rows.len() as f64,
        });
    }
    out
}

pub fn table2_csv(rows: &[ScenarioRow]) -> String {
    let mut out = String::from("case,group,targeted,not_targeted,tp,fn,fp,tn,acc,tpr,fpr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.case, r.group, r.targeted, r.not_targeted, r.tp, r.fn_, r.fp, r.tn, r.acc, r.tpr, r.fpr
        ));
    }
    out
}
