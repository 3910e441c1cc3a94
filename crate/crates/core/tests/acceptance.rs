//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Run with `cargo test --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multigap::cli::CompareFile;
use multigap::data::{self, class_weight_for};
use multigap::losses::{self, ClassWeight, LossConfig, LossKind};
use multigap::metrics::{self, MetricsReport};
use multigap::numerics::{backward, finite_diff_grad, init_params, max_relative_error};
use multigap::theory::{self, Feasibility, GroupCounts, GroupRates};
use multigap::trainer::{self, ComparisonReport, DEFAULT_BA_TOLERANCE};

// Tolerances and budgets, pinned here.
const TABLE2_BUDGET: Duration = Duration::from_secs(1);
const SCAN_BUDGET: Duration = Duration::from_secs(10);
const CONSISTENCY_BUDGET: Duration = Duration::from_secs(1);
const FORMULA_TOL: f64 = 1e-12;
const GRAD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor in the relative error, so near-zero partials compare
/// on an absolute scale.
const GRAD_REL_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const MAX_DIFF_REDUCTION: f64 = 0.30;
const BENCH_MIN_OE_BA: f64 = 0.75;
const BENCH_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_multigap")
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn counts(p: u64, n: u64) -> GroupCounts {
    GroupCounts::new(p, n).unwrap()
}

fn two_group_table_exactness() -> Outcome {
    let start = Instant::now();
    let out = Command::new(bin()).args(["verify", "--table2"]).output().unwrap();
    let elapsed = start.elapsed();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    let rows: Vec<Vec<String>> = stdout
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let mut bad = Vec::new();
    for (i, (row, (cnt, rates))) in rows.iter().zip(theory::TABLE2_REFERENCE.iter()).enumerate() {
        for k in 0..6 {
            if row[2 + k].parse::<u64>().ok() != Some(cnt[k]) {
                bad.push(format!("row {i} count {k}"));
            }
        }
        for k in 0..3 {
            let v: f64 = row[8 + k].parse().unwrap();
            if ((v * 100.0).round() / 100.0 - rates[k]).abs() > 1e-9 {
                bad.push(format!("row {i} rate {k}"));
            }
        }
    }
    let pass = out.status.code() == Some(0)
        && rows.len() == 4
        && bad.is_empty()
        && stderr.contains("PASS")
        && elapsed < TABLE2_BUDGET;
    outcome(
        pass,
        format!(
            "4 rows, 24 count cells and 12 rate cells checked, mismatches {:?}, {:.0} ms",
            bad,
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

/// Half proportional pairs (equal base rates), half independent draws.
fn seeded_count_pairs(n: usize, seed: u64) -> Vec<(GroupCounts, GroupCounts)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                let (p, q) = (rng.random_range(1..=50u64), rng.random_range(1..=50u64));
                let (ka, kb) = (rng.random_range(1..=5u64), rng.random_range(1..=5u64));
                (counts(ka * p, ka * q), counts(kb * p, kb * q))
            } else {
                (
                    counts(rng.random_range(1..=250), rng.random_range(1..=250)),
                    counts(rng.random_range(1..=250), rng.random_range(1..=250)),
                )
            }
        })
        .collect()
}

fn eo_feasibility_dichotomy() -> Outcome {
    let start = Instant::now();
    let res = theory::DEFAULT_GRID_RESOLUTION;
    let eps = theory::DEFAULT_EPSILON;
    let skewed = theory::eo_ap_scan(counts(100, 100), counts(20, 180), res, eps).unwrap();
    let equal = theory::eo_ap_scan(counts(100, 100), counts(50, 50), res, eps).unwrap();
    let mut disagreements = 0;
    let mut n_equal = 0;
    for (a, b) in seeded_count_pairs(50, 11) {
        let scan = theory::eo_ap_scan(a, b, res, eps).unwrap();
        let expected = if theory::equal_base_rates(a, b) {
            n_equal += 1;
            Feasibility::AllFeasible
        } else {
            Feasibility::OnlyRandomLine
        };
        if scan.classification != expected {
            disagreements += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = skewed.classification == Feasibility::OnlyRandomLine
        && equal.classification == Feasibility::AllFeasible
        && disagreements == 0
        && elapsed < SCAN_BUDGET;
    outcome(
        pass,
        format!(
            "(100,100)/(20,180) {:?}, (100,100)/(50,50) {:?}, 50 pairs ({n_equal} equal-rate) with {disagreements} disagreements, {:.2} s",
            skewed.classification,
            equal.classification,
            elapsed.as_secs_f64()
        ),
    )
}

fn error_rate_consistency() -> Outcome {
    let start = Instant::now();
    let pairs = seeded_count_pairs(1000, 23);
    let disagreements = pairs
        .iter()
        .filter(|(a, b)| theory::fpned_ap_consistency(*a, *b) != theory::equal_base_rates(*a, *b))
        .count();
    let n_equal = pairs.iter().filter(|(a, b)| theory::equal_base_rates(*a, *b)).count();
    let elapsed = start.elapsed();
    outcome(
        disagreements == 0 && elapsed < CONSISTENCY_BUDGET,
        format!(
            "1000 pairs ({n_equal} equal-rate), {disagreements} disagreements, {:.1} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn accuracy_formulas() -> Outcome {
    let rates = |p, n, tpr, fpr| GroupRates::new(p, n, tpr, fpr).unwrap();
    let table = [
        (theory::acc_from_rates(&rates(100, 100, 0.80, 0.30)), 0.75),
        (theory::acc_from_rates(&rates(20, 180, 0.80, 0.30)), 0.71),
        (theory::acc_from_rates(&rates(100, 100, 0.77, 0.23)), 0.77),
        (theory::acc_from_rates(&rates(20, 180, 0.75, 41.0 / 180.0)), 0.77),
    ];
    let table_err = table.iter().map(|(g, e)| (g - e).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(u64, u64, u64, u64)> = (0..20)
        .map(|_| {
            (
                rng.random_range(1..=500),
                rng.random_range(1..=500),
                rng.random_range(1..=500),
                rng.random_range(1..=500),
            )
        })
        .collect();
    let mut line_err: f64 = 0.0;
    let mut gap_err: f64 = 0.0;
    for &(pa, na, pb, nb) in &pairs {
        let (pi_a, pi_b) = (pa as f64 / (pa + na) as f64, pb as f64 / (pb + nb) as f64);
        for i in 0..=100 {
            let tpr = i as f64 / 100.0;
            // chance line
            let on_line = theory::acc_from_rates(&rates(pa, na, tpr, 1.0 - tpr));
            line_err = line_err.max((on_line - tpr).abs());
            for j in 0..=100 {
                let fpr = j as f64 / 100.0;
                let gap = theory::acc_from_rates(&rates(pa, na, tpr, fpr))
                    - theory::acc_from_rates(&rates(pb, nb, tpr, fpr));
                gap_err = gap_err.max((gap - (pi_a - pi_b) * (tpr + fpr - 1.0)).abs());
            }
        }
    }
    let pass = table_err < FORMULA_TOL && line_err < FORMULA_TOL && gap_err < FORMULA_TOL;
    outcome(
        pass,
        format!(
            "table values err {table_err:.1e}, Acc=TPR on chance line err {line_err:.1e}, gap factorisation err {gap_err:.1e} over 101x101 grid x 20 pairs"
        ),
    )
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, f: usize, g: usize) -> (Array2<f64>, Array2<f64>) {
    let x = Array2::from_shape_fn((n, f), |_| rng.random_range(-1.0..1.0));
    let mut y = Array2::from_shape_fn((n, g), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    // every group gets both labels so class weights exist
    for k in 0..g {
        y[[0, k]] = 1.0;
        y[[1, k]] = 0.0;
    }
    (x, y)
}

/// Glorot weights plus small random biases. Zero biases would leave rows
/// whose first-layer units are all inactive exactly on the ReLU kink.
fn seeded_network(layer_sizes: &[usize], seed: u64) -> multigap::numerics::ModelParams {
    let mut params = init_params(layer_sizes, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for b in params.layer_biases.iter_mut().flatten() {
        b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    params
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let layer_sizes = [5, 10, 6, 4];
    let configs = [
        (LossKind::Oe, 0.0),
        (LossKind::GapMulti, 0.1),
        (LossKind::GapMulti, 1.0),
        (LossKind::GapMulti, 10.0),
        (LossKind::Cla, 1.0),
        (LossKind::Soo, 1.0),
    ];
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut n_params = 0;
    for (kind, lambda) in configs {
        let mut max_err: f64 = 0.0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let params = seeded_network(&layer_sizes, seed);
            n_params = params.flat_len();
            let (x, y) = random_batch(&mut rng, 32, 5, 4);
            let yu = y.mapv(|v| v as u8);
            let weights: Vec<ClassWeight> = yu
                .columns()
                .into_iter()
                .map(|c| class_weight_for(c).unwrap())
                .collect();
            let cfg = LossConfig::new(kind, lambda, weights);
            let (_, analytic) = backward(&params, x.view(), y.view(), &cfg).unwrap();
            let numeric = finite_diff_grad(&params, x.view(), y.view(), &cfg, GRAD_STEP).unwrap();
            max_err = max_err.max(max_relative_error(&analytic, &numeric, GRAD_REL_FLOOR));
        }
        worst.push((format!("{kind}(λ={lambda})"), max_err));
    }
    let elapsed = start.elapsed();
    let overall = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let pass = overall < GRAD_REL_TOL && n_params <= 200 && elapsed < GRAD_BUDGET;
    let detail = worst
        .iter()
        .map(|(l, e)| format!("{l} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        pass,
        format!("{n_params} params, batch 32, 10 nets each: {detail}; {:.2} s", elapsed.as_secs_f64()),
    )
}

fn reduction_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut oe_mismatch = 0;
    let mut binary_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let g = rng.random_range(1..=9);
        let y = Array2::from_shape_fn((n, g), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let p = Array2::from_shape_fn((n, g), |_| rng.random_range(0.0..=1.0));
        let w: Vec<ClassWeight> = (0..g)
            .map(|_| ClassWeight {
                pos: rng.random_range(0.1..10.0),
                neg: rng.random_range(0.1..10.0),
            })
            .collect();
        let oe = losses::overall_loss(y.view(), p.view(), &w).unwrap();
        let gap0 = losses::gap_multi_loss(y.view(), p.view(), &w, 0.0).unwrap();
        if oe.to_bits() != gap0.to_bits() {
            oe_mismatch += 1;
        }
    }
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let y = Array2::from_shape_fn((n, 2), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let p = Array2::from_shape_fn((n, 2), |_| rng.random_range(0.0..=1.0));
        let w: Vec<ClassWeight> = (0..2)
            .map(|_| ClassWeight {
                pos: rng.random_range(0.1..10.0),
                neg: rng.random_range(0.1..10.0),
            })
            .collect();
        let lambda = rng.random_range(0.0..20.0);
        let multi = losses::gap_multi_loss(y.view(), p.view(), &w, lambda).unwrap();
        let binary = losses::gap_binary_loss(y.view(), p.view(), &w, lambda).unwrap();
        if multi.to_bits() != binary.to_bits() {
            binary_mismatch += 1;
        }
    }
    outcome(
        oe_mismatch == 0 && binary_mismatch == 0,
        format!("λ=0 vs OE: {oe_mismatch}/100 bit mismatches; G=2 vs binary: {binary_mismatch}/100"),
    )
}

struct Benchmark {
    report: ComparisonReport,
    elapsed: Duration,
}

fn run_benchmark() -> Benchmark {
    let path = workspace_root().join("configs/benchmark.json");
    let cfg: CompareFile = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let start = Instant::now();
    let d = match &cfg.data {
        multigap::cli::DataSource::Synthetic(spec) => data::generate(spec).unwrap(),
        other => panic!("benchmark must be synthetic, got {other:?}"),
    };
    let split = data::stratified_split(&d, cfg.split.test_fraction, cfg.split.seed).unwrap();
    let report = trainer::compare_losses(&d, &split, &cfg.configs(), cfg.n_seeds).unwrap();
    Benchmark {
        report,
        elapsed: start.elapsed(),
    }
}

fn fairness_gap(bench: &Benchmark) -> Outcome {
    let r = &bench.report;
    let oe = r.by_label("OE").expect("OE in benchmark");
    let gap = r
        .select_lambda(LossKind::GapMulti, oe, DEFAULT_BA_TOLERANCE)
        .expect("GAP_MULTI in benchmark");
    let reduction = 1.0 - gap.max_diff.mean / oe.max_diff.mean;
    let ba_drop = oe.avg_ba.mean - gap.avg_ba.mean;
    let pass = r.n_seeds == 5
        && oe.avg_ba.mean >= BENCH_MIN_OE_BA
        && gap.max_diff.mean < oe.max_diff.mean
        && reduction >= MAX_DIFF_REDUCTION
        && gap.avg_ba.mean >= oe.avg_ba.mean - DEFAULT_BA_TOLERANCE
        && bench.elapsed < BENCH_BUDGET;
    outcome(
        pass,
        format!(
            "OE avg BA {:.4} max diff {:.4}; {} avg BA {:.4} max diff {:.4}; reduction {:.1}%, BA drop {:.4}; {} runs in {:.0} s",
            oe.avg_ba.mean,
            oe.max_diff.mean,
            gap.label,
            gap.avg_ba.mean,
            gap.max_diff.mean,
            100.0 * reduction,
            ba_drop,
            r.losses.len() * r.n_seeds,
            bench.elapsed.as_secs_f64()
        ),
    )
}

fn cla_direction(bench: &Benchmark) -> Outcome {
    let r = &bench.report;
    let oe = r.by_label("OE").unwrap();
    let gap = r.select_lambda(LossKind::GapMulti, oe, DEFAULT_BA_TOLERANCE).unwrap();
    let cla = r.select_lambda(LossKind::Cla, oe, DEFAULT_BA_TOLERANCE).expect("CLA in benchmark");
    let pass = cla.macro_recall.mean >= oe.macro_recall.mean && gap.macro_f1.mean >= cla.macro_f1.mean;
    outcome(
        pass,
        format!(
            "{} recall {:.4} vs OE {:.4}; {} F1 {:.4} vs {} F1 {:.4}",
            cla.label,
            cla.macro_recall.mean,
            oe.macro_recall.mean,
            gap.label,
            gap.macro_f1.mean,
            cla.label,
            cla.macro_f1.mean
        ),
    )
}

fn hamming_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=1000);
        let g = rng.random_range(1..=10);
        let y = Array2::from_shape_fn((n, g), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        // a share of probabilities sits exactly on the threshold
        let p = Array2::from_shape_fn((n, g), |_| {
            if rng.random_bool(0.05) {
                0.5
            } else {
                rng.random_range(0.0..=1.0)
            }
        });
        let mut wrong = 0usize;
        for i in 0..n {
            for k in 0..g {
                let predicted = if p[[i, k]] >= 0.5 { 1.0 } else { 0.0 };
                if predicted != y[[i, k]] {
                    wrong += 1;
                }
            }
        }
        let brute = wrong as f64 / (n * g) as f64;
        let got = metrics::hamming_loss(y.view(), p.view(), 0.5).unwrap();
        if got.to_bits() != brute.to_bits() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 matrices, {mismatches} mismatches"))
}

fn report_consistent(r: &MetricsReport) -> bool {
    let bas = r.defined_bas();
    let mean = bas.iter().sum::<f64>() / bas.len() as f64;
    r.max_matrix_entry() == r.max_diff && r.avg_ba == mean
}

fn metric_consistency(bench: &Benchmark, extra: &[MetricsReport]) -> Outcome {
    let reports: Vec<&MetricsReport> = bench
        .report
        .losses
        .iter()
        .flat_map(|l| l.runs.iter().map(|r| &r.report))
        .chain(extra.iter())
        .collect();
    let bad = reports.iter().filter(|r| !report_consistent(r)).count();
    outcome(bad == 0, format!("{} reports, {bad} inconsistent", reports.len()))
}

const DETERMINISM_CONFIG: &str = r#"{
  "data": {"synthetic": {"n_samples": 3000, "feature_dim": 12,
    "base_rates": [0.3, 0.1, 0.2], "separability": 2.5, "noise_scale": 1.0, "seed": 3}},
  "split": {"test_fraction": 0.25, "seed": 1},
  "train": {"loss": {"kind": "GAP_MULTI", "lambda": 1.0}, "epochs_max": 6,
    "steps_per_epoch": 40, "batch_size": 64, "seed": 5}
}"#;

fn determinism(extra: &mut Vec<MetricsReport>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, DETERMINISM_CONFIG).unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(bin())
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env("MULTIGAP_THREADS", "2")
            .output()
            .unwrap()
            .status;
        assert!(status.success(), "train exited with {status}");
        outputs.push(std::fs::read(out.join("metrics.json")).unwrap());
    }
    let report: MetricsReport = serde_json::from_slice(&outputs[0]).unwrap();
    extra.push(report);
    outcome(
        outputs[0] == outputs[1],
        format!("metrics.json {} bytes, identical: {}", outputs[0].len(), outputs[0] == outputs[1]),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!("{} [{id:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    record(1, "two-group table exactness", &mut two_group_table_exactness);
    record(2, "equalized-odds feasibility dichotomy", &mut eo_feasibility_dichotomy);
    record(3, "error-rate consistency", &mut error_rate_consistency);
    record(4, "accuracy formulas", &mut accuracy_formulas);
    record(5, "gradient correctness", &mut gradient_correctness);
    record(6, "reduction identities", &mut reduction_identities);

    let bench = catch_unwind(run_benchmark);
    let mut extra = Vec::new();
    match &bench {
        Ok(b) => {
            record(7, "fairness-gap benchmark", &mut || fairness_gap(b));
            record(8, "CLA direction", &mut || cla_direction(b));
        }
        Err(_) => {
            record(7, "fairness-gap benchmark", &mut || outcome(false, "benchmark run panicked"));
            record(8, "CLA direction", &mut || outcome(false, "benchmark run panicked"));
        }
    }
    record(9, "Hamming oracle", &mut hamming_oracle);
    record(11, "determinism", &mut || determinism(&mut extra));
    match &bench {
        Ok(b) => record(10, "metric internal consistency", &mut || metric_consistency(b, &extra)),
        Err(_) => record(10, "metric internal consistency", &mut || outcome(false, "no benchmark reports")),
    }

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.pass).map(|(id, _, _)| *id).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
