//! Command-line front end. Every number it writes comes from a library call;
//! this module only parses arguments, loads configs and writes files.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, DataFormat, Dataset, SplitIndices, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::numerics::ModelParams;
use crate::theory::{self, Feasibility, GroupCounts};
use crate::trainer::{self, LossSpec, TrainConfig};

/// Environment variable read for the default worker count.
pub const THREADS_ENV: &str = "MULTIGAP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "multigap", version, about = "Group-fair multi-label losses, metrics and impossibility checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON spec
    GenData(GenDataArgs),
    /// Train one network and report test metrics
    Train(RunArgs),
    /// Evaluate a saved network on a dataset
    Eval(EvalArgs),
    /// Compare several losses over seeds on a fixed split
    Compare(RunArgs),
    /// Sweep the fairness weight of one loss
    Sweep(RunArgs),
    /// Check the accuracy-parity impossibility results
    Verify(VerifyArgs),
    /// Prevalence statistics of a dataset
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory, created if absent
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// Worker threads for concurrent runs (defaults to $MULTIGAP_THREADS, then all cores)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Model JSON written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// 1: equalized odds vs accuracy parity; 2: error-rate disparity vs accuracy parity
    #[arg(long, required_unless_present = "table2", value_parser = clap::value_parser!(u8).range(1..=2))]
    theorem: Option<u8>,
    /// Counts as P_A,N_A,P_B,N_B
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    counts: Vec<i64>,
    #[arg(long, default_value_t = theory::DEFAULT_GRID_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = theory::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Reconstruct the two-group illustration table and check every cell
    #[arg(long, conflicts_with = "theorem")]
    table2: bool,
    /// Also write the report (and a manifest) to this directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// Where an experiment's data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: default_test_fraction(),
            seed: 0,
        }
    }
}

/// `train` config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    pub train: TrainConfig,
}

/// `compare` config file: each loss is trained with the shared settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareFile {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub base: TrainConfig,
    pub losses: Vec<LossSpec>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
}

/// `sweep` config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub base: TrainConfig,
    pub lambdas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
}

fn default_seeds() -> usize {
    5
}

impl CompareFile {
    pub fn configs(&self) -> Vec<TrainConfig> {
        self.losses
            .iter()
            .map(|l| TrainConfig {
                loss: l.clone(),
                ..self.base.clone()
            })
            .collect()
    }
}

/// Written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub outputs: Vec<String>,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 invalid input, 2 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Ctx {
        args: args.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        started: now_unix(),
    };
    match dispatch(cli.command, &ctx) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

struct Ctx {
    args: Vec<String>,
    started: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn dispatch(cmd: Command, ctx: &Ctx) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a, ctx),
        Command::Train(a) => train(a, ctx),
        Command::Eval(a) => eval(a, ctx),
        Command::Compare(a) => compare(a, ctx),
        Command::Sweep(a) => sweep(a, ctx),
        Command::Verify(a) => verify(a, ctx),
        Command::Stats(a) => stats(a, ctx),
    }
}

/// Collects outputs in memory and writes them atomically, refusing to
/// clobber existing files unless forced.
struct Outputs {
    dir: PathBuf,
    force: bool,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path, force: bool) -> Self {
        Self {
            dir: dir.to_path_buf(),
            force,
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.add(name, s);
        Ok(())
    }

    fn commit(mut self, ctx: &Ctx, config: Option<(&Path, &[u8])>, seed: Option<u64>, threads: usize) -> Result<()> {
        let mut manifest = Manifest {
            command: ctx.args.get(1).cloned().unwrap_or_default(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: ctx.args.clone(),
            config_path: config.map(|(p, _)| p.to_path_buf()),
            config_sha256: config.map(|(_, bytes)| hex::encode(Sha256::digest(bytes))),
            seed,
            threads,
            outputs: self.files.iter().map(|(n, _)| n.clone()).collect(),
            started_at_unix: ctx.started,
            finished_at_unix: 0,
        };
        manifest.finished_at_unix = now_unix();
        self.add_json("manifest.json", &manifest)?;

        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        if !self.force {
            if let Some((name, _)) = self.files.iter().find(|(n, _)| self.dir.join(n).exists()) {
                return Err(Error::InvalidConfig(format!(
                    "{} exists; pass --force to overwrite",
                    self.dir.join(name).display()
                )));
            }
        }
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
            tmp.write_all(bytes).map_err(|e| Error::io(&path, e))?;
            tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        }
        Ok(())
    }
}

fn read_config(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_config<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<T> {
    serde_json::from_slice(bytes)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Relative CSV paths are taken relative to the config file.
fn load_source(src: &DataSource, config_path: &Path) -> Result<Dataset> {
    match src {
        DataSource::Csv { path } => {
            let full = if path.is_absolute() {
                path.clone()
            } else {
                config_path.parent().unwrap_or(Path::new(".")).join(path)
            };
            data::load_dataset(&full, DataFormat::Csv)
        }
        DataSource::Synthetic(spec) => data::generate(spec),
    }
}

fn split_for(d: &Dataset, cfg: &SplitConfig) -> Result<SplitIndices> {
    data::stratified_split(d, cfg.test_fraction, cfg.seed)
}

/// Worker count: flag, then environment, then rayon's default.
fn resolve_threads(jobs: Option<usize>) -> Result<usize> {
    let n = match jobs {
        Some(j) => j,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV}={v} is not a count")))?,
            Err(_) => rayon::current_num_threads(),
        },
    };
    if n == 0 {
        return Err(Error::InvalidConfig("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// File-name stem for one loss, e.g. `GAP_MULTI_lambda0.1`.
fn file_label(spec: &LossSpec) -> String {
    match spec.kind {
        crate::losses::LossKind::Oe => "OE".to_string(),
        k => format!("{k}_lambda{}", spec.lambda),
    }
}

fn gen_data(a: GenDataArgs, ctx: &Ctx) -> Result<i32> {
    let bytes = read_config(&a.config)?;
    let spec: SyntheticSpec = parse_config(&bytes, &a.config)?;
    let d = data::generate(&spec)?;
    let mut out = Outputs::new(&a.out.out, a.out.force);
    out.add("dataset.csv", data::to_csv(&d));
    out.add_json("prevalence.json", &data::prevalence_stats(&d))?;
    out.commit(ctx, Some((&a.config, &bytes)), Some(spec.seed), 1)?;
    println!("wrote {} rows to {}", d.n_samples(), a.out.out.join("dataset.csv").display());
    Ok(0)
}

fn train(a: RunArgs, ctx: &Ctx) -> Result<i32> {
    let bytes = read_config(&a.config)?;
    let cfg: TrainFile = parse_config(&bytes, &a.config)?;
    cfg.train.validate()?;
    let threads = resolve_threads(a.jobs)?;
    let d = load_source(&cfg.data, &a.config)?;
    let split = split_for(&d, &cfg.split)?;
    let train_set = d.subset(&split.train_indices);
    let test_set = d.subset(&split.test_indices);
    let (params, trace, report) = with_pool(threads, || {
        let (params, trace) = trainer::train_with_eval(&train_set, Some(&test_set), &cfg.train)?;
        let report = trainer::evaluate(&params, &test_set, cfg.train.threshold)?;
        Ok((params, trace, report))
    })?;
    let mut out = Outputs::new(&a.out.out, a.out.force);
    out.add_json("metrics.json", &report)?;
    out.add("heatmap.csv", report.heatmap_csv());
    out.add_json("trace.json", &trace)?;
    out.add_json("model.json", &params)?;
    out.add_json("split.json", &split)?;
    out.commit(ctx, Some((&a.config, &bytes)), Some(cfg.train.seed), threads)?;
    print!("{}", report.summary_table());
    println!("epochs run: {} (best at {})", trace.epochs_run, trace.converged_epoch);
    Ok(0)
}

fn eval(a: EvalArgs, ctx: &Ctx) -> Result<i32> {
    let bytes = read_config(&a.model)?;
    let params: ModelParams = parse_config(&bytes, &a.model)?;
    params.validate()?;
    let d = data::load_dataset(&a.data, DataFormat::Csv)?;
    let report: MetricsReport = trainer::evaluate(&params, &d, a.threshold)?;
    let mut out = Outputs::new(&a.out.out, a.out.force);
    out.add_json("metrics.json", &report)?;
    out.add("heatmap.csv", report.heatmap_csv());
    out.commit(ctx, Some((&a.model, &bytes)), None, 1)?;
    print!("{}", report.summary_table());
    Ok(0)
}

fn compare(a: RunArgs, ctx: &Ctx) -> Result<i32> {
    let bytes = read_config(&a.config)?;
    let cfg: CompareFile = parse_config(&bytes, &a.config)?;
    let configs = cfg.configs();
    for c in &configs {
        c.validate()?;
    }
    let threads = resolve_threads(a.jobs)?;
    let d = load_source(&cfg.data, &a.config)?;
    let split = split_for(&d, &cfg.split)?;
    let report = with_pool(threads, || trainer::compare_losses(&d, &split, &configs, cfg.n_seeds))?;

    let mut out = Outputs::new(&a.out.out, a.out.force);
    out.add_json("comparison.json", &report)?;
    for s in &report.losses {
        out.add(
            format!("heatmap_{}.csv", file_label(&s.loss)),
            crate::metrics::matrix_csv(&report.group_names, &s.mean_ba_diff_matrix),
        );
    }
    out.commit(ctx, Some((&a.config, &bytes)), Some(cfg.base.seed), threads)?;
    println!("{:<22} {:>14} {:>14} {:>10} {:>6}", "loss", "avg BA", "max diff", "macro F1", "#best");
    for s in &report.losses {
        println!(
            "{:<22} {:>7.2}±{:<6.2} {:>7.2}±{:<6.2} {:>10.2} {:>6}",
            s.label,
            100.0 * s.avg_ba.mean,
            100.0 * s.avg_ba.std,
            100.0 * s.max_diff.mean,
            100.0 * s.max_diff.std,
            100.0 * s.macro_f1.mean,
            s.best_ba_count
        );
    }
    Ok(0)
}

fn sweep(a: RunArgs, ctx: &Ctx) -> Result<i32> {
    let bytes = read_config(&a.config)?;
    let cfg: SweepFile = parse_config(&bytes, &a.config)?;
    cfg.base.validate()?;
    let threads = resolve_threads(a.jobs)?;
    let d = load_source(&cfg.data, &a.config)?;
    let split = split_for(&d, &cfg.split)?;
    let report = with_pool(threads, || {
        trainer::lambda_sweep(&d, &split, &cfg.base, &cfg.lambdas, cfg.n_seeds)
    })?;
    let mut csv = String::from("lambda,avg_ba_mean,avg_ba_std,max_diff_mean,max_diff_std\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?}\n",
            r.lambda, r.avg_ba.mean, r.avg_ba.std, r.max_diff.mean, r.max_diff.std
        ));
    }
    let mut out = Outputs::new(&a.out.out, a.out.force);
    out.add_json("sweep.json", &report)?;
    out.add("sweep.csv", csv.clone());
    out.commit(ctx, Some((&a.config, &bytes)), Some(cfg.base.seed), threads)?;
    print!("{csv}");
    Ok(0)
}

fn stats(a: StatsArgs, ctx: &Ctx) -> Result<i32> {
    let d = data::load_dataset(&a.data, DataFormat::Csv)?;
    let report = data::prevalence_stats(&d);
    let mut out = Outputs::new(&a.out.out, a.out.force);
    out.add_json("prevalence.json", &report)?;
    let bytes = std::fs::read(&a.data).map_err(|e| Error::io(&a.data, e))?;
    out.commit(ctx, Some((&a.data, &bytes)), None, 1)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

/// JSON verdict of `verify --theorem 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EoFeasibilityReport {
    pub theorem: u8,
    pub group_a: GroupCounts,
    pub group_b: GroupCounts,
    pub grid_resolution: usize,
    pub epsilon: f64,
    pub equal_base_rates: bool,
    pub classification: Feasibility,
    pub feasible_points: usize,
    pub points_scanned: usize,
    /// Up to 11 feasible `(tpr, fpr)` points spread along the feasible set.
    pub witness_points: Vec<(f64, f64)>,
    pub verdict: Verdict,
}

/// JSON verdict of `verify --theorem 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRateConsistencyReport {
    pub theorem: u8,
    pub group_a: GroupCounts,
    pub group_b: GroupCounts,
    pub base_rate_a: f64,
    pub base_rate_b: f64,
    pub equal_base_rates: bool,
    pub consistent: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

fn parse_counts(raw: &[i64]) -> Result<(GroupCounts, GroupCounts)> {
    if raw.len() != 4 {
        return Err(Error::InvalidConfig("--counts needs P_A,N_A,P_B,N_B".into()));
    }
    if let Some(c) = raw.iter().find(|&&c| c <= 0) {
        return Err(Error::InvalidConfig(format!("counts must be positive integers, got {c}")));
    }
    let c = |i: usize| raw[i] as u64;
    Ok((GroupCounts::new(c(0), c(1))?, GroupCounts::new(c(2), c(3))?))
}

fn spread(points: &[(f64, f64)], k: usize) -> Vec<(f64, f64)> {
    if points.len() <= k {
        return points.to_vec();
    }
    (0..k).map(|i| points[i * (points.len() - 1) / (k - 1)]).collect()
}

pub fn eo_feasibility_report(a: GroupCounts, b: GroupCounts, resolution: usize, epsilon: f64) -> Result<EoFeasibilityReport> {
    let scan = theory::eo_ap_scan(a, b, resolution, epsilon)?;
    let equal = theory::equal_base_rates(a, b);
    let expected = if equal {
        Feasibility::AllFeasible
    } else {
        Feasibility::OnlyRandomLine
    };
    Ok(EoFeasibilityReport {
        theorem: 1,
        group_a: a,
        group_b: b,
        grid_resolution: scan.grid_resolution,
        epsilon: scan.epsilon,
        equal_base_rates: equal,
        classification: scan.classification,
        feasible_points: scan.feasible_points.len(),
        points_scanned: scan.points_scanned,
        witness_points: spread(&scan.feasible_points, 11),
        verdict: Verdict::from_bool(scan.classification == expected),
    })
}

pub fn error_rate_consistency_report(a: GroupCounts, b: GroupCounts) -> ErrorRateConsistencyReport {
    let equal = theory::equal_base_rates(a, b);
    let consistent = theory::fpned_ap_consistency(a, b);
    ErrorRateConsistencyReport {
        theorem: 2,
        group_a: a,
        group_b: b,
        base_rate_a: a.positives as f64 / a.negatives as f64,
        base_rate_b: b.positives as f64 / b.negatives as f64,
        equal_base_rates: equal,
        consistent,
        verdict: Verdict::from_bool(consistent == equal),
    }
}

fn verify(a: VerifyArgs, ctx: &Ctx) -> Result<i32> {
    let mut outputs = a.out.as_ref().map(|d| Outputs::new(d, a.force));
    let pass = if a.table2 {
        let rows = theory::table2_scenario();
        let mismatches = theory::table2_mismatches(&rows);
        let csv = theory::table2_csv(&rows);
        print!("{csv}");
        for m in &mismatches {
            eprintln!("mismatch: {m:?}");
        }
        if let Some(o) = outputs.as_mut() {
            o.add("table2.csv", csv);
        }
        let ok = mismatches.is_empty();
        eprintln!("table2: {}", if ok { "PASS" } else { "FAIL" });
        ok
    } else {
        let (ga, gb) = parse_counts(&a.counts)?;
        let (json, verdict) = match a.theorem {
            Some(1) => {
                let r = eo_feasibility_report(ga, gb, a.resolution, a.epsilon)?;
                (serde_json::to_string_pretty(&r)?, r.verdict)
            }
            _ => {
                let r = error_rate_consistency_report(ga, gb);
                (serde_json::to_string_pretty(&r)?, r.verdict)
            }
        };
        println!("{json}");
        if let Some(o) = outputs.as_mut() {
            o.add(format!("theorem{}.json", a.theorem.unwrap_or(2)), json + "\n");
        }
        verdict == Verdict::Pass
    };
    if let Some(o) = outputs {
        o.commit(ctx, None, None, 1)?;
    }
    Ok(if pass { 0 } else { 2 })
}
