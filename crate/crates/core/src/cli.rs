//! `salad-sim` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or input error, 3 runtime failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blermodel::{fit_mse, fit_sigmoid, read_rows, BlerTable, Mcs, McsTable};
use crate::error::Error;
use crate::sim::{self, fmt_sig9, AdapterKind, Metrics, RunOutput, Scenario, SlotTrace};
use crate::teacher::{distill, DistillConfig, HistoryBatch};
use crate::tuner::{self, ProblemFile};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "salad-sim", version, about = "Link adaptation simulator (SALAD, OLLA, oracle)")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write trace, metrics and plot data.
    Run(RunArgs),
    /// Run a manifest of adapters x seeds and aggregate the metrics.
    Sweep(SweepArgs),
    /// Tune SALAD parameters with Nelder-Mead.
    Tune(TuneArgs),
    /// Fit a teacher to a trace and report the distilled learning rate.
    Distill(DistillArgs),
    /// Fit sigmoid BLER curves to (mcs, cbs, snr_db, bler) samples.
    FitBler(FitBlerArgs),
}

#[derive(Debug, Args)]
pub struct TableArg {
    /// BLER table file (mcs,cbs,center_db,scale_db); the bundled table when absent.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub adapter: Option<AdapterKind>,
    /// Dotted scenario override, e.g. `adapter.olla.delta_nack=0.5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub table: TableArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep manifest (scenario, adapters, seeds).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the manifest's scenario.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub table: TableArg,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Problem file (bounds, weights, scenarios, seeds, budget).
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub table: TableArg,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Trace CSV written by `run`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use only transmissions from this slot on.
    #[arg(long)]
    pub from: Option<u64>,
    /// Use only transmissions before this slot.
    #[arg(long)]
    pub to: Option<u64>,
    /// Distillation settings (the `distill` table of a SALAD config) as TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub table: TableArg,
}

#[derive(Debug, Args)]
pub struct FitBlerArgs {
    /// CSV with columns mcs,cbs,snr_db,bler.
    #[arg(long)]
    pub input: PathBuf,
    /// Output table file.
    #[arg(long)]
    pub out: PathBuf,
}

impl clap::ValueEnum for AdapterKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[AdapterKind::Olla, AdapterKind::Salad, AdapterKind::Oracle]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            AdapterKind::Olla => "olla",
            AdapterKind::Salad => "salad",
            AdapterKind::Oracle => "oracle",
        }))
    }
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_CONFIG, message: e.to_string() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    ExitCode::from(run_from_args(std::env::args_os()))
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run_from_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message.lines().next().unwrap_or(""));
            e.code
        }
    }
}

pub fn execute(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Distill(a) => cmd_distill(a),
        Command::FitBler(a) => cmd_fit_bler(a),
    }
}

fn load_table(arg: &TableArg) -> CliResult<Arc<BlerTable>> {
    match &arg.table {
        None => Ok(Arc::new(BlerTable::bundled())),
        Some(p) => BlerTable::load(p, &McsTable::nr_table2()).map(Arc::new).map_err(CliError::config),
    }
}

fn create_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(Error::io(dir, e)))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let io = |e| CliError::runtime(Error::io(path, e));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    f(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

fn metrics_json(m: &Metrics) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    s
}

/// Writes `trace.csv`, `metrics.json` and the per-figure plot files into `dir`.
pub fn write_run_outputs(dir: &Path, scenario: &Scenario, out: &RunOutput) -> CliResult<()> {
    create_out_dir(dir)?;
    write_file(&dir.join("trace.csv"), |w| sim::write_trace(w, &out.trace))?;
    write_file(&dir.join("metrics.json"), |w| w.write_all(metrics_json(&out.metrics).as_bytes()))?;
    write_file(&dir.join("scenario.toml"), |w| w.write_all(scenario.to_toml().as_bytes()))?;
    write_file(&dir.join("mcs_vs_slot.csv"), |w| {
        writeln!(w, "slot,mcs")?;
        for r in out.trace.iter().filter(|r| r.mcs.is_some()) {
            writeln!(w, "{},{}", r.slot, r.mcs.expect("filtered"))?;
        }
        Ok(())
    })?;
    write_file(&dir.join("sinr_vs_slot.csv"), |w| {
        writeln!(w, "slot,true_sinr_db,est_sinr_db")?;
        for r in &out.trace {
            writeln!(w, "{},{},{}", r.slot, fmt_sig9(r.true_sinr_db), r.est_sinr_db.map(fmt_sig9).unwrap_or_default())?;
        }
        Ok(())
    })?;
    write_file(&dir.join("sliding_bler_vs_slot.csv"), |w| {
        writeln!(w, "slot,sliding_bler")?;
        for (slot, b) in &out.metrics.sliding_bler {
            writeln!(w, "{slot},{}", fmt_sig9(*b))?;
        }
        Ok(())
    })
}

fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let mut scenario = Scenario::load(&a.scenario, &a.overrides).map_err(CliError::config)?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if let Some(kind) = a.adapter {
        scenario.adapter.kind = kind;
    }
    scenario.validate().map_err(CliError::config)?;
    let table = load_table(&a.table)?;
    let out = sim::run_scenario(&scenario, table).map_err(CliError::runtime)?;
    write_run_outputs(&a.out, &scenario, &out)?;
    log::info!(
        "{} slots, long-term BLER {:.4}, normalized TP {:.2}",
        out.metrics.slots,
        out.metrics.long_term_bler,
        out.metrics.normalized_tp
    );
    Ok(())
}

/// Sweep manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    /// Scenario file, relative to the manifest.
    pub scenario: PathBuf,
    pub adapters: Vec<AdapterKind>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub overrides: Vec<String>,
}

impl SweepManifest {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SweepManifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.adapters.is_empty() || m.seeds.is_empty() {
            return Err(Error::Config(format!("{}: manifest needs at least one adapter and one seed", path.display())));
        }
        Ok(m)
    }
}

pub const AGGREGATE_COLUMNS: [&str; 8] = [
    "adapter",
    "runs",
    "failed",
    "median_long_term_bler",
    "median_normalized_tp",
    "median_mean_se",
    "median_bler_msd",
    "median_adaptation_time",
];

/// Median; mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One aggregate row from the metrics of the completed runs of an adapter.
pub fn aggregate_row(adapter: AdapterKind, metrics: &[Metrics], failed: usize) -> String {
    let col = |f: &dyn Fn(&Metrics) -> Option<f64>| {
        median(&metrics.iter().filter_map(f).collect::<Vec<_>>()).map(fmt_sig9).unwrap_or_default()
    };
    format!(
        "{adapter},{},{failed},{},{},{},{},{}",
        metrics.len(),
        col(&|m| Some(m.long_term_bler)),
        col(&|m| Some(m.normalized_tp)),
        col(&|m| Some(m.mean_se)),
        col(&|m| Some(m.bler_msd)),
        col(&|m| m.adaptation_time.map(|t| t as f64)),
    )
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let manifest = SweepManifest::load(&a.manifest).map_err(CliError::config)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let scenario_path = a.scenario.clone().unwrap_or_else(|| base.join(&manifest.scenario));
    let overrides: Vec<String> = manifest.overrides.iter().chain(&a.overrides).cloned().collect();
    let scenario = Scenario::load(&scenario_path, &overrides).map_err(CliError::config)?;
    let table = load_table(&a.table)?;
    create_out_dir(&a.out)?;

    let runs: Vec<(AdapterKind, u64)> =
        manifest.adapters.iter().flat_map(|&k| manifest.seeds.iter().map(move |&s| (k, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs.max(1)).build().map_err(CliError::runtime)?;
    let results: Vec<(AdapterKind, u64, CliResult<Metrics>)> = pool.install(|| {
        runs.par_iter()
            .map(|&(kind, seed)| {
                let mut s = sim::with_adapter(&scenario, kind);
                s.seed = seed;
                let res = sim::run_scenario(&s, table.clone()).map_err(CliError::runtime).and_then(|out| {
                    write_file(&a.out.join(format!("trace_{kind}_{seed}.csv")), |w| sim::write_trace(w, &out.trace))?;
                    Ok(out.metrics)
                });
                (kind, seed, res)
            })
            .collect()
    });

    let mut failures = 0;
    let mut rows = Vec::new();
    for &kind in &manifest.adapters {
        let mut ok = Vec::new();
        let mut failed = 0;
        for (k, seed, res) in &results {
            if *k != kind {
                continue;
            }
            match res {
                Ok(m) => ok.push(m.clone()),
                Err(e) => {
                    eprintln!("run {kind} seed {seed} failed: {}", e.message);
                    failed += 1;
                }
            }
        }
        failures += failed;
        rows.push(aggregate_row(kind, &ok, failed));
    }
    write_file(&a.out.join("aggregate.csv"), |w| {
        writeln!(w, "{}", AGGREGATE_COLUMNS.join(","))?;
        for r in &rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })?;
    if failures > 0 {
        return Err(CliError::runtime(format!("{failures} of {} runs failed", runs.len())));
    }
    Ok(())
}

fn cmd_tune(a: &TuneArgs) -> CliResult<()> {
    let mut problem = ProblemFile::load(&a.problem).map_err(CliError::config)?;
    if let Some(b) = a.budget {
        problem.budget = b;
    }
    let table = load_table(&a.table)?;
    create_out_dir(&a.out)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs.max(1)).build().map_err(CliError::runtime)?;
    let outcome = pool.install(|| tuner::tune(&problem, table)).map_err(CliError::runtime)?;
    let cfg_text = toml::to_string(&outcome.best).map_err(CliError::runtime)?;
    write_file(&a.out.join("best_salad.toml"), |w| w.write_all(cfg_text.as_bytes()))?;
    write_file(&a.out.join("tune_log.csv"), |w| tuner::write_log(w, &problem, &outcome.log))?;
    log::info!("objective {:.6} -> {:.6}", outcome.start_objective, outcome.best_objective);
    Ok(())
}

#[derive(Debug, Serialize)]
struct DistillReport {
    samples: usize,
    first_slot: u64,
    last_slot: u64,
    initial_estimate_db: f64,
    epsilon: f64,
    knots: usize,
    knot_slots: Vec<f64>,
    knot_values_db: Vec<f64>,
}

fn cmd_distill(a: &DistillArgs) -> CliResult<()> {
    let rows = sim::read_trace(&a.trace).map_err(CliError::config)?;
    let cfg = match &a.config {
        None => DistillConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(Error::io(p, e)))?;
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
    };
    let table = load_table(&a.table)?;
    let selected: Vec<&SlotTrace> = rows
        .iter()
        .filter(|r| r.nack.is_some() && a.from.is_none_or(|f| r.slot >= f) && a.to.is_none_or(|t| r.slot < t))
        .collect();
    let first = selected.first().ok_or_else(|| CliError::config("trace has no transmissions in the requested range"))?;
    let init = first.est_sinr_db.unwrap_or(first.true_sinr_db);
    let batch = HistoryBatch::from_feedback(
        &table,
        selected.iter().map(|r| (r.slot, r.mcs.expect("scheduled"), r.tbs.expect("scheduled"), r.nack.expect("filtered"))),
    )
    .map_err(CliError::config)?;
    let outcome = distill(&batch, &cfg, init).map_err(CliError::runtime)?;
    let report = DistillReport {
        samples: batch.len(),
        first_slot: first.slot,
        last_slot: selected.last().expect("non-empty").slot,
        initial_estimate_db: init,
        epsilon: outcome.epsilon,
        knots: outcome.knots,
        knot_slots: outcome.teacher.knots.clone(),
        knot_values_db: outcome.teacher.theta.clone(),
    };
    create_out_dir(&a.out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&a.out.join("distill.json"), |w| w.write_all(json.as_bytes()))?;
    write_file(&a.out.join("teacher_vs_slot.csv"), |w| {
        writeln!(w, "slot,true_sinr_db,est_sinr_db,teacher_db")?;
        for r in &selected {
            let t = outcome.teacher.eval(r.slot as f64).map_err(std::io::Error::other)?;
            writeln!(
                w,
                "{},{},{},{}",
                r.slot,
                fmt_sig9(r.true_sinr_db),
                r.est_sinr_db.map(fmt_sig9).unwrap_or_default(),
                fmt_sig9(t)
            )?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Fitted sigmoid for one `(mcs, cbs)` group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FittedEntry {
    pub mcs: Mcs,
    pub cbs: u32,
    pub center: f64,
    pub scale: f64,
    pub mse: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    pub fitted: Vec<FittedEntry>,
    /// Groups that could not be fitted, with the reason.
    pub unfittable: Vec<((Mcs, u32), String)>,
}

/// Groups `mcs,cbs,snr_db,bler` samples and fits one sigmoid per group.
///
/// Rows with an empty `bler` field declare a group without contributing a point.
pub fn fit_bler_samples(path: &Path) -> Result<FitReport, Error> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let reference = McsTable::nr_table2();
    let mut groups: BTreeMap<(Mcs, u32), Vec<(f64, f64)>> = BTreeMap::new();
    for (line, rec) in read_rows(f, path, &["mcs", "cbs", "snr_db", "bler"])? {
        let err = |msg: String| Error::Parse { path: path.into(), line, msg };
        let mcs = Mcs(rec[0].parse().map_err(|_| err(format!("bad mcs '{}'", rec[0])))?);
        reference.entry(mcs).map_err(|_| err(format!("unknown mcs {mcs}")))?;
        let cbs: u32 = rec[1].parse().map_err(|_| err(format!("bad cbs '{}'", rec[1])))?;
        let snr: f64 = rec[2].parse().map_err(|_| err(format!("bad snr_db '{}'", rec[2])))?;
        let points = groups.entry((mcs, cbs)).or_default();
        if rec[3].is_empty() {
            continue;
        }
        let bler: f64 = rec[3].parse().map_err(|_| err(format!("bad bler '{}'", rec[3])))?;
        if !(0.0..=1.0).contains(&bler) || !snr.is_finite() {
            return Err(err(format!("bler must be in [0, 1] and snr finite, got ({snr}, {bler})")));
        }
        points.push((snr, bler));
    }
    let mut report = FitReport::default();
    for ((mcs, cbs), pts) in groups {
        match fit_sigmoid(&pts) {
            Ok((center, scale)) => {
                report.fitted.push(FittedEntry { mcs, cbs, center, scale, mse: fit_mse(&pts, center, scale), points: pts.len() })
            }
            Err(e) => report.unfittable.push(((mcs, cbs), e.to_string())),
        }
    }
    Ok(report)
}

fn cmd_fit_bler(a: &FitBlerArgs) -> CliResult<()> {
    let report = fit_bler_samples(&a.input).map_err(CliError::config)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out_dir(dir)?;
    }
    write_file(&a.out, |w| {
        writeln!(w, "mcs,cbs,center_db,scale_db")?;
        for e in &report.fitted {
            writeln!(w, "{},{},{},{}", e.mcs, e.cbs, e.center, e.scale)?;
        }
        Ok(())
    })?;
    let mse_path = a.out.with_extension("mse.csv");
    write_file(&mse_path, |w| {
        writeln!(w, "mcs,cbs,points,mse")?;
        for e in &report.fitted {
            writeln!(w, "{},{},{},{}", e.mcs, e.cbs, e.points, fmt_sig9(e.mse))?;
        }
        Ok(())
    })?;
    for e in &report.fitted {
        println!("mcs {:>2} cbs {:>5}: center {:.4} dB, scale {:.4} dB, mse {:.3e}", e.mcs, e.cbs, e.center, e.scale, e.mse);
    }
    if !report.unfittable.is_empty() {
        for ((mcs, cbs), why) in &report.unfittable {
            eprintln!("unfittable: mcs {mcs} cbs {cbs}: {why}");
        }
        return Err(CliError::runtime(format!("{} unfittable group(s)", report.unfittable.len())));
    }
    Ok(())
}
