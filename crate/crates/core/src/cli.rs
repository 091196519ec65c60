//! Command-line front end: config loading, runs, sweeps and file output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::{self, asserted_failures, scatter_fit, task_checks, BoundCheckReport, CheckMode, TheoremTag};
use crate::mlpnet::{FitReport, KlDirection};
use crate::pipeline::{
    direction_name, run_experiment, ExperimentConfig, ExperimentReport, Regime, Role, SeedScheme, Setting, TaskResult,
};
use crate::selftest;
use crate::stats;

/// Overrides the default output directory.
pub const OUTPUT_DIR_ENV: &str = "W2SG_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "w2sg-output";

pub const SCATTER_FILE: &str = "scatter.csv";
pub const BOUNDS_FILE: &str = "bounds.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_FILE: &str = "sweep.csv";

pub const SCATTER_HEADER: &str =
    "task_id,setting,regime,loss_direction,d_star_w,d_star_sw,gain,misfit,epsilon,wis_value,converged";
const BOUNDS_HEADER: &str = "task_id,theorem,mode,lhs,rhs,slack,holds,constant_c1,wis_sign,epsilon,samples";
const CALIBRATION_HEADER: &str =
    "task_id,weak_exact_mce,strong_exact_mce,weak_binned_mce,strong_binned_mce,weak_binned_ece,strong_binned_ece,d_w_sw";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },

    #[error("{path}: unknown key `{key}`")]
    UnknownKey { path: PathBuf, key: String },

    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: crate::Error },

    #[error("bad --vary `{0}`: {1}")]
    Vary(String, String),

    #[error("{path}: {message}")]
    Verify { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] crate::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Parser)]
#[command(name = "w2sg", version, about = "Weak-to-strong generalization experiments and bound checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its CSV, summary and manifest files.
    Run {
        /// TOML config, or a manifest.json from an earlier run.
        config: PathBuf,
        /// Output directory; wins over the environment override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config, then print it with defaults filled in.
    Validate { config: PathBuf },
    /// Run the config once per combination of the varied values.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...`; dotted keys reach nested tables. Repeatable.
        #[arg(long, required = true)]
        vary: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Process exit status of a finished command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// An asserted check or a property suite failed.
    ChecksFailed,
}

pub fn execute(cli: Cli) -> CliResult<Status> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let dir = output_dir(out, &config);
            eprintln!("running {} → {}", config.display(), dir.display());
            let outcome = run(&cfg, &dir)?;
            print!("{}", outcome.summary);
            Ok(outcome.status())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            print!("{}", config_to_toml(&cfg)?);
            eprintln!("{}: ok", config.display());
            Ok(Status::Ok)
        }
        Command::Sweep { config, vary, out } => {
            let cfg = load_config(&config)?;
            let axes = vary.iter().map(|v| parse_vary(v)).collect::<CliResult<Vec<_>>>()?;
            let dir = output_dir(out, &config);
            let points = sweep(&cfg, &axes, &dir)?;
            print!("{}", fs::read_to_string(dir.join(SWEEP_FILE)).map_err(io_at(&dir))?);
            Ok(if points.iter().all(|p| p.asserted_failures == 0) { Status::Ok } else { Status::ChecksFailed })
        }
        Command::Selftest { seed } => {
            let outcomes = selftest::run_all(seed);
            for o in &outcomes {
                println!("{o}");
            }
            Ok(if outcomes.iter().all(selftest::SuiteOutcome::passed) { Status::Ok } else { Status::ChecksFailed })
        }
    }
}

/// `--out`, else the environment override, else a directory named after the
/// config under the default root.
pub fn output_dir(flag: Option<PathBuf>, config: &Path) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    Path::new(DEFAULT_OUTPUT_DIR).join(stem)
}

/// Reads a TOML config, or the config snapshot inside a run manifest.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_owned(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        manifest.config
    } else {
        parse_config(&text, path)?
    };
    cfg.validate().map_err(|source| CliError::Invalid { path: path.to_owned(), source })?;
    Ok(cfg)
}

/// Parses TOML config text; `origin` only labels errors.
pub fn parse_config(text: &str, origin: &Path) -> CliResult<ExperimentConfig> {
    toml::from_str(text).map_err(|e| {
        let message = e.message().to_owned();
        if let Some(key) = unknown_field(&message) {
            return CliError::UnknownKey { path: origin.to_owned(), key };
        }
        let (line, column) = e.span().map(|s| line_column(text, s.start)).unwrap_or((1, 1));
        CliError::Parse { path: origin.to_owned(), line, column, message }
    })
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_owned())
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

/// The effective config, defaults resolved, as TOML.
pub fn config_to_toml(cfg: &ExperimentConfig) -> CliResult<String> {
    toml::to_string(&cfg.resolved())
        .map_err(|e| crate::Error::Contract(format!("config does not serialize: {e}")).into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub generator: String,
    pub stream_layout: String,
    /// First word of stream `(role, 0)` for every role.
    pub sub_seeds: BTreeMap<String, u64>,
}

impl SeedRecord {
    fn of(scheme: SeedScheme) -> Self {
        let sub_seeds = Role::ALL
            .iter()
            .map(|&role| {
                let name = serde_json::to_value(role).ok().and_then(|v| v.as_str().map(str::to_owned));
                (name.unwrap_or_else(|| format!("{role:?}")), scheme.sub_seed(role, 0))
            })
            .collect();
        Self {
            generator: "chacha8 keyed by the master seed".into(),
            stream_layout: format!("stream = role << {} | index", SeedScheme::INDEX_BITS),
            sub_seeds,
        }
    }
}

/// Everything needed to reproduce a run and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub seeds: SeedRecord,
    pub duration_seconds: f64,
    pub tasks_completed: usize,
    pub tasks_failed: usize,
    pub asserted_failures: usize,
    pub outputs: Vec<OutputDigest>,
}

/// A finished run: its manifest, checks and rendered summary.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub report: ExperimentReport,
    pub checks: Vec<BoundCheckReport>,
    pub summary: String,
}

impl RunOutcome {
    pub fn asserted_failures(&self) -> Vec<&BoundCheckReport> {
        asserted_failures(&self.checks)
    }

    pub fn status(&self) -> Status {
        if self.manifest.asserted_failures == 0 {
            Status::Ok
        } else {
            Status::ChecksFailed
        }
    }
}

/// Runs one experiment and writes every output file into `dir`.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> CliResult<RunOutcome> {
    let start = Instant::now();
    let report = run_experiment(cfg)?;
    let checks = report.results.iter().map(|r| task_checks(r, cfg.gamma)).collect::<crate::Result<Vec<_>>>()?.concat();
    let failures = asserted_failures(&checks).len();
    let summary = render_summary(&report, &checks);

    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut files = vec![
        (SCATTER_FILE, render_scatter(&report.results)),
        (BOUNDS_FILE, render_bounds(&checks)),
        (SUMMARY_FILE, summary.clone()),
        (CONFIG_FILE, config_to_toml(cfg)?),
    ];
    if cfg.setting == Setting::ClassificationKl {
        files.insert(2, (CALIBRATION_FILE, render_calibration(&report.results)));
    }
    let outputs = files.iter().map(|(name, body)| write_file(&dir.join(name), body)).collect::<CliResult<Vec<_>>>()?;

    let manifest = RunManifest {
        artifact: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.resolved(),
        master_seed: cfg.seed,
        seeds: SeedRecord::of(SeedScheme::new(cfg.seed)),
        duration_seconds: start.elapsed().as_secs_f64(),
        tasks_completed: report.results.len(),
        tasks_failed: report.failures.len(),
        asserted_failures: failures,
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| crate::Error::Contract(e.to_string()))? + "\n";
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(io_at(&path))?;
    Ok(RunOutcome { manifest, report, checks, summary })
}

fn write_file(path: &Path, body: &str) -> CliResult<OutputDigest> {
    fs::write(path, body).map_err(io_at(path))?;
    Ok(OutputDigest {
        file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        bytes: body.len() as u64,
        sha256: hex::encode(Sha256::digest(body.as_bytes())),
    })
}

/// Twelve significant digits.
fn num(v: f64) -> String {
    format!("{v:.11e}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn render_scatter(results: &[TaskResult]) -> String {
    let mut out = format!("{SCATTER_HEADER}\n");
    for r in results {
        let row = ScatterRow::of(r);
        out.push_str(&row.render());
        out.push('\n');
    }
    out
}

/// Writes the scatter CSV. Empty result sets are refused.
pub fn emit_scatter(results: &[TaskResult], path: &Path) -> CliResult<OutputDigest> {
    if results.is_empty() {
        return Err(crate::Error::DegenerateInput("no task results to write".into()).into());
    }
    write_file(path, &render_scatter(results))
}

/// One parsed line of the scatter CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub task_id: usize,
    pub setting: Setting,
    pub regime: Regime,
    pub loss_direction: KlDirection,
    pub d_star_w: f64,
    pub d_star_sw: f64,
    pub gain: f64,
    pub misfit: f64,
    pub epsilon: f64,
    pub wis_value: f64,
    pub converged: bool,
}

impl ScatterRow {
    pub fn of(r: &TaskResult) -> Self {
        Self {
            task_id: r.task_id,
            setting: r.setting,
            regime: r.regime,
            loss_direction: r.loss_direction,
            d_star_w: r.d_star_w.value,
            d_star_sw: r.d_star_sw.value,
            gain: r.gain,
            misfit: r.misfit(),
            epsilon: r.epsilon(),
            wis_value: r.wis_value,
            converged: r.converged.all(),
        }
    }

    pub fn render(&self) -> String {
        [
            self.task_id.to_string(),
            self.setting.to_string(),
            self.regime.to_string(),
            direction_name(self.loss_direction).to_owned(),
            num(self.d_star_w),
            num(self.d_star_sw),
            num(self.gain),
            num(self.misfit),
            num(self.epsilon),
            num(self.wis_value),
            self.converged.to_string(),
        ]
        .join(",")
    }
}

pub fn read_scatter(path: &Path) -> CliResult<Vec<ScatterRow>> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| verify_err(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != SCATTER_HEADER {
        return Err(verify_err(path, format!("unexpected header `{header}`")));
    }
    reader.deserialize().map(|row| row.map_err(|e| verify_err(path, e))).collect()
}

fn verify_err(path: &Path, message: impl ToString) -> CliError {
    CliError::Verify { path: path.to_owned(), message: message.to_string() }
}

/// Reloads a scatter CSV and checks that re-rendering it reproduces the file
/// byte for byte and that every gain is `d_star_w − d_star_sw`.
pub fn verify_scatter(path: &Path) -> CliResult<Vec<ScatterRow>> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    if text.contains('\r') {
        return Err(verify_err(path, "CR in line endings"));
    }
    let rows = read_scatter(path)?;
    let mut rendered = format!("{SCATTER_HEADER}\n");
    for row in &rows {
        rendered.push_str(&row.render());
        rendered.push('\n');
    }
    if rendered != text {
        return Err(verify_err(path, "re-rendered rows differ from the file"));
    }
    for row in &rows {
        let derived = row.d_star_w - row.d_star_sw;
        let tol = 1e-10 * row.d_star_w.abs().max(row.d_star_sw.abs()).max(1e-300);
        if (row.gain - derived).abs() > tol {
            return Err(verify_err(path, format!("task {}: gain {} ≠ {derived}", row.task_id, row.gain)));
        }
    }
    Ok(rows)
}

pub fn render_bounds(checks: &[BoundCheckReport]) -> String {
    let mut out = format!("{BOUNDS_HEADER}\n");
    for c in checks {
        let row = [
            opt(c.task_id),
            c.theorem.to_string(),
            c.mode.to_string(),
            num(c.lhs),
            num(c.rhs),
            num(c.slack),
            c.holds.to_string(),
            c.constant_c1.map(num).unwrap_or_default(),
            opt(c.wis_sign),
            c.epsilon.map(num).unwrap_or_default(),
            opt(c.samples),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn render_calibration(results: &[TaskResult]) -> String {
    let mut out = format!("{CALIBRATION_HEADER}\n");
    for r in results {
        let Some(c) = &r.calibration else { continue };
        let row = [
            r.task_id.to_string(),
            c.weak_exact.mce.map(num).unwrap_or_default(),
            c.strong_exact.mce.map(num).unwrap_or_default(),
            c.weak_binned.mce.map(num).unwrap_or_default(),
            c.strong_binned.mce.map(num).unwrap_or_default(),
            c.weak_binned.ece.map(num).unwrap_or_default(),
            c.strong_binned.ece.map(num).unwrap_or_default(),
            num(r.d_w_sw.value),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Pass counts of one theorem tag, split by mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CheckTally {
    pub asserted: usize,
    pub asserted_holding: usize,
    pub descriptive: usize,
    pub descriptive_holding: usize,
    pub inapplicable: usize,
}

pub fn tally(checks: &[BoundCheckReport], theorem: TheoremTag) -> CheckTally {
    checks.iter().filter(|c| c.theorem == theorem).fold(CheckTally::default(), |mut t, c| {
        match c.mode {
            CheckMode::Asserted => {
                t.asserted += 1;
                t.asserted_holding += usize::from(c.holds);
            }
            CheckMode::Descriptive => {
                t.descriptive += 1;
                t.descriptive_holding += usize::from(c.holds);
            }
            CheckMode::Inapplicable => t.inapplicable += 1,
        }
        t
    })
}

/// Task counts by WIS sign and whether the misfit inequality holds there.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WisPartition {
    pub nonpositive: usize,
    pub nonpositive_holding: usize,
    pub positive: usize,
    pub positive_holding: usize,
}

pub fn wis_partition(results: &[TaskResult]) -> WisPartition {
    results.iter().fold(WisPartition::default(), |mut p, r| {
        let holds = bounds::check_t51(r, bounds::Slack::fixed(bounds::T51_TAU)).holds;
        if r.wis_value <= 0.0 {
            p.nonpositive += 1;
            p.nonpositive_holding += usize::from(holds);
        } else {
            p.positive += 1;
            p.positive_holding += usize::from(holds);
        }
        p
    })
}

fn fit_line(name: &str, r: &Option<FitReport>) -> String {
    match r {
        None => format!("  {name:<20} none (fixed or perturbed)\n"),
        Some(r) => format!(
            "  {name:<20} loss {:.4e} → {:.4e}  grad {:.2e}  steps {:>5}  converged {}\n",
            r.initial_loss, r.final_loss, r.final_grad_norm, r.steps_run, r.converged
        ),
    }
}

pub fn render_summary(report: &ExperimentReport, checks: &[BoundCheckReport]) -> String {
    let cfg = &report.config;
    let results = &report.results;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "setting {}  regime {}  loss {}  seed {}  gamma {}",
        cfg.setting,
        cfg.regime,
        direction_name(cfg.loss_direction),
        cfg.seed,
        cfg.gamma
    );
    let _ = writeln!(s, "tasks {} completed, {} failed", results.len(), report.failures.len());
    s.push_str("\nrepresentation pretraining\n");
    s.push_str(&fit_line("weak", &report.weak_pretraining));
    s.push_str(&fit_line("strong", &report.strong_pretraining));

    s.push_str("\ngain vs misfit\n");
    match scatter_fit(results) {
        Some(f) => {
            let _ = writeln!(s, "  slope {:.4}  intercept {:+.3e}  pearson {:.4}", f.slope, f.intercept, f.pearson);
            let _ = writeln!(s, "  reverse slope {:.4}  tasks {}", f.reverse_slope, f.tasks);
        }
        None => s.push_str("  undefined (fewer than two distinct misfits)\n"),
    }
    let med = |f: fn(&TaskResult) -> f64| stats::median(&results.iter().map(f).collect::<Vec<_>>());
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4e}"));
    let _ = writeln!(s, "  median misfit {}  median gain {}", fmt(med(TaskResult::misfit)), fmt(med(|r| r.gain)));
    let _ = writeln!(
        s,
        "  median epsilon {}  median residual {}",
        fmt(med(TaskResult::epsilon)),
        fmt(med(TaskResult::residual))
    );
    let converged = results.iter().filter(|r| r.converged.all()).count();
    let _ = writeln!(s, "  all head fits converged in {converged} of {} tasks", results.len());

    s.push_str("\nbound checks        asserted     descriptive  inapplicable\n");
    for tag in [
        TheoremTag::T41Upper,
        TheoremTag::T41Lower,
        TheoremTag::T51Realizable,
        TheoremTag::CB5Forward,
        TheoremTag::T52Residual,
        TheoremTag::T43Calibration,
    ] {
        let t = tally(checks, tag);
        if t.asserted + t.descriptive + t.inapplicable == 0 {
            continue;
        }
        let _ = writeln!(
            s,
            "  {:<18}{:>5}/{:<5}   {:>5}/{:<5}   {:>5}",
            tag.to_string(),
            t.asserted_holding,
            t.asserted,
            t.descriptive_holding,
            t.descriptive,
            t.inapplicable
        );
    }
    if cfg.loss_direction == KlDirection::Forward {
        let p = wis_partition(results);
        s.push_str("\nforward partition by wis sign (misfit inequality holding)\n");
        let _ = writeln!(
            s,
            "  nonpositive {:>4}/{:<4}  positive {:>4}/{:<4}",
            p.nonpositive_holding, p.nonpositive, p.positive_holding, p.positive
        );
    }

    let failures = asserted_failures(checks);
    let _ = writeln!(s, "\nasserted failures {}", failures.len());
    for f in failures {
        let _ = writeln!(
            s,
            "  task {} {}: lhs {:.6e} > rhs {:.6e} + {:.1e}",
            opt(f.task_id),
            f.theorem,
            f.lhs,
            f.rhs,
            f.slack
        );
    }
    for f in &report.failures {
        let _ = writeln!(s, "task {} failed: {}", f.task_id, f.message);
    }
    s
}

/// One `--vary` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VaryAxis {
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_vary(spec: &str) -> CliResult<VaryAxis> {
    let (key, values) = spec.split_once('=').ok_or_else(|| CliError::Vary(spec.into(), "expected key=v1,v2".into()))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(CliError::Vary(spec.into(), "needs a key and at least one value".into()));
    }
    Ok(VaryAxis { key: key.trim().into(), values })
}

/// A TOML literal, or a bare string when the text is not one.
fn literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.into()))
}

/// `base` with `key` set to `raw`; the key must already exist.
pub fn with_override(base: &ExperimentConfig, key: &str, raw: &str) -> CliResult<ExperimentConfig> {
    let bad = |why: &str| CliError::Vary(format!("{key}={raw}"), why.into());
    let mut tree = toml::Value::try_from(base.resolved()).map_err(|e| bad(&e.to_string()))?;
    let mut node = &mut tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| bad("key path crosses a non-table value"))?;
        if !table.contains_key(*part) {
            return Err(bad(&format!("unknown key `{part}`")));
        }
        if i + 1 == parts.len() {
            table.insert((*part).into(), literal(raw));
            break;
        }
        node = table.get_mut(*part).expect("checked above");
    }
    let cfg: ExperimentConfig = tree.try_into().map_err(|e: toml::de::Error| bad(e.message()))?;
    cfg.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(cfg)
}

/// Headline numbers of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub assignment: Vec<(String, String)>,
    pub directory: PathBuf,
    pub tasks: usize,
    pub failed_tasks: usize,
    pub slope: Option<f64>,
    pub pearson: Option<f64>,
    pub median_epsilon: Option<f64>,
    pub median_residual: Option<f64>,
    pub misfit_inequality_holding: usize,
    pub asserted_failures: usize,
}

/// Every combination of the axes' values, first axis slowest.
pub fn sweep_grid(axes: &[VaryAxis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |grid, axis| {
        grid.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push((axis.key.clone(), v.clone()));
                    next
                })
            })
            .collect()
    })
}

fn point_dir(assignment: &[(String, String)]) -> String {
    assignment
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("_")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '-' })
        .collect()
}

/// Runs every grid point into its own subdirectory and writes a sweep table.
pub fn sweep(base: &ExperimentConfig, axes: &[VaryAxis], dir: &Path) -> CliResult<Vec<SweepPoint>> {
    let grid = sweep_grid(axes);
    let configs = grid
        .iter()
        .map(|assignment| assignment.iter().try_fold(base.clone(), |cfg, (k, v)| with_override(&cfg, k, v)))
        .collect::<CliResult<Vec<_>>>()?;
    let mut points = Vec::with_capacity(grid.len());
    for (assignment, cfg) in grid.into_iter().zip(configs) {
        let sub = dir.join(point_dir(&assignment));
        eprintln!("sweep point {} → {}", point_dir(&assignment), sub.display());
        let outcome = run(&cfg, &sub)?;
        let results = &outcome.report.results;
        let fit = scatter_fit(results);
        let med = |f: fn(&TaskResult) -> f64| stats::median(&results.iter().map(f).collect::<Vec<_>>());
        points.push(SweepPoint {
            assignment,
            directory: sub,
            tasks: results.len(),
            failed_tasks: outcome.report.failures.len(),
            slope: fit.map(|f| f.slope),
            pearson: fit.map(|f| f.pearson),
            median_epsilon: med(TaskResult::epsilon),
            median_residual: med(TaskResult::residual),
            misfit_inequality_holding: tally(&outcome.checks, TheoremTag::T51Realizable).asserted_holding
                + tally(&outcome.checks, TheoremTag::T51Realizable).descriptive_holding,
            asserted_failures: outcome.manifest.asserted_failures,
        });
    }
    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    let mut table = format!(
        "{},tasks,failed_tasks,slope,pearson,median_epsilon,median_residual,misfit_inequality_holding,asserted_failures\n",
        keys.join(",")
    );
    for p in &points {
        let mut row: Vec<String> = p.assignment.iter().map(|(_, v)| v.clone()).collect();
        row.extend([
            p.tasks.to_string(),
            p.failed_tasks.to_string(),
            p.slope.map(num).unwrap_or_default(),
            p.pearson.map(num).unwrap_or_default(),
            p.median_epsilon.map(num).unwrap_or_default(),
            p.median_residual.map(num).unwrap_or_default(),
            p.misfit_inequality_holding.to_string(),
            p.asserted_failures.to_string(),
        ]);
        table.push_str(&row.join(","));
        table.push('\n');
    }
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    write_file(&dir.join(SWEEP_FILE), &table)?;
    Ok(points)
}
