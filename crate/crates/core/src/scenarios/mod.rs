//! Experiment harness: the six target scenarios (parts A to F), run reports,
//! Good/Best Result classification and report export.

mod runner;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatcher::{PlacementMode, ProvisionThresholds, RatingWeights};
use crate::environment::{build_environment, EnvError, Environment, EnvironmentSpec};
use crate::kernel::{rng_stream, SimDuration, TimeError};
use crate::workload::{generate_workload, Workload, WorkloadError, WorkloadSpec};

pub use runner::{simulate, BatchRecord, RunOutcome, TaskRecord};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    EnvironmentFile(#[from] EnvError),
    #[error(transparent)]
    WorkloadFile(#[from] WorkloadError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("ladder is missing part {0}")]
    IncompleteLadder(Part),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::InvalidConfig(msg.into())
}

impl From<TimeError> for ScenarioError {
    fn from(e: TimeError) -> Self {
        invalid(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Part {
    pub const ALL: [Part; 6] = [Part::A, Part::B, Part::C, Part::D, Part::E, Part::F];
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Part::A => "a",
            Part::B => "b",
            Part::C => "c",
            Part::D => "d",
            Part::E => "e",
            Part::F => "f",
        };
        f.write_str(c)
    }
}

impl FromStr for Part {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Part::A),
            "b" => Ok(Part::B),
            "c" => Ok(Part::C),
            "d" => Ok(Part::D),
            "e" => Ok(Part::E),
            "f" => Ok(Part::F),
            other => Err(invalid(format!("unknown part `{other}`, expected a..f"))),
        }
    }
}

/// Which services are active in a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Placement decisions consume dispatcher service time.
    pub scheduling: bool,
    pub migration: bool,
    pub replication: bool,
    /// Jobs end with an aggregation task whose time is accounted.
    pub aggregation: bool,
    pub churn: bool,
    /// Cloud nodes are held back until a provisioning rule fires for a job.
    pub cloud_burst: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleOverrides {
    pub scheduling: Option<bool>,
    pub migration: Option<bool>,
    pub replication: Option<bool>,
    pub aggregation: Option<bool>,
    pub churn: Option<bool>,
    pub cloud_burst: Option<bool>,
}

impl ToggleOverrides {
    fn apply(&self, t: Toggles) -> Toggles {
        Toggles {
            scheduling: self.scheduling.unwrap_or(t.scheduling),
            migration: self.migration.unwrap_or(t.migration),
            replication: self.replication.unwrap_or(t.replication),
            aggregation: self.aggregation.unwrap_or(t.aggregation),
            churn: self.churn.unwrap_or(t.churn),
            cloud_burst: self.cloud_burst.unwrap_or(t.cloud_burst),
        }
    }
}

/// Policy parameters as written in a config file; unset fields take the
/// part's default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverrides {
    pub weights: Option<RatingWeights>,
    pub hysteresis: Option<f64>,
    pub replicas: Option<usize>,
    pub rating_floor: Option<f64>,
    /// seconds; `.inf` disables batch-view rebuilds
    pub batch_period: Option<f64>,
    pub rebuild_delay: Option<f64>,
    pub heartbeat_period: Option<f64>,
    pub migration_period: Option<f64>,
    pub provision_period: Option<f64>,
    /// dispatcher time per placement decision (s)
    pub service_time: Option<f64>,
    pub max_migrations: Option<u32>,
    pub horizon: Option<f64>,
    pub thresholds: Option<ProvisionThresholds>,
}

/// Fully resolved policy of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub placement: PlacementMode,
    pub weights: RatingWeights,
    pub hysteresis: f64,
    pub replicas: usize,
    pub rating_floor: f64,
    pub batch_period: Option<SimDuration>,
    pub rebuild_delay: SimDuration,
    pub heartbeat_period: SimDuration,
    pub migration_period: SimDuration,
    pub provision_period: SimDuration,
    pub service_time: SimDuration,
    pub max_migrations: u32,
    pub horizon: SimDuration,
    pub thresholds: ProvisionThresholds,
}

/// One scenario run request, as read from a config file or built in code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_part")]
    pub part: Part,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub environment: Option<PathBuf>,
    #[serde(default)]
    pub workload: Option<PathBuf>,
    #[serde(default)]
    pub placement: Option<PlacementMode>,
    #[serde(default)]
    pub overrides: ToggleOverrides,
    #[serde(default)]
    pub policy: PolicyOverrides,
}

fn default_part() -> Part {
    Part::A
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            part: Part::A,
            seed: 0,
            environment: None,
            workload: None,
            placement: None,
            overrides: ToggleOverrides::default(),
            policy: PolicyOverrides::default(),
        }
    }
}

/// Default services of each part.
pub fn part_toggles(part: Part) -> Toggles {
    let all = Toggles { scheduling: true, migration: true, replication: true, aggregation: true, churn: true, cloud_burst: false };
    match part {
        Part::A => Toggles::default(),
        Part::B => Toggles { scheduling: true, ..Toggles::default() },
        Part::C => Toggles { migration: false, ..all },
        Part::D | Part::E | Part::F => all,
    }
}

fn secs(v: f64, field: &str) -> Result<SimDuration, ScenarioError> {
    SimDuration::from_secs(v).map_err(|e| invalid(format!("policy.{field}: {e}")))
}

fn positive_secs(v: f64, field: &str) -> Result<SimDuration, ScenarioError> {
    let d = secs(v, field)?;
    if d.is_zero() {
        return Err(invalid(format!("policy.{field} must be positive")));
    }
    Ok(d)
}

impl ScenarioConfig {
    pub fn for_part(part: Part, seed: u64) -> Self {
        ScenarioConfig { part, seed, ..Default::default() }
    }

    pub fn from_yaml(text: &str) -> Result<Self, ScenarioError> {
        serde_yaml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    /// Reads a config file; relative file paths inside it are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_yaml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.environment, &mut cfg.workload].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn toggles(&self) -> Toggles {
        self.overrides.apply(part_toggles(self.part))
    }

    /// Resolves part defaults and overrides against the environment.
    pub fn resolve_policy(&self, env: &Environment) -> Result<Policy, ScenarioError> {
        let p = &self.policy;
        let part = self.part;
        let default_placement = match part {
            Part::E | Part::F => PlacementMode::Smart,
            _ => PlacementMode::Baseline,
        };
        let (default_h, default_r, default_batch) = match part {
            Part::D => (0.0, env.nodes().len().saturating_sub(1), None),
            _ => (0.2, 1, Some(60.0)),
        };
        let default_floor = if part == Part::F { 0.5 } else { 0.0 };

        let weights = p.weights.unwrap_or_default().normalized().map_err(|e| invalid(e.to_string()))?;
        let hysteresis = p.hysteresis.unwrap_or(default_h);
        if !(hysteresis.is_finite() && hysteresis >= 0.0) {
            return Err(invalid("policy.hysteresis must be >= 0"));
        }
        let rating_floor = p.rating_floor.unwrap_or(default_floor);
        if !(0.0..=1.0).contains(&rating_floor) {
            return Err(invalid("policy.rating_floor must lie in [0, 1]"));
        }
        let batch_period = match p.batch_period.or(default_batch) {
            Some(v) if v.is_infinite() && v > 0.0 => None,
            Some(v) => Some(positive_secs(v, "batch_period")?),
            None => None,
        };
        let thresholds = p.thresholds.clone().unwrap_or_default();
        thresholds.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(Policy {
            placement: self.placement.unwrap_or(default_placement),
            weights,
            hysteresis,
            replicas: p.replicas.unwrap_or(default_r),
            rating_floor,
            batch_period,
            rebuild_delay: secs(p.rebuild_delay.unwrap_or(1.0), "rebuild_delay")?,
            heartbeat_period: positive_secs(p.heartbeat_period.unwrap_or(10.0), "heartbeat_period")?,
            migration_period: positive_secs(p.migration_period.unwrap_or(10.0), "migration_period")?,
            provision_period: positive_secs(p.provision_period.unwrap_or(10.0), "provision_period")?,
            service_time: secs(p.service_time.unwrap_or(0.05), "service_time")?,
            max_migrations: p.max_migrations.unwrap_or(2),
            horizon: positive_secs(p.horizon.unwrap_or(1e7), "horizon")?,
            thresholds,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overheads {
    /// dispatcher service time charged for placement decisions (s)
    pub scheduling: f64,
    /// input moves of migrated tasks (s)
    pub migration: f64,
    /// node time spent on attempts superseded by a winning replica (s)
    pub replication: f64,
    /// from a job's last task to the end of its aggregation (s)
    pub aggregation: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub migrations: u64,
    pub replicas: u64,
    pub faults: u64,
    pub recoveries: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub part: Part,
    pub seed: u64,
    /// seconds
    pub makespan: f64,
    /// false if the horizon was reached with work outstanding
    pub complete: bool,
    pub overheads: Overheads,
    pub counts: Counts,
    /// completion time of each batch job (s)
    pub job_completion: BTreeMap<String, f64>,
    pub trace_path: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub e_vs_b: f64,
    pub f_vs_a: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub good_result: bool,
    pub best_result: bool,
    pub deltas: Deltas,
}

fn find(reports: &[RunReport], part: Part) -> Result<&RunReport, ScenarioError> {
    reports.iter().find(|r| r.part == part).ok_or(ScenarioError::IncompleteLadder(part))
}

/// Good Result: E beats B. Best Result: F beats A. Both on makespan.
pub fn classify(reports: &[RunReport]) -> Result<Classification, ScenarioError> {
    let [a, b, _, _, e, f] = Part::ALL.map(|p| find(reports, p));
    let (a, b, e, f) = (a?, b?, e?, f?);
    for p in [Part::C, Part::D] {
        find(reports, p)?;
    }
    Ok(Classification {
        good_result: e.makespan < b.makespan,
        best_result: f.makespan < a.makespan,
        deltas: Deltas { e_vs_b: e.makespan - b.makespan, f_vs_a: f.makespan - a.makespan },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub runs: Vec<RunReport>,
    pub classification: Classification,
}

/// Loads the environment and workload files named by `config`.
pub fn load_inputs(config: &ScenarioConfig) -> Result<(EnvironmentSpec, WorkloadSpec), ScenarioError> {
    let env_path = config.environment.as_ref().ok_or_else(|| invalid("no environment file given"))?;
    let wl_path = config.workload.as_ref().ok_or_else(|| invalid("no workload file given"))?;
    Ok((EnvironmentSpec::load(env_path)?, WorkloadSpec::load(wl_path)?))
}

/// Builds the environment and draws the workload for `config.seed`.
pub fn prepare(
    config: &ScenarioConfig,
    env_spec: &EnvironmentSpec,
    wl_spec: &WorkloadSpec,
) -> Result<(Environment, Workload), ScenarioError> {
    let env = build_environment(env_spec)?;
    let workload = generate_workload(wl_spec, &mut rng_stream(config.seed, "workload"))?;
    Ok((env, workload))
}

/// Runs one scenario on in-memory inputs.
pub fn run_with(
    config: &ScenarioConfig,
    env_spec: &EnvironmentSpec,
    wl_spec: &WorkloadSpec,
) -> Result<RunOutcome, ScenarioError> {
    let (env, workload) = prepare(config, env_spec, wl_spec)?;
    simulate(config, env, workload)
}

/// Runs one scenario from its files, optionally writing the JSON-Lines trace.
pub fn run_scenario(config: &ScenarioConfig, trace: Option<&Path>) -> Result<RunReport, ScenarioError> {
    let (env_spec, wl_spec) = load_inputs(config)?;
    let outcome = run_with(config, &env_spec, &wl_spec)?;
    finish_run(outcome, trace)
}

fn finish_run(outcome: RunOutcome, trace: Option<&Path>) -> Result<RunReport, ScenarioError> {
    let mut report = outcome.report;
    if let Some(path) = trace {
        let file = std::fs::File::create(path).map_err(|source| io_err(path, source))?;
        crate::views::write_trace(&outcome.trace, std::io::BufWriter::new(file)).map_err(|source| io_err(path, source))?;
        report.trace_path = Some(path.display().to_string());
    }
    Ok(report)
}

fn io_err(path: &Path, source: std::io::Error) -> ScenarioError {
    ScenarioError::Io { path: path.display().to_string(), source }
}

/// Trace file of one ladder part: `trace.jsonl` becomes `trace.e.jsonl`.
pub fn ladder_trace_path(base: &Path, part: Part) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{part}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{part}"),
    };
    base.with_file_name(name)
}

/// Runs parts A to F on in-memory inputs with a shared seed. Runs are
/// independent and execute on separate threads.
pub fn run_ladder_with(
    base: &ScenarioConfig,
    env_spec: &EnvironmentSpec,
    wl_spec: &WorkloadSpec,
) -> Result<Vec<RunOutcome>, ScenarioError> {
    std::thread::scope(|s| {
        let handles: Vec<_> = Part::ALL
            .iter()
            .map(|&part| {
                let cfg = ScenarioConfig { part, ..base.clone() };
                s.spawn(move || run_with(&cfg, env_spec, wl_spec))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
    })
}

pub fn run_ladder(base: &ScenarioConfig, trace: Option<&Path>) -> Result<LadderReport, ScenarioError> {
    let (env_spec, wl_spec) = load_inputs(base)?;
    let outcomes = run_ladder_with(base, &env_spec, &wl_spec)?;
    let runs = outcomes
        .into_iter()
        .map(|o| {
            let path = trace.map(|t| ladder_trace_path(t, o.report.part));
            finish_run(o, path.as_deref())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let classification = classify(&runs)?;
    Ok(LadderReport { runs, classification })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Column order of the CSV export.
pub const CSV_COLUMNS: [&str; 13] = [
    "part",
    "seed",
    "makespan",
    "complete",
    "scheduling",
    "migration",
    "replication",
    "aggregation",
    "migrations",
    "replicas",
    "faults",
    "recoveries",
    "trace",
];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv<W: Write>(reports: &[RunReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.part,
            r.seed,
            r.makespan,
            r.complete,
            r.overheads.scheduling,
            r.overheads.migration,
            r.overheads.replication,
            r.overheads.aggregation,
            r.counts.migrations,
            r.counts.replicas,
            r.counts.faults,
            r.counts.recoveries,
            csv_field(r.trace_path.as_deref().unwrap_or("")),
        )?;
    }
    out.flush()
}

fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>) -> Result<(), ScenarioError> {
    let file = std::fs::File::create(path).map_err(|source| io_err(path, source))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|source| io_err(path, source))
}

pub fn export_report(report: &RunReport, path: &Path, format: ReportFormat) -> Result<(), ScenarioError> {
    write_file(path, |w| match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut *w, report)?;
            w.write_all(b"\n")
        }
        ReportFormat::Csv => write_csv(std::slice::from_ref(report), w),
    })
}

pub fn export_ladder(ladder: &LadderReport, path: &Path, format: ReportFormat) -> Result<(), ScenarioError> {
    write_file(path, |w| match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut *w, ladder)?;
            w.write_all(b"\n")
        }
        ReportFormat::Csv => write_csv(&ladder.runs, w),
    })
}
