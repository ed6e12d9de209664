//! Batch jobs, stream sources and the micro-batching that turns streams into
//! schedulable tasks.

use std::path::Path;

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::Location;
use crate::kernel::{RngStream, SimDuration, SimTime};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec at `{path}`: {reason}")]
    InvalidSpec { path: String, reason: String },
    #[error("cannot build a task from an empty micro-batch")]
    EmptyBatch,
    #[error("cannot read workload file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse workload file {path}: {source}")]
    Parse { path: String, source: serde_yaml::Error },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> WorkloadError {
    WorkloadError::InvalidSpec { path: path.into(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrigin {
    Batch,
    MicroBatch,
    Aggregation,
}

/// Where a task reads its input from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    At(Location),
    /// Partial results of a job, gathered in parallel: `(holder node, bytes)`.
    Partials(Vec<(String, f64)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub job_id: String,
    /// flops
    pub compute_cost: f64,
    /// bytes
    pub input_size: f64,
    /// bytes
    pub output_size: f64,
    pub origin: TaskOrigin,
    pub input_location: InputSource,
    /// `None` keeps the output on the executing node (job partials).
    pub output_destination: Option<Location>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: String,
    pub tasks: Vec<TaskSpec>,
    pub aggregation_output_size: f64,
    pub aggregation_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchingMode {
    TimeBased,
    CountBased,
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchingPolicy {
    pub mode: BatchingMode,
    /// seconds; TimeBased and Hybrid
    #[serde(default)]
    pub window: Option<f64>,
    /// events; CountBased and Hybrid
    #[serde(default)]
    pub max_count: Option<usize>,
}

impl BatchingPolicy {
    pub fn time_based(window: f64) -> Self {
        BatchingPolicy { mode: BatchingMode::TimeBased, window: Some(window), max_count: None }
    }

    pub fn count_based(max_count: usize) -> Self {
        BatchingPolicy { mode: BatchingMode::CountBased, window: None, max_count: Some(max_count) }
    }

    pub fn hybrid(window: f64, max_count: usize) -> Self {
        BatchingPolicy { mode: BatchingMode::Hybrid, window: Some(window), max_count: Some(max_count) }
    }

    fn validate(&self, path: &str) -> Result<(Option<SimDuration>, Option<usize>), WorkloadError> {
        let needs_window = matches!(self.mode, BatchingMode::TimeBased | BatchingMode::Hybrid);
        let needs_count = matches!(self.mode, BatchingMode::CountBased | BatchingMode::Hybrid);
        let window = if needs_window {
            match self.window {
                Some(w) if w.is_finite() && w > 0.0 => Some(
                    SimDuration::from_secs(w).map_err(|e| invalid(format!("{path}.window"), e.to_string()))?,
                ),
                other => return Err(invalid(format!("{path}.window"), format!("must be > 0, got {other:?}"))),
            }
        } else {
            None
        };
        let count = if needs_count {
            match self.max_count {
                Some(c) if c >= 1 => Some(c),
                other => return Err(invalid(format!("{path}.max_count"), format!("must be >= 1, got {other:?}"))),
            }
        } else {
            None
        };
        if window.is_some_and(|w| w.is_zero()) {
            return Err(invalid(format!("{path}.window"), "rounds to zero at clock resolution"));
        }
        Ok((window, count))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    #[default]
    Poisson,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSourceSpec {
    pub id: String,
    /// events/s
    pub rate: f64,
    /// bytes
    pub event_size: f64,
    /// flops
    pub cost_per_event: f64,
    /// result bytes per event, shipped to the ingress
    #[serde(default)]
    pub result_size: f64,
    /// emission starts at this time (s)
    #[serde(default)]
    pub start: f64,
    /// emission lasts this long (s)
    pub duration: f64,
    #[serde(default)]
    pub arrivals: ArrivalMode,
    pub policy: BatchingPolicy,
}

impl StreamSourceSpec {
    fn validate(&self, path: &str) -> Result<(), WorkloadError> {
        if self.id.is_empty() {
            return Err(invalid(format!("{path}.id"), "must not be empty"));
        }
        positive(self.rate, format!("{path}.rate"))?;
        positive(self.event_size, format!("{path}.event_size"))?;
        positive(self.cost_per_event, format!("{path}.cost_per_event"))?;
        non_negative(self.result_size, format!("{path}.result_size"))?;
        non_negative(self.start, format!("{path}.start"))?;
        non_negative(self.duration, format!("{path}.duration"))?;
        self.policy.validate(&format!("{path}.policy"))?;
        Ok(())
    }

    pub fn start_time(&self) -> SimTime {
        SimTime::from_secs(self.start).expect("validated start")
    }

    pub fn end_time(&self) -> SimTime {
        SimTime::from_secs(self.start + self.duration).expect("validated duration")
    }

    /// Event arrival times in `[start, start + duration)`.
    pub fn arrivals(&self, rng: &mut RngStream) -> Vec<SimTime> {
        let (start, end) = (self.start, self.start + self.duration);
        let mut out = Vec::new();
        match self.arrivals {
            ArrivalMode::Deterministic => {
                let gap = 1.0 / self.rate;
                let mut k = 0u64;
                loop {
                    let t = start + k as f64 * gap;
                    if t >= end {
                        break;
                    }
                    out.push(SimTime::from_secs(t).expect("arrival fits the clock"));
                    k += 1;
                }
            }
            ArrivalMode::Poisson => {
                let exp = Exp::new(self.rate).expect("positive rate");
                let mut t = start;
                loop {
                    t += exp.sample(rng);
                    if t >= end {
                        break;
                    }
                    out.push(SimTime::from_secs(t).expect("arrival fits the clock"));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub id: u64,
    pub source_id: String,
    pub at: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroBatch {
    pub events: Vec<StreamEvent>,
    pub created_at: SimTime,
    pub source_id: String,
}

/// Per-source buffering state. Time-based and hybrid batchers keep a window
/// timer whose deadline the caller turns into a simulation event; the timer
/// re-arms from every flush.
#[derive(Clone, Debug)]
pub struct Batcher {
    source_id: String,
    mode: BatchingMode,
    window: Option<SimDuration>,
    max_count: Option<usize>,
    buffer: Vec<StreamEvent>,
    next_timer: Option<SimTime>,
}

impl Batcher {
    pub fn new(source_id: &str, policy: &BatchingPolicy, start: SimTime) -> Result<Self, WorkloadError> {
        let (window, max_count) = policy.validate("policy")?;
        Ok(Batcher {
            source_id: source_id.to_string(),
            mode: policy.mode,
            window,
            max_count,
            buffer: Vec::new(),
            next_timer: window.map(|w| start + w),
        })
    }

    pub fn timer_deadline(&self) -> Option<SimTime> {
        self.next_timer
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    fn flush(&mut self, now: SimTime) -> Option<MicroBatch> {
        if self.buffer.is_empty() {
            return None;
        }
        Some(MicroBatch {
            events: std::mem::take(&mut self.buffer),
            created_at: now,
            source_id: self.source_id.clone(),
        })
    }

    pub fn offer_event(&mut self, event: StreamEvent, now: SimTime) -> Option<MicroBatch> {
        debug_assert_eq!(event.at, now, "events are offered at their own timestamp");
        self.buffer.push(event);
        match (self.mode, self.max_count) {
            (BatchingMode::CountBased | BatchingMode::Hybrid, Some(max)) if self.buffer.len() >= max => {
                if let Some(w) = self.window {
                    self.next_timer = Some(now + w);
                }
                self.flush(now)
            }
            _ => None,
        }
    }

    pub fn on_window_timer(&mut self, now: SimTime) -> Option<MicroBatch> {
        self.next_timer = self.window.map(|w| now + w);
        self.flush(now)
    }

    /// End of stream: flush whatever is buffered and stop the timer.
    pub fn drain(&mut self, now: SimTime) -> Option<MicroBatch> {
        self.next_timer = None;
        self.flush(now)
    }
}

pub fn batch_to_task(batch: &MicroBatch, source: &StreamSourceSpec, seq: u64) -> Result<TaskSpec, WorkloadError> {
    if batch.events.is_empty() {
        return Err(WorkloadError::EmptyBatch);
    }
    let count = batch.events.len() as f64;
    Ok(TaskSpec {
        id: format!("{}/b{seq}", source.id),
        job_id: source.id.clone(),
        compute_cost: count * source.cost_per_event,
        input_size: count * source.event_size,
        output_size: count * source.result_size,
        origin: TaskOrigin::MicroBatch,
        input_location: InputSource::At(Location::Ingress),
        output_destination: Some(Location::Ingress),
    })
}

/// Task compute cost: a fixed value or uniform over `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostSpec {
    Fixed(f64),
    Uniform { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplate {
    pub cost: f64,
    #[serde(default)]
    pub input_size: f64,
    #[serde(default)]
    pub output_size: f64,
    #[serde(default)]
    pub input_location: Option<String>,
    /// `ingress` or a node id; absent keeps the output where it was produced
    #[serde(default)]
    pub output_location: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobEntry {
    pub id: String,
    /// Explicit task list; when absent, `task_count` tasks are drawn from `cost`.
    #[serde(default)]
    pub tasks: Option<Vec<TaskTemplate>>,
    #[serde(default)]
    pub task_count: Option<usize>,
    #[serde(default)]
    pub cost: Option<CostSpec>,
    #[serde(default)]
    pub input_size: f64,
    #[serde(default)]
    pub output_size: f64,
    /// `ingress` or a node id
    #[serde(default)]
    pub input_location: Option<String>,
    #[serde(default)]
    pub output_location: Option<String>,
    #[serde(default)]
    pub aggregation_output_size: f64,
    #[serde(default = "default_aggregation_cost")]
    pub aggregation_cost: f64,
}

fn default_aggregation_cost() -> f64 {
    1e6
}

/// Parsed workload description file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub jobs: Vec<JobEntry>,
    #[serde(default)]
    pub streams: Vec<StreamSourceSpec>,
}

impl WorkloadSpec {
    pub fn from_yaml(text: &str, path: &str) -> Result<Self, WorkloadError> {
        serde_yaml::from_str(text).map_err(|source| WorkloadError::Parse { path: path.to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io { path: p.clone(), source })?;
        Self::from_yaml(&text, &p)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Workload {
    pub jobs: Vec<JobSpec>,
    pub streams: Vec<StreamSourceSpec>,
}

fn positive(v: f64, path: String) -> Result<(), WorkloadError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be a positive number, got {v}")))
    }
}

fn non_negative(v: f64, path: String) -> Result<(), WorkloadError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be non-negative, got {v}")))
    }
}

fn location(raw: Option<&String>) -> Location {
    match raw.map(String::as_str) {
        None | Some("ingress") => Location::Ingress,
        Some(id) => Location::Node(id.to_string()),
    }
}

/// Expands a workload description into concrete jobs. Costs given as ranges
/// are drawn uniformly from `rng`.
pub fn generate_workload(spec: &WorkloadSpec, rng: &mut RngStream) -> Result<Workload, WorkloadError> {
    let mut jobs = Vec::with_capacity(spec.jobs.len());
    let mut seen = std::collections::BTreeSet::new();
    for (j, entry) in spec.jobs.iter().enumerate() {
        let path = format!("jobs[{j}]");
        if entry.id.is_empty() || !seen.insert(entry.id.clone()) {
            return Err(invalid(format!("{path}.id"), format!("missing or duplicate id `{}`", entry.id)));
        }
        non_negative(entry.aggregation_output_size, format!("{path}.aggregation_output_size"))?;
        positive(entry.aggregation_cost, format!("{path}.aggregation_cost"))?;
        let templates: Vec<TaskTemplate> = match (&entry.tasks, entry.task_count, &entry.cost) {
            (Some(list), None, None) => list.clone(),
            (None, Some(n), Some(cost)) => {
                non_negative(entry.input_size, format!("{path}.input_size"))?;
                non_negative(entry.output_size, format!("{path}.output_size"))?;
                (0..n)
                    .map(|_| {
                        let c = match *cost {
                            CostSpec::Fixed(c) => c,
                            CostSpec::Uniform { min, max } => {
                                positive(min, format!("{path}.cost.min"))?;
                                if !(max >= min && max.is_finite()) {
                                    return Err(invalid(format!("{path}.cost.max"), "must be >= min"));
                                }
                                min + (max - min) * rng.uniform()
                            }
                        };
                        Ok(TaskTemplate {
                            cost: c,
                            input_size: entry.input_size,
                            output_size: entry.output_size,
                            input_location: entry.input_location.clone(),
                            output_location: entry.output_location.clone(),
                        })
                    })
                    .collect::<Result<_, _>>()?
            }
            _ => {
                return Err(invalid(path, "give either an explicit `tasks` list or `task_count` with `cost`"));
            }
        };
        if templates.is_empty() {
            return Err(invalid(format!("{path}.tasks"), "a job needs at least one task"));
        }
        let tasks = templates
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let tp = format!("{path}.tasks[{i}]");
                positive(t.cost, format!("{tp}.cost"))?;
                non_negative(t.input_size, format!("{tp}.input_size"))?;
                non_negative(t.output_size, format!("{tp}.output_size"))?;
                Ok(TaskSpec {
                    id: format!("{}/t{i}", entry.id),
                    job_id: entry.id.clone(),
                    compute_cost: t.cost,
                    input_size: t.input_size,
                    output_size: t.output_size,
                    origin: TaskOrigin::Batch,
                    input_location: InputSource::At(location(
                        t.input_location.as_ref().or(entry.input_location.as_ref()),
                    )),
                    output_destination: t
                        .output_location
                        .as_ref()
                        .or(entry.output_location.as_ref())
                        .map(|l| location(Some(l))),
                })
            })
            .collect::<Result<Vec<_>, WorkloadError>>()?;
        jobs.push(JobSpec {
            id: entry.id.clone(),
            tasks,
            aggregation_output_size: entry.aggregation_output_size,
            aggregation_cost: entry.aggregation_cost,
        });
    }
    for (s, source) in spec.streams.iter().enumerate() {
        source.validate(&format!("streams[{s}]"))?;
        if !seen.insert(source.id.clone()) {
            return Err(invalid(format!("streams[{s}].id"), format!("duplicate id `{}`", source.id)));
        }
    }
    Ok(Workload { jobs, streams: spec.streams.clone() })
}
