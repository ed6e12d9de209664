//! The decision engine: node rating, time estimation, placement, migration,
//! replica planning, aggregation placement and cloud provisioning.
//!
//! Everything here is a pure function of the environment, an immutable
//! snapshot and policy parameters. The simulation loop applies the results.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{transfer_time, Endpoint, Environment, Location, NodeClass, NodeSpec};
use crate::kernel::{SimDuration, SimTime};
use crate::views::EnvSnapshot;
use crate::workload::{InputSource, JobSpec, TaskOrigin, TaskSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("no available node to place task `{0}`")]
    NoAvailableNode(String),
    #[error("job `{0}` still has unfinished tasks")]
    JobIncomplete(String),
    #[error("invalid rating weights: {0}")]
    InvalidWeights(String),
    #[error("invalid provisioning thresholds: {0}")]
    InvalidThresholds(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingWeights {
    pub cpu: f64,
    pub mem: f64,
    pub io: f64,
    pub net: f64,
    pub hist: f64,
}

impl Default for RatingWeights {
    fn default() -> Self {
        RatingWeights { cpu: 0.25, mem: 0.10, io: 0.15, net: 0.25, hist: 0.25 }
    }
}

impl RatingWeights {
    pub fn equal() -> Self {
        RatingWeights { cpu: 0.2, mem: 0.2, io: 0.2, net: 0.2, hist: 0.2 }
    }

    /// Rescales the weights to sum to one.
    pub fn normalized(self) -> Result<Self, DispatchError> {
        let all = [self.cpu, self.mem, self.io, self.net, self.hist];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DispatchError::InvalidWeights(format!("weights must be non-negative, got {self:?}")));
        }
        let sum: f64 = all.iter().sum();
        if sum <= 0.0 {
            return Err(DispatchError::InvalidWeights("weights sum to zero".into()));
        }
        Ok(RatingWeights {
            cpu: self.cpu / sum,
            mem: self.mem / sum,
            io: self.io / sum,
            net: self.net / sum,
            hist: self.hist / sum,
        })
    }
}

/// Normalized rating factors, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingComponents {
    pub cpu: f64,
    pub mem: f64,
    pub io: f64,
    pub net: f64,
    pub hist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub node_id: String,
    pub score: f64,
    pub components: RatingComponents,
}

fn max_of(nodes: &[NodeSpec], f: impl Fn(&NodeSpec) -> f64) -> f64 {
    nodes.iter().map(f).fold(0.0, f64::max)
}

/// Rates a node: capacities normalized by the maximum over all known nodes,
/// plus a history factor (success rate × availability) from the snapshot.
pub fn rate_node(snapshot: &EnvSnapshot, env: &Environment, node_id: &str, weights: &RatingWeights) -> Rating {
    let node = env.node(node_id).expect("rated node is part of the environment");
    let nodes = env.nodes();
    let components = RatingComponents {
        cpu: node.cpu_speed / max_of(nodes, |n| n.cpu_speed),
        mem: node.memory / max_of(nodes, |n| n.memory),
        io: node.io_rate / max_of(nodes, |n| n.io_rate),
        net: node.link_bw / max_of(nodes, |n| n.link_bw),
        hist: snapshot.node_stats(node_id).map_or(1.0, |s| s.reliability()),
    };
    let score = weights.cpu * components.cpu
        + weights.mem * components.mem
        + weights.io * components.io
        + weights.net * components.net
        + weights.hist * components.hist;
    Rating { node_id: node_id.to_string(), score, components }
}

/// Predicted completion time of a task on a node, relative to the decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEstimate {
    pub task_id: String,
    pub node_id: String,
    pub transfer_in: SimDuration,
    pub queue_wait: SimDuration,
    pub compute: SimDuration,
    pub transfer_out: SimDuration,
    pub total: SimDuration,
}

impl TimeEstimate {
    /// Time the node itself is occupied by the task.
    pub fn service(&self) -> SimDuration {
        self.transfer_in + self.compute + self.transfer_out
    }
}

fn endpoint<'a>(env: &'a Environment, loc: &Location) -> &'a Endpoint {
    env.endpoint(loc).unwrap_or_else(|| panic!("unknown data location `{loc}`"))
}

/// Time to bring a task's input to `node`.
pub fn input_transfer(task: &TaskSpec, env: &Environment, node: &Endpoint) -> SimDuration {
    match &task.input_location {
        InputSource::At(loc) => transfer_time(task.input_size, endpoint(env, loc), node),
        InputSource::Partials(parts) => parts
            .iter()
            .map(|(holder, bytes)| transfer_time(*bytes, endpoint(env, &Location::Node(holder.clone())), node))
            .max()
            .unwrap_or(SimDuration::ZERO),
    }
}

/// Compute phase: flops over cpu speed plus reading input and writing output.
pub fn compute_time(task: &TaskSpec, node: &NodeSpec) -> SimDuration {
    let secs = task.compute_cost / node.cpu_speed + task.input_size / node.io_rate + task.output_size / node.io_rate;
    SimDuration::from_secs(secs).expect("compute time fits the clock")
}

fn output_transfer(task: &TaskSpec, env: &Environment, node: &Endpoint) -> SimDuration {
    match &task.output_destination {
        Some(dest) => transfer_time(task.output_size, node, endpoint(env, dest)),
        None => SimDuration::ZERO,
    }
}

/// Estimate with an explicit queue wait; the simulator charges exactly
/// `transfer_in + compute + transfer_out` of node occupancy per attempt.
pub fn estimate_with_wait(task: &TaskSpec, env: &Environment, node_id: &str, queue_wait: SimDuration) -> TimeEstimate {
    let node = env.node(node_id).expect("estimated node is part of the environment");
    let ep = env.node_endpoint(node_id).expect("node has an endpoint");
    let transfer_in = input_transfer(task, env, ep);
    let compute = compute_time(task, node);
    let transfer_out = output_transfer(task, env, ep);
    TimeEstimate {
        task_id: task.id.clone(),
        node_id: node_id.to_string(),
        transfer_in,
        queue_wait,
        compute,
        transfer_out,
        total: transfer_in + queue_wait + compute + transfer_out,
    }
}

pub fn estimate_time(task: &TaskSpec, env: &Environment, node_id: &str, snapshot: &EnvSnapshot) -> TimeEstimate {
    estimate_with_wait(task, env, node_id, snapshot.backlog(node_id))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    /// Round-robin over available nodes in id order.
    #[default]
    Baseline,
    /// Minimum estimated completion among sufficiently rated nodes.
    Smart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub task_id: String,
    pub node_id: String,
    pub decided_at: SimTime,
    pub estimate: TimeEstimate,
    pub replicas: Vec<String>,
}

/// Policy inputs of a placement round.
#[derive(Clone, Debug)]
pub struct PlacementPolicy {
    pub mode: PlacementMode,
    pub weights: RatingWeights,
    pub rating_floor: f64,
}

/// Round-robin position, persistent across placement rounds.
#[derive(Clone, Debug, Default)]
pub struct RoundRobin {
    next: usize,
}

impl RoundRobin {
    fn pick(&mut self, env: &Environment, candidates: &[String]) -> Option<String> {
        let nodes = env.nodes();
        let start = self.next;
        let i = (0..nodes.len()).map(|k| (start + k) % nodes.len()).find(|&i| candidates.contains(&nodes[i].id))?;
        self.next = i + 1;
        Some(nodes[i].id.clone())
    }
}

/// Orders candidates: lower key first, then higher rating, then lower id.
fn better(a: (SimDuration, f64, &str), b: (SimDuration, f64, &str)) -> bool {
    match a.0.cmp(&b.0) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => match a.1.partial_cmp(&b.1) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Less) => false,
            _ => a.2 < b.2,
        },
    }
}

/// Places `tasks` in order on `candidates` (available node ids). Queue waits
/// include the tasks placed earlier in the same round.
pub fn place(
    tasks: &[TaskSpec],
    env: &Environment,
    snapshot: &EnvSnapshot,
    candidates: &[String],
    policy: &PlacementPolicy,
    rr: &mut RoundRobin,
) -> Result<Vec<Placement>, DispatchError> {
    let mut backlog: BTreeMap<&str, SimDuration> =
        candidates.iter().map(|id| (id.as_str(), snapshot.backlog(id))).collect();
    let ratings: BTreeMap<&str, f64> =
        candidates.iter().map(|id| (id.as_str(), rate_node(snapshot, env, id, &policy.weights).score)).collect();
    let eligible: Vec<&String> = {
        let above: Vec<&String> = candidates.iter().filter(|id| ratings[id.as_str()] >= policy.rating_floor).collect();
        if above.is_empty() {
            candidates.iter().collect()
        } else {
            above
        }
    };

    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let node_id = match policy.mode {
            PlacementMode::Baseline => rr.pick(env, candidates),
            PlacementMode::Smart => {
                let mut best: Option<(SimDuration, f64, &str)> = None;
                for id in &eligible {
                    let est = estimate_with_wait(task, env, id, backlog[id.as_str()]);
                    let key = (est.total, ratings[id.as_str()], id.as_str());
                    if best.map_or(true, |b| better(key, b)) {
                        best = Some(key);
                    }
                }
                best.map(|(_, _, id)| id.to_string())
            }
        }
        .ok_or_else(|| DispatchError::NoAvailableNode(task.id.clone()))?;
        let slot = backlog.get_mut(node_id.as_str()).expect("chosen node is a candidate");
        let estimate = estimate_with_wait(task, env, &node_id, *slot);
        *slot += estimate.service();
        out.push(Placement {
            task_id: task.id.clone(),
            node_id,
            decided_at: snapshot.as_of(),
            estimate,
            replicas: Vec::new(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MigrationDecision {
    Stay,
    MigrateTo { node_id: String, alt_total: SimDuration, move_time: SimDuration },
}

/// Moves a task iff its remaining time where it is exceeds the best
/// alternative (estimate there plus moving the input) by more than the
/// hysteresis margin. Nodes in `exclude` (e.g. hosting a replica) are skipped.
pub fn should_migrate(
    task: &TaskSpec,
    current_node: &str,
    remaining_current: SimDuration,
    env: &Environment,
    snapshot: &EnvSnapshot,
    candidates: &[String],
    exclude: &[String],
    weights: &RatingWeights,
    hysteresis: f64,
) -> MigrationDecision {
    let Some(from) = env.node_endpoint(current_node) else {
        return MigrationDecision::Stay;
    };
    let mut best: Option<(SimDuration, f64, &str, SimDuration)> = None;
    for id in candidates {
        if id == current_node || exclude.contains(id) || !snapshot.is_up(id) {
            continue;
        }
        let to = env.node_endpoint(id).expect("candidate is part of the environment");
        let move_time = transfer_time(task.input_size, from, to);
        let alt = estimate_time(task, env, id, snapshot).total + move_time;
        let rating = rate_node(snapshot, env, id, weights).score;
        if best.map_or(true, |b| better((alt, rating, id), (b.0, b.1, b.2))) {
            best = Some((alt, rating, id, move_time));
        }
    }
    match best {
        Some((alt, _, id, move_time)) if remaining_current.as_secs() > alt.as_secs() * (1.0 + hysteresis) => {
            MigrationDecision::MigrateTo { node_id: id.to_string(), alt_total: alt, move_time }
        }
        _ => MigrationDecision::Stay,
    }
}

/// Extra nodes for a task placed on a volatile primary, best rated first.
pub fn plan_replicas(
    primary: &str,
    env: &Environment,
    snapshot: &EnvSnapshot,
    candidates: &[String],
    replicas: usize,
    weights: &RatingWeights,
) -> Vec<String> {
    if env.node(primary).map_or(true, |n| n.class == NodeClass::Cloud) {
        return Vec::new();
    }
    let mut rated: Vec<(f64, &String)> = candidates
        .iter()
        .filter(|id| id.as_str() != primary && snapshot.is_up(id))
        .map(|id| (rate_node(snapshot, env, id, weights).score, id))
        .collect();
    rated.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1)));
    rated.into_iter().take(replicas).map(|(_, id)| id.clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisionThresholds {
    /// Completion threshold: minimum completed fraction at the checkpoint.
    pub completion_c: f64,
    /// Checkpoint as a fraction of the deadline.
    pub checkpoint_frac: f64,
    /// Assignment threshold: maximum unassigned fraction after the grace period.
    pub assignment_a: f64,
    /// seconds
    pub grace: f64,
    /// Coefficient-of-variation threshold on finished task durations.
    pub variance_v: f64,
    /// seconds
    pub deadline: f64,
}

impl Default for ProvisionThresholds {
    fn default() -> Self {
        ProvisionThresholds {
            completion_c: 0.5,
            checkpoint_frac: 0.5,
            assignment_a: 0.5,
            grace: 30.0,
            variance_v: 1.0,
            deadline: 600.0,
        }
    }
}

impl ProvisionThresholds {
    pub fn validate(&self) -> Result<(), DispatchError> {
        let frac = |v: f64| v > 0.0 && v <= 1.0;
        if !frac(self.completion_c) || !frac(self.checkpoint_frac) || !frac(self.assignment_a) {
            return Err(DispatchError::InvalidThresholds("fractions must lie in (0, 1]".into()));
        }
        if !(self.variance_v >= 0.0 && self.grace >= 0.0 && self.deadline > 0.0) {
            return Err(DispatchError::InvalidThresholds(
                "variance_v and grace must be >= 0, deadline > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Progress of one active job, measured from its release.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JobProgress {
    pub released_at: SimTime,
    pub total: usize,
    pub completed: usize,
    pub unassigned: usize,
    pub finished_durations: Vec<SimDuration>,
}

impl JobProgress {
    pub fn completed_fraction(&self) -> f64 {
        self.completed as f64 / self.total.max(1) as f64
    }

    pub fn unassigned_fraction(&self) -> f64 {
        self.unassigned as f64 / self.total.max(1) as f64
    }

    /// Population coefficient of variation of finished durations.
    pub fn duration_cv(&self) -> f64 {
        let n = self.finished_durations.len();
        if n < 2 {
            return 0.0;
        }
        let xs: Vec<f64> = self.finished_durations.iter().map(|d| d.as_secs()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if mean <= 0.0 {
            return 0.0;
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        var.sqrt() / mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BurstReason {
    Completion,
    Assignment,
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProvisionAction {
    None,
    Burst(BurstReason),
}

pub fn provision_cloud(progress: &JobProgress, thresholds: &ProvisionThresholds, now: SimTime) -> ProvisionAction {
    let elapsed = now.saturating_since(progress.released_at).as_secs();
    if elapsed >= thresholds.checkpoint_frac * thresholds.deadline
        && progress.completed_fraction() < thresholds.completion_c
    {
        return ProvisionAction::Burst(BurstReason::Completion);
    }
    if elapsed >= thresholds.grace && progress.unassigned_fraction() > thresholds.assignment_a {
        return ProvisionAction::Burst(BurstReason::Assignment);
    }
    if progress.duration_cv() > thresholds.variance_v {
        return ProvisionAction::Burst(BurstReason::Variance);
    }
    ProvisionAction::None
}

/// Builds the aggregation task of a job from the locations of its partial
/// results (`None` for unfinished tasks).
pub fn aggregation_task(job: &JobSpec, partials: &[Option<(String, f64)>]) -> Result<TaskSpec, DispatchError> {
    let parts: Vec<(String, f64)> = partials
        .iter()
        .map(|p| p.clone().ok_or_else(|| DispatchError::JobIncomplete(job.id.clone())))
        .collect::<Result<_, _>>()?;
    Ok(TaskSpec {
        id: format!("{}/agg", job.id),
        job_id: job.id.clone(),
        compute_cost: job.aggregation_cost,
        input_size: parts.iter().map(|(_, b)| b).sum(),
        output_size: job.aggregation_output_size,
        origin: TaskOrigin::Aggregation,
        input_location: InputSource::Partials(parts),
        output_destination: Some(Location::Ingress),
    })
}

/// Chooses the node minimizing gather time (slowest partial) plus
/// aggregation compute time; ties by rating, then id.
pub fn place_aggregation(
    task: &TaskSpec,
    env: &Environment,
    snapshot: &EnvSnapshot,
    candidates: &[String],
    weights: &RatingWeights,
) -> Result<Placement, DispatchError> {
    let mut best: Option<(SimDuration, f64, &str)> = None;
    for id in candidates {
        let node = env.node(id).ok_or_else(|| DispatchError::UnknownNode(id.clone()))?;
        let ep = env.node_endpoint(id).expect("node endpoint");
        let key = input_transfer(task, env, ep) + compute_time(task, node);
        let rating = rate_node(snapshot, env, id, weights).score;
        if best.map_or(true, |b| better((key, rating, id), b)) {
            best = Some((key, rating, id));
        }
    }
    let (_, _, node_id) = best.ok_or_else(|| DispatchError::NoAvailableNode(task.id.clone()))?;
    Ok(Placement {
        task_id: task.id.clone(),
        node_id: node_id.to_string(),
        decided_at: snapshot.as_of(),
        estimate: estimate_time(task, env, node_id, snapshot),
        replicas: Vec::new(),
    })
}

/// Builds the aggregation task of a finished job and places it.
pub fn plan_aggregation(
    job: &JobSpec,
    partials: &[Option<(String, f64)>],
    env: &Environment,
    snapshot: &EnvSnapshot,
    candidates: &[String],
    weights: &RatingWeights,
) -> Result<(TaskSpec, Placement), DispatchError> {
    let task = aggregation_task(job, partials)?;
    let placement = place_aggregation(&task, env, snapshot, candidates, weights)?;
    Ok((task, placement))
}
