//! The discrete-event loop that drives environment, workload, views and
//! decision engine through one scenario run.

use std::collections::{BTreeMap, VecDeque};

use super::{invalid, Counts, Overheads, Policy, RunReport, ScenarioConfig, ScenarioError, Toggles};
use crate::dispatcher::{
    aggregation_task, estimate_with_wait, place, place_aggregation, plan_replicas, provision_cloud, rate_node,
    should_migrate, JobProgress, MigrationDecision, PlacementPolicy, ProvisionAction, RoundRobin, TimeEstimate,
};
use crate::environment::{next_churn_transition, Availability, Environment, Location, NodeClass};
use crate::kernel::{rng_stream, EventId, RngStream, SimDuration, SimTime, Simulation};
use crate::views::{EnvSnapshot, LiveNode, LogKind, LogRecord, MonitoringViews, Payload};
use crate::workload::{
    batch_to_task, Batcher, InputSource, JobSpec, MicroBatch, StreamEvent, StreamSourceSpec, TaskOrigin, TaskSpec,
    Workload,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Timer {
    DispatchRound,
    DispatchDone,
    WindowFlush(usize),
    StreamEnd(usize),
    Heartbeat,
    MigrationCheck,
    ProvisionCheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ev {
    NodeUp(usize),
    NodeDown(usize),
    TaskFinish(u64),
    BatchViewRebuild,
    StreamEvent { source: usize, idx: usize },
    Timer(Timer),
}

/// One micro-batch as it went through the system.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub source_id: String,
    pub seq: u64,
    pub task_id: String,
    pub event_ids: Vec<u64>,
    pub first_event: SimTime,
    pub last_event: SimTime,
    pub created_at: SimTime,
    pub finished_at: Option<SimTime>,
}

/// First placement and completion of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub id: String,
    pub job_id: String,
    pub origin: TaskOrigin,
    pub released_at: SimTime,
    pub placed_at: Option<SimTime>,
    pub estimate: Option<TimeEstimate>,
    pub finished_at: Option<SimTime>,
    pub node: Option<String>,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: Vec<LogRecord>,
    pub batches: Vec<BatchRecord>,
    pub tasks: Vec<TaskRecord>,
    pub makespan: SimTime,
    /// exact totals behind the report's overheads
    pub scheduling_charged: SimDuration,
    pub migration_charged: SimDuration,
    pub replication_charged: SimDuration,
    pub aggregation_charged: SimDuration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Pending,
    Placed,
    Done,
}

struct TaskRun {
    spec: TaskSpec,
    job: Option<usize>,
    batch: Option<usize>,
    released_at: SimTime,
    status: Status,
    /// live attempts; the first is the primary
    live: Vec<u64>,
    migrations: u32,
    placed_at: Option<SimTime>,
    estimate: Option<TimeEstimate>,
    finished_at: Option<SimTime>,
    node: Option<usize>,
}

struct Attempt {
    task: usize,
    node: usize,
    service: SimDuration,
    started: Option<SimTime>,
    finish_ev: Option<EventId>,
}

#[derive(Default)]
struct NodeRun {
    queue: VecDeque<u64>,
    running: Option<u64>,
}

struct JobRun {
    spec: JobSpec,
    tasks: Vec<usize>,
    done: usize,
    durations: Vec<SimDuration>,
    last_finish: SimTime,
    completed_at: Option<SimTime>,
    burst: bool,
}

struct StreamRun {
    spec: StreamSourceSpec,
    batcher: Batcher,
    arrivals: Vec<SimTime>,
    timer: Option<EventId>,
    seq: u64,
    ended: bool,
}

enum Round {
    Idle,
    Scheduled,
    Busy(Vec<usize>),
}

struct Runner {
    toggles: Toggles,
    policy: Policy,
    env: Environment,
    views: MonitoringViews,
    sim: Simulation<Ev>,
    rr: RoundRobin,
    churn_rng: Vec<Option<RngStream>>,
    nodes: Vec<NodeRun>,
    attempts: Vec<Attempt>,
    tasks: Vec<TaskRun>,
    jobs: Vec<JobRun>,
    streams: Vec<StreamRun>,
    batches: Vec<BatchRecord>,
    pending: VecDeque<usize>,
    round: Round,
    open_stream_tasks: usize,
    last_completion: SimTime,
    counts: Counts,
    scheduling: SimDuration,
    migration: SimDuration,
    replication: SimDuration,
    aggregation: SimDuration,
}

fn check_location(env: &Environment, loc: &Location, what: &str) -> Result<(), ScenarioError> {
    match loc {
        Location::Node(id) if env.node(id).is_none() => {
            Err(invalid(format!("{what} refers to unknown node `{id}`")))
        }
        _ => Ok(()),
    }
}

fn validate_workload(env: &Environment, workload: &Workload) -> Result<(), ScenarioError> {
    for job in &workload.jobs {
        for t in &job.tasks {
            if let InputSource::At(loc) = &t.input_location {
                check_location(env, loc, &format!("input of task `{}`", t.id))?;
            }
            if let Some(loc) = &t.output_destination {
                check_location(env, loc, &format!("output of task `{}`", t.id))?;
            }
        }
    }
    Ok(())
}

/// Runs one scenario to completion (or to the horizon).
pub fn simulate(config: &ScenarioConfig, env: Environment, workload: Workload) -> Result<RunOutcome, ScenarioError> {
    validate_workload(&env, &workload)?;
    let policy = config.resolve_policy(&env)?;
    let toggles = config.toggles();
    let mut runner = Runner::new(config.seed, toggles, policy, env, workload)?;
    runner.run();
    Ok(runner.finish(config))
}

impl Runner {
    fn new(
        seed: u64,
        toggles: Toggles,
        policy: Policy,
        env: Environment,
        workload: Workload,
    ) -> Result<Self, ScenarioError> {
        let ids: Vec<String> = env.nodes().iter().map(|n| n.id.clone()).collect();
        let views = MonitoringViews::new(ids.clone(), policy.rebuild_delay);
        let churn_rng = env
            .nodes()
            .iter()
            .map(|n| (toggles.churn && n.class == NodeClass::Grid).then(|| rng_stream(seed, &format!("churn:{}", n.id))))
            .collect();
        let has_grid = env.nodes().iter().any(|n| n.class == NodeClass::Grid);
        let mut r = Runner {
            toggles,
            policy,
            views,
            sim: Simulation::new(),
            rr: RoundRobin::default(),
            churn_rng,
            nodes: ids.iter().map(|_| NodeRun::default()).collect(),
            env,
            attempts: Vec::new(),
            tasks: Vec::new(),
            jobs: Vec::new(),
            streams: Vec::new(),
            batches: Vec::new(),
            pending: VecDeque::new(),
            round: Round::Idle,
            open_stream_tasks: 0,
            last_completion: SimTime::ZERO,
            counts: Counts::default(),
            scheduling: SimDuration::ZERO,
            migration: SimDuration::ZERO,
            replication: SimDuration::ZERO,
            aggregation: SimDuration::ZERO,
        };

        for id in &ids {
            r.log(SimTime::ZERO, id.clone(), LogKind::NodeUp, Payload::Empty {});
        }
        for i in 0..ids.len() {
            r.schedule_churn(i, SimTime::ZERO, Availability::Up);
        }
        for (s, spec) in workload.streams.into_iter().enumerate() {
            let arrivals = spec.arrivals(&mut rng_stream(seed, &format!("stream:{}", spec.id)));
            let batcher = Batcher::new(&spec.id, &spec.policy, spec.start_time())?;
            for (idx, at) in arrivals.iter().enumerate() {
                r.at(Ev::StreamEvent { source: s, idx }, *at);
            }
            let timer = batcher.timer_deadline().map(|t| r.at(Ev::Timer(Timer::WindowFlush(s)), t));
            r.at(Ev::Timer(Timer::StreamEnd(s)), spec.end_time());
            r.streams.push(StreamRun { spec, batcher, arrivals, timer, seq: 0, ended: false });
        }
        for job in workload.jobs {
            let j = r.jobs.len();
            let mut idx = Vec::with_capacity(job.tasks.len());
            for t in &job.tasks {
                idx.push(r.add_task(t.clone(), Some(j), None, SimTime::ZERO));
            }
            r.jobs.push(JobRun {
                tasks: idx,
                done: 0,
                durations: Vec::new(),
                last_finish: SimTime::ZERO,
                completed_at: None,
                burst: !toggles.cloud_burst || !has_grid,
                spec: job,
            });
        }
        // empty jobs are complete on release
        for j in 0..r.jobs.len() {
            if r.jobs[j].tasks.is_empty() {
                r.jobs[j].completed_at = Some(SimTime::ZERO);
            }
        }

        r.request_round(SimTime::ZERO);
        r.at(Ev::Timer(Timer::Heartbeat), SimTime::ZERO + r.policy.heartbeat_period);
        if let Some(p) = r.policy.batch_period {
            r.at(Ev::BatchViewRebuild, SimTime::ZERO + p);
        }
        if toggles.migration {
            r.at(Ev::Timer(Timer::MigrationCheck), SimTime::ZERO + r.policy.migration_period);
        }
        if r.jobs.iter().any(|j| !j.burst) {
            r.at(Ev::Timer(Timer::ProvisionCheck), SimTime::ZERO + r.policy.provision_period);
        }
        Ok(r)
    }

    fn at(&mut self, ev: Ev, t: SimTime) -> EventId {
        self.sim.schedule(ev, t).expect("events are never scheduled in the past")
    }

    fn log(&mut self, at: SimTime, subject: String, kind: LogKind, payload: Payload) {
        self.views.append(LogRecord::new(at, subject, kind, payload)).expect("log is appended in time order");
    }

    fn node_id(&self, n: usize) -> &str {
        &self.env.nodes()[n].id
    }

    fn node_index(&self, id: &str) -> usize {
        self.env.nodes().iter().position(|n| n.id == id).expect("known node")
    }

    fn schedule_churn(&mut self, n: usize, from: SimTime, current: Availability) {
        let Some(rng) = self.churn_rng[n].as_mut() else { return };
        let node = &self.env.nodes()[n];
        let tr = next_churn_transition(node, self.env.churn_mode(), rng, from, current).expect("grid node");
        let ev = match tr.state {
            Availability::Up => Ev::NodeUp(n),
            Availability::Down => Ev::NodeDown(n),
        };
        self.at(ev, tr.at);
    }

    fn add_task(&mut self, spec: TaskSpec, job: Option<usize>, batch: Option<usize>, now: SimTime) -> usize {
        let i = self.tasks.len();
        self.tasks.push(TaskRun {
            spec,
            job,
            batch,
            released_at: now,
            status: Status::Pending,
            live: Vec::new(),
            migrations: 0,
            placed_at: None,
            estimate: None,
            finished_at: None,
            node: None,
        });
        self.pending.push_back(i);
        i
    }

    fn all_done(&self) -> bool {
        self.jobs.iter().all(|j| j.completed_at.is_some())
            && self.streams.iter().all(|s| s.ended)
            && self.open_stream_tasks == 0
    }

    fn run(&mut self) {
        let horizon = SimTime::ZERO + self.policy.horizon;
        while !self.all_done() {
            let Some(f) = self.sim.pop_until(horizon) else { break };
            let now = f.at;
            match f.payload {
                Ev::NodeUp(n) => self.on_node_up(n, now),
                Ev::NodeDown(n) => self.on_node_down(n, now),
                Ev::TaskFinish(a) => self.on_finish(a, now),
                Ev::BatchViewRebuild => {
                    self.views.rebuild_batch_view(now);
                    let p = self.policy.batch_period.expect("rebuilds are periodic");
                    self.at(Ev::BatchViewRebuild, now + p);
                }
                Ev::StreamEvent { source, idx } => self.on_stream_event(source, idx, now),
                Ev::Timer(t) => self.on_timer(t, now),
            }
        }
    }

    fn on_timer(&mut self, t: Timer, now: SimTime) {
        match t {
            Timer::DispatchRound => self.on_round(now),
            Timer::DispatchDone => self.on_round_done(now),
            Timer::WindowFlush(s) => {
                self.streams[s].timer = None;
                let batch = self.streams[s].batcher.on_window_timer(now);
                self.rearm_window(s);
                if let Some(b) = batch {
                    self.release_batch(s, b, now);
                }
            }
            Timer::StreamEnd(s) => {
                if let Some(id) = self.streams[s].timer.take() {
                    self.sim.cancel(id);
                }
                self.streams[s].ended = true;
                if let Some(b) = self.streams[s].batcher.drain(now) {
                    self.release_batch(s, b, now);
                }
            }
            Timer::Heartbeat => {
                for n in 0..self.nodes.len() {
                    if self.env.is_up(self.node_id(n)) {
                        let id = self.node_id(n).to_string();
                        self.log(now, id, LogKind::Heartbeat, Payload::Empty {});
                    }
                }
                self.at(Ev::Timer(Timer::Heartbeat), now + self.policy.heartbeat_period);
            }
            Timer::MigrationCheck => {
                self.migration_check(now);
                self.at(Ev::Timer(Timer::MigrationCheck), now + self.policy.migration_period);
            }
            Timer::ProvisionCheck => {
                self.provision_check(now);
                if self.jobs.iter().any(|j| !j.burst && j.completed_at.is_none()) {
                    self.at(Ev::Timer(Timer::ProvisionCheck), now + self.policy.provision_period);
                }
            }
        }
    }

    // ---- streams

    fn rearm_window(&mut self, s: usize) {
        if let Some(old) = self.streams[s].timer.take() {
            self.sim.cancel(old);
        }
        if let Some(t) = self.streams[s].batcher.timer_deadline() {
            self.streams[s].timer = Some(self.at(Ev::Timer(Timer::WindowFlush(s)), t));
        }
    }

    fn on_stream_event(&mut self, s: usize, idx: usize, now: SimTime) {
        let stream = &mut self.streams[s];
        let event = StreamEvent { id: idx as u64, source_id: stream.spec.id.clone(), at: stream.arrivals[idx] };
        if let Some(b) = stream.batcher.offer_event(event, now) {
            self.rearm_window(s);
            self.release_batch(s, b, now);
        }
    }

    fn release_batch(&mut self, s: usize, batch: MicroBatch, now: SimTime) {
        let stream = &mut self.streams[s];
        let seq = stream.seq;
        stream.seq += 1;
        let spec = batch_to_task(&batch, &stream.spec, seq).expect("flushed batches are non-empty");
        let b = self.batches.len();
        self.batches.push(BatchRecord {
            source_id: batch.source_id.clone(),
            seq,
            task_id: spec.id.clone(),
            event_ids: batch.events.iter().map(|e| e.id).collect(),
            first_event: batch.events.first().expect("non-empty").at,
            last_event: batch.events.last().expect("non-empty").at,
            created_at: batch.created_at,
            finished_at: None,
        });
        self.open_stream_tasks += 1;
        self.add_task(spec, None, Some(b), now);
        self.request_round(now);
    }

    // ---- placement

    fn cloud_restricted(&self, t: usize) -> bool {
        self.tasks[t].job.is_some_and(|j| !self.jobs[j].burst)
    }

    fn candidates(&self, t: usize) -> Vec<String> {
        let restricted = self.cloud_restricted(t);
        self.env
            .nodes()
            .iter()
            .filter(|n| self.env.is_up(&n.id) && !(restricted && n.class == NodeClass::Cloud))
            .map(|n| n.id.clone())
            .collect()
    }

    fn request_round(&mut self, now: SimTime) {
        if matches!(self.round, Round::Idle) && !self.pending.is_empty() {
            self.round = Round::Scheduled;
            self.at(Ev::Timer(Timer::DispatchRound), now);
        }
    }

    /// Takes every pending task that has somewhere to go and charges the
    /// dispatcher's service time for the whole round up front.
    fn on_round(&mut self, now: SimTime) {
        let pending = std::mem::take(&mut self.pending);
        let (ready, waiting): (Vec<usize>, Vec<usize>) =
            pending.into_iter().partition(|&t| !self.candidates(t).is_empty());
        self.pending = waiting.into();
        if ready.is_empty() {
            self.round = Round::Idle;
            return;
        }
        let charge = if self.toggles.scheduling {
            self.policy.service_time.saturating_mul(ready.len() as u64)
        } else {
            SimDuration::ZERO
        };
        self.scheduling += charge;
        if charge.is_zero() {
            self.place_round(ready, now);
            self.round = Round::Idle;
            self.request_round(now);
        } else {
            self.round = Round::Busy(ready);
            self.at(Ev::Timer(Timer::DispatchDone), now + charge);
        }
    }

    fn on_round_done(&mut self, now: SimTime) {
        let Round::Busy(ready) = std::mem::replace(&mut self.round, Round::Idle) else {
            unreachable!("dispatch completion without a busy round")
        };
        self.place_round(ready, now);
        self.request_round(now);
    }

    fn live_node(&self, n: usize, now: SimTime) -> LiveNode {
        LiveNode {
            up: self.env.is_up(self.node_id(n)),
            queue_len: self.nodes[n].queue.len() + usize::from(self.nodes[n].running.is_some()),
            backlog: self.backlog(n, now),
        }
    }

    fn snapshot(&mut self, now: SimTime) -> EnvSnapshot {
        let stats = self.views.snapshot(now);
        let live = (0..self.nodes.len()).map(|n| (self.node_id(n).to_string(), self.live_node(n, now))).collect();
        EnvSnapshot { stats, live }
    }

    fn refresh(&self, snap: &mut EnvSnapshot, n: usize, now: SimTime) {
        snap.live.insert(self.node_id(n).to_string(), self.live_node(n, now));
    }

    fn place_round(&mut self, ready: Vec<usize>, now: SimTime) {
        let mut snap = self.snapshot(now);
        let placement_policy = PlacementPolicy {
            mode: self.policy.placement,
            weights: self.policy.weights,
            rating_floor: self.policy.rating_floor,
        };
        for t in ready {
            let cands = self.candidates(t);
            if cands.is_empty() {
                self.pending.push_back(t);
                continue;
            }
            let spec = &self.tasks[t].spec;
            let placed = if spec.origin == TaskOrigin::Aggregation {
                place_aggregation(spec, &self.env, &snap, &cands, &self.policy.weights)
            } else {
                place(std::slice::from_ref(spec), &self.env, &snap, &cands, &placement_policy, &mut self.rr)
                    .map(|mut v| v.remove(0))
            };
            let placement = placed.expect("candidates are non-empty");
            let n = self.node_index(&placement.node_id);
            if spec.origin == TaskOrigin::Aggregation {
                let (partials, task_id) = match &spec.input_location {
                    InputSource::Partials(p) => (p.len(), spec.id.clone()),
                    InputSource::At(_) => (0, spec.id.clone()),
                };
                let est = &placement.estimate;
                self.log(
                    now,
                    task_id,
                    LogKind::Aggregate,
                    Payload::Aggregate {
                        node: placement.node_id.clone(),
                        partials,
                        gather_time: est.transfer_in.as_secs(),
                        compute_time: est.compute.as_secs(),
                    },
                );
            }
            let task = &mut self.tasks[t];
            task.status = Status::Placed;
            if task.placed_at.is_none() {
                task.placed_at = Some(now);
                task.estimate = Some(placement.estimate.clone());
            }
            self.start_attempt(t, n, placement.estimate.service(), now);
            self.refresh(&mut snap, n, now);

            if self.toggles.replication && self.policy.replicas > 0 {
                let replicas =
                    plan_replicas(&placement.node_id, &self.env, &snap, &cands, self.policy.replicas, &self.policy.weights);
                if !replicas.is_empty() {
                    let primary_rating = rate_node(&snap, &self.env, &placement.node_id, &self.policy.weights).score;
                    for id in &replicas {
                        let m = self.node_index(id);
                        let service = estimate_with_wait(&self.tasks[t].spec, &self.env, id, SimDuration::ZERO).service();
                        self.start_attempt(t, m, service, now);
                        self.refresh(&mut snap, m, now);
                    }
                    self.counts.replicas += replicas.len() as u64;
                    let subject = self.tasks[t].spec.id.clone();
                    self.log(
                        now,
                        subject,
                        LogKind::Replicate,
                        Payload::Replicate { primary: placement.node_id.clone(), replicas, primary_rating },
                    );
                }
            }
        }
    }

    // ---- node execution

    fn backlog(&self, n: usize, now: SimTime) -> SimDuration {
        let node = &self.nodes[n];
        let running = node.running.map_or(SimDuration::ZERO, |a| {
            let at = &self.attempts[a as usize];
            (at.started.expect("running attempt has started") + at.service).saturating_since(now)
        });
        running + node.queue.iter().map(|&a| self.attempts[a as usize].service).sum()
    }

    fn start_attempt(&mut self, t: usize, n: usize, service: SimDuration, now: SimTime) -> u64 {
        let a = self.attempts.len() as u64;
        self.attempts.push(Attempt { task: t, node: n, service, started: None, finish_ev: None });
        self.tasks[t].live.push(a);
        let id = self.node_id(n).to_string();
        self.env.assign(&id, &a.to_string()).expect("known node");
        self.nodes[n].queue.push_back(a);
        self.kick(n, now);
        a
    }

    /// Starts the next queued attempt if the node is idle.
    fn kick(&mut self, n: usize, now: SimTime) {
        if self.nodes[n].running.is_some() {
            return;
        }
        let Some(a) = self.nodes[n].queue.pop_front() else { return };
        self.nodes[n].running = Some(a);
        let service = self.attempts[a as usize].service;
        self.attempts[a as usize].started = Some(now);
        self.attempts[a as usize].finish_ev = Some(self.at(Ev::TaskFinish(a), now + service));
        let subject = self.tasks[self.attempts[a as usize].task].spec.id.clone();
        let node = self.node_id(n).to_string();
        self.log(now, subject, LogKind::TaskStart, Payload::Start { node, attempt: a });
    }

    /// Withdraws a live attempt from its node without restarting the node.
    /// Returns the time it had been running.
    fn withdraw(&mut self, a: u64, now: SimTime) -> SimDuration {
        let n = self.attempts[a as usize].node;
        let id = self.node_id(n).to_string();
        self.env.release(&id, &a.to_string());
        if self.nodes[n].running == Some(a) {
            self.nodes[n].running = None;
            if let Some(ev) = self.attempts[a as usize].finish_ev.take() {
                self.sim.cancel(ev);
            }
            now.saturating_since(self.attempts[a as usize].started.expect("running"))
        } else {
            self.nodes[n].queue.retain(|&q| q != a);
            SimDuration::ZERO
        }
    }

    fn bytes_moved(&self, spec: &TaskSpec, n: usize) -> f64 {
        let here = Location::Node(self.node_id(n).to_string());
        let input = match &spec.input_location {
            InputSource::At(loc) if *loc == here => 0.0,
            InputSource::At(_) => spec.input_size,
            InputSource::Partials(p) => {
                p.iter().filter(|(holder, _)| *holder != self.node_id(n)).map(|(_, b)| b).sum()
            }
        };
        let output = match &spec.output_destination {
            Some(dest) if *dest != here => spec.output_size,
            _ => 0.0,
        };
        input + output
    }

    fn on_finish(&mut self, a: u64, now: SimTime) {
        let (t, n, service) = {
            let at = &self.attempts[a as usize];
            (at.task, at.node, at.service)
        };
        self.nodes[n].running = None;
        self.attempts[a as usize].finish_ev = None;
        let id = self.node_id(n).to_string();
        self.env.release(&id, &a.to_string());

        let losers: Vec<u64> = self.tasks[t].live.iter().copied().filter(|&x| x != a).collect();
        let mut touched = vec![n];
        for &l in &losers {
            let busy = self.withdraw(l, now);
            self.replication += busy;
            touched.push(self.attempts[l as usize].node);
        }
        let spec = self.tasks[t].spec.clone();
        self.log(
            now,
            spec.id.clone(),
            LogKind::TaskFinish,
            Payload::Finish {
                node: id,
                attempt: a,
                class: spec.origin,
                duration_ns: service.as_nanos(),
                bytes_moved: self.bytes_moved(&spec, n),
                cancelled: losers,
            },
        );
        let task = &mut self.tasks[t];
        task.live.clear();
        task.status = Status::Done;
        task.finished_at = Some(now);
        task.node = Some(n);
        self.last_completion = now;
        for m in touched {
            self.kick(m, now);
        }

        if let Some(b) = self.tasks[t].batch {
            self.batches[b].finished_at = Some(now);
            self.open_stream_tasks -= 1;
        }
        if let Some(j) = self.tasks[t].job {
            if spec.origin == TaskOrigin::Aggregation {
                let job = &mut self.jobs[j];
                self.aggregation += now.saturating_since(job.last_finish);
                job.completed_at = Some(now);
            } else {
                self.job_task_done(j, service, now);
            }
        }
    }

    fn job_task_done(&mut self, j: usize, service: SimDuration, now: SimTime) {
        let job = &mut self.jobs[j];
        job.done += 1;
        job.durations.push(service);
        if job.done < job.tasks.len() {
            return;
        }
        job.last_finish = now;
        if !self.toggles.aggregation {
            job.completed_at = Some(now);
            return;
        }
        let partials: Vec<Option<(String, f64)>> = job
            .tasks
            .iter()
            .map(|&t| {
                let task = &self.tasks[t];
                task.node.map(|n| (self.env.nodes()[n].id.clone(), task.spec.output_size))
            })
            .collect();
        let spec = aggregation_task(&self.jobs[j].spec, &partials).expect("all partials exist");
        self.add_task(spec, Some(j), None, now);
        self.request_round(now);
    }

    // ---- churn

    fn on_node_down(&mut self, n: usize, now: SimTime) {
        let id = self.node_id(n).to_string();
        self.env.on_node_down(&id, now).expect("node was up");
        self.log(now, id.clone(), LogKind::NodeDown, Payload::Empty {});
        let mut lost: Vec<u64> = self.nodes[n].running.into_iter().collect();
        lost.extend(self.nodes[n].queue.iter().copied());
        for &a in &lost {
            self.withdraw(a, now);
            let t = self.attempts[a as usize].task;
            self.faults_log(t, a, &id, now);
            self.tasks[t].live.retain(|&x| x != a);
            if self.tasks[t].live.is_empty() && self.tasks[t].status == Status::Placed {
                self.tasks[t].status = Status::Pending;
                self.pending.push_back(t);
                self.counts.recoveries += 1;
            }
        }
        self.schedule_churn(n, now, Availability::Down);
        self.request_round(now);
    }

    fn faults_log(&mut self, t: usize, a: u64, node: &str, now: SimTime) {
        self.counts.faults += 1;
        let subject = self.tasks[t].spec.id.clone();
        self.log(
            now,
            subject,
            LogKind::TaskFail,
            Payload::Fail { node: node.to_string(), attempt: a, reason: "node_down".into() },
        );
    }

    fn on_node_up(&mut self, n: usize, now: SimTime) {
        let id = self.node_id(n).to_string();
        self.env.on_node_up(&id, now).expect("node was down");
        self.log(now, id, LogKind::NodeUp, Payload::Empty {});
        self.schedule_churn(n, now, Availability::Up);
        self.request_round(now);
    }

    // ---- periodic services

    fn remaining(&self, a: u64, now: SimTime) -> SimDuration {
        let at = &self.attempts[a as usize];
        let node = &self.nodes[at.node];
        if node.running == Some(a) {
            return (at.started.expect("running") + at.service).saturating_since(now);
        }
        let running = node.running.map_or(SimDuration::ZERO, |r| {
            let ra = &self.attempts[r as usize];
            (ra.started.expect("running") + ra.service).saturating_since(now)
        });
        let ahead: SimDuration =
            node.queue.iter().take_while(|&&q| q != a).map(|&q| self.attempts[q as usize].service).sum();
        running + ahead + at.service
    }

    fn migration_check(&mut self, now: SimTime) {
        let mut snap = self.snapshot(now);
        for t in 0..self.tasks.len() {
            if self.tasks[t].status != Status::Placed || self.tasks[t].migrations >= self.policy.max_migrations {
                continue;
            }
            let Some(&primary) = self.tasks[t].live.first() else { continue };
            let from = self.attempts[primary as usize].node;
            let from_id = self.node_id(from).to_string();
            let exclude: Vec<String> =
                self.tasks[t].live[1..].iter().map(|&a| self.node_id(self.attempts[a as usize].node).to_string()).collect();
            let cands = self.candidates(t);
            let decision = should_migrate(
                &self.tasks[t].spec,
                &from_id,
                self.remaining(primary, now),
                &self.env,
                &snap,
                &cands,
                &exclude,
                &self.policy.weights,
                self.policy.hysteresis,
            );
            let MigrationDecision::MigrateTo { node_id, alt_total, move_time } = decision else { continue };
            let remaining_current = self.remaining(primary, now);
            self.withdraw(primary, now);
            self.kick(from, now);
            self.tasks[t].live.retain(|&x| x != primary);
            let to = self.node_index(&node_id);
            let service = move_time + estimate_with_wait(&self.tasks[t].spec, &self.env, &node_id, SimDuration::ZERO).service();
            let a = self.start_attempt(t, to, service, now);
            // the moved attempt stays the primary
            let live = &mut self.tasks[t].live;
            live.retain(|&x| x != a);
            live.insert(0, a);
            self.tasks[t].migrations += 1;
            self.counts.migrations += 1;
            self.migration += move_time;
            let subject = self.tasks[t].spec.id.clone();
            self.log(
                now,
                subject,
                LogKind::Migrate,
                Payload::Migrate {
                    from: from_id,
                    to: node_id,
                    remaining_current: remaining_current.as_secs(),
                    alt_total: alt_total.as_secs(),
                    move_time: move_time.as_secs(),
                },
            );
            self.refresh(&mut snap, from, now);
            self.refresh(&mut snap, to, now);
        }
    }

    fn provision_check(&mut self, now: SimTime) {
        let mut fired = false;
        for j in 0..self.jobs.len() {
            let job = &self.jobs[j];
            if job.burst || job.completed_at.is_some() {
                continue;
            }
            let progress = JobProgress {
                released_at: SimTime::ZERO,
                total: job.tasks.len(),
                completed: job.done,
                unassigned: job.tasks.iter().filter(|&&t| self.tasks[t].status == Status::Pending).count(),
                finished_durations: job.durations.clone(),
            };
            if let ProvisionAction::Burst(reason) = provision_cloud(&progress, &self.policy.thresholds, now) {
                self.jobs[j].burst = true;
                fired = true;
                let subject = self.jobs[j].spec.id.clone();
                let reason = serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                self.log(
                    now,
                    subject,
                    LogKind::Provision,
                    Payload::Provision {
                        reason,
                        completed_fraction: progress.completed_fraction(),
                        unassigned_fraction: progress.unassigned_fraction(),
                        duration_cv: progress.duration_cv(),
                    },
                );
            }
        }
        if fired {
            self.request_round(now);
        }
    }

    fn finish(self, config: &ScenarioConfig) -> RunOutcome {
        let complete = self.all_done();
        let job_completion = self
            .jobs
            .iter()
            .filter_map(|j| j.completed_at.map(|t| (j.spec.id.clone(), t.as_secs())))
            .collect::<BTreeMap<_, _>>();
        let tasks = self
            .tasks
            .iter()
            .map(|t| TaskRecord {
                id: t.spec.id.clone(),
                job_id: t.spec.job_id.clone(),
                origin: t.spec.origin,
                released_at: t.released_at,
                placed_at: t.placed_at,
                estimate: t.estimate.clone(),
                finished_at: t.finished_at,
                node: t.node.map(|n| self.env.nodes()[n].id.clone()),
            })
            .collect();
        let report = RunReport {
            part: config.part,
            seed: config.seed,
            makespan: self.last_completion.as_secs(),
            complete,
            overheads: Overheads {
                scheduling: self.scheduling.as_secs(),
                migration: self.migration.as_secs(),
                replication: self.replication.as_secs(),
                aggregation: self.aggregation.as_secs(),
            },
            counts: self.counts,
            job_completion,
            trace_path: None,
        };
        RunOutcome {
            report,
            trace: self.views.log().to_vec(),
            batches: self.batches,
            tasks,
            makespan: self.last_completion,
            scheduling_charged: self.scheduling,
            migration_charged: self.migration,
            replication_charged: self.replication,
            aggregation_charged: self.aggregation,
        }
    }
}
