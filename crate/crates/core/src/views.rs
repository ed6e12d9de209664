//! Lambda-style monitoring: an append-only master log, a periodically rebuilt
//! batch view over a log prefix, an incremental stream view over the tail,
//! and their merge into the snapshot the dispatcher reads.
//!
//! Every aggregate is an integer monoid (counts, nanosecond sums, sums of
//! squares, maxima, signed transition timestamps), so merging the two views
//! is exact and a snapshot always equals a full recomputation.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::Availability;
use crate::kernel::{SimDuration, SimTime};
use crate::workload::TaskOrigin;

#[derive(Debug, Error, PartialEq)]
pub enum ViewError {
    #[error("record at {at} appended after a record at {last}")]
    OutOfOrder { at: SimTime, last: SimTime },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Heartbeat,
    NodeUp,
    NodeDown,
    TaskStart,
    TaskFinish,
    TaskFail,
    Migrate,
    Replicate,
    Aggregate,
    Provision,
}

/// Kind-specific metrics carried by a log record. Times are in seconds
/// except the exact `duration_ns` used for statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Empty {},
    Start {
        node: String,
        attempt: u64,
    },
    Finish {
        node: String,
        attempt: u64,
        class: TaskOrigin,
        duration_ns: u64,
        bytes_moved: f64,
        cancelled: Vec<u64>,
    },
    Fail {
        node: String,
        attempt: u64,
        reason: String,
    },
    Migrate {
        from: String,
        to: String,
        remaining_current: f64,
        alt_total: f64,
        move_time: f64,
    },
    Replicate {
        primary: String,
        replicas: Vec<String>,
        primary_rating: f64,
    },
    Aggregate {
        node: String,
        partials: usize,
        gather_time: f64,
        compute_time: f64,
    },
    Provision {
        reason: String,
        completed_fraction: f64,
        unassigned_fraction: f64,
        duration_cv: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub at: SimTime,
    pub subject: String,
    pub kind: LogKind,
    pub payload: Payload,
}

impl LogRecord {
    pub fn new(at: SimTime, subject: impl Into<String>, kind: LogKind, payload: Payload) -> Self {
        LogRecord { at, subject: subject.into(), kind, payload }
    }

    /// The node whose statistics this record feeds, if any.
    pub fn node(&self) -> Option<&str> {
        match (&self.kind, &self.payload) {
            (LogKind::Heartbeat | LogKind::NodeUp | LogKind::NodeDown, _) => Some(&self.subject),
            (_, Payload::Start { node, .. } | Payload::Finish { node, .. } | Payload::Fail { node, .. }) => {
                Some(node)
            }
            _ => None,
        }
    }
}

/// Mergeable per-node aggregate.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeAgg {
    pub started: u64,
    pub completed: u64,
    pub failed: u64,
    pub heartbeats: u64,
    pub duration_sum: u128,
    pub duration_sq_sum: u128,
    pub duration_max: u64,
    pub first_up: Option<SimTime>,
    /// Σ down timestamps − Σ up timestamps, in ns.
    pub signed_transitions: i128,
    pub last_transition: Option<Availability>,
}

impl NodeAgg {
    fn apply(&mut self, r: &LogRecord) {
        match (&r.kind, &r.payload) {
            (LogKind::TaskStart, _) => self.started += 1,
            (LogKind::TaskFinish, Payload::Finish { duration_ns, .. }) => {
                let d = u128::from(*duration_ns);
                self.completed += 1;
                self.duration_sum += d;
                self.duration_sq_sum += d * d;
                self.duration_max = self.duration_max.max(*duration_ns);
            }
            (LogKind::TaskFail, _) => self.failed += 1,
            (LogKind::Heartbeat, _) => self.heartbeats += 1,
            (LogKind::NodeUp, _) => {
                self.first_up.get_or_insert(r.at);
                self.signed_transitions -= i128::from(r.at.as_nanos());
                self.last_transition = Some(Availability::Up);
            }
            (LogKind::NodeDown, _) => {
                self.signed_transitions += i128::from(r.at.as_nanos());
                self.last_transition = Some(Availability::Down);
            }
            _ => {}
        }
    }

    /// `self` covers an earlier log segment than `later`.
    pub fn merge(&self, later: &NodeAgg) -> NodeAgg {
        NodeAgg {
            started: self.started + later.started,
            completed: self.completed + later.completed,
            failed: self.failed + later.failed,
            heartbeats: self.heartbeats + later.heartbeats,
            duration_sum: self.duration_sum + later.duration_sum,
            duration_sq_sum: self.duration_sq_sum + later.duration_sq_sum,
            duration_max: self.duration_max.max(later.duration_max),
            first_up: self.first_up.or(later.first_up),
            signed_transitions: self.signed_transitions + later.signed_transitions,
            last_transition: later.last_transition.or(self.last_transition),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassAgg {
    pub count: u64,
    pub duration_sum: u128,
}

impl ClassAgg {
    fn merge(&self, later: &ClassAgg) -> ClassAgg {
        ClassAgg { count: self.count + later.count, duration_sum: self.duration_sum + later.duration_sum }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Aggregates {
    nodes: BTreeMap<String, NodeAgg>,
    classes: BTreeMap<TaskOrigin, ClassAgg>,
}

impl Aggregates {
    fn apply(&mut self, r: &LogRecord) {
        if let Some(node) = r.node() {
            self.nodes.entry(node.to_string()).or_default().apply(r);
        }
        if let (LogKind::TaskFinish, Payload::Finish { class, duration_ns, .. }) = (&r.kind, &r.payload) {
            let c = self.classes.entry(*class).or_default();
            c.count += 1;
            c.duration_sum += u128::from(*duration_ns);
        }
    }

    fn fold<'a>(records: impl IntoIterator<Item = &'a LogRecord>) -> Self {
        let mut agg = Aggregates::default();
        for r in records {
            agg.apply(r);
        }
        agg
    }

    fn merge(&self, later: &Aggregates) -> Aggregates {
        let mut nodes = self.nodes.clone();
        for (id, agg) in &later.nodes {
            let merged = nodes.get(id).map_or_else(|| agg.clone(), |early| early.merge(agg));
            nodes.insert(id.clone(), merged);
        }
        let mut classes = self.classes.clone();
        for (class, agg) in &later.classes {
            let merged = classes.get(class).map_or(*agg, |early| early.merge(agg));
            classes.insert(*class, merged);
        }
        Aggregates { nodes, classes }
    }
}

/// Historical aggregate over the first `covered_len` log records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchView {
    pub built_at: SimTime,
    pub covers_until: SimTime,
    pub covered_len: usize,
    aggregates: Aggregates,
}

impl BatchView {
    fn empty() -> Self {
        BatchView { built_at: SimTime::ZERO, covers_until: SimTime::ZERO, covered_len: 0, aggregates: Aggregates::default() }
    }

    pub fn node(&self, id: &str) -> Option<&NodeAgg> {
        self.aggregates.nodes.get(id)
    }

    pub fn completed_total(&self) -> u64 {
        self.aggregates.nodes.values().map(|n| n.completed).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.aggregates.nodes.is_empty() && self.aggregates.classes.is_empty()
    }
}

/// Incremental aggregate over records appended after the visible batch view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamView {
    pub since: SimTime,
    from_index: usize,
    aggregates: Aggregates,
}

impl StreamView {
    pub fn node(&self, id: &str) -> Option<&NodeAgg> {
        self.aggregates.nodes.get(id)
    }
}

/// Derived per-node statistics as the dispatcher sees them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeStats {
    pub started: u64,
    pub completed: u64,
    pub failed: u64,
    pub heartbeats: u64,
    pub duration_sum: SimDuration,
    pub duration_sq_sum: u128,
    pub duration_max: SimDuration,
    /// seconds
    pub mean_duration: Option<f64>,
    pub success_rate: Option<f64>,
    pub uptime: Option<SimDuration>,
    pub availability: Option<f64>,
}

impl NodeStats {
    pub fn from_agg(agg: &NodeAgg, as_of: SimTime) -> Self {
        let mean_duration =
            (agg.completed > 0).then(|| agg.duration_sum as f64 / agg.completed as f64 / 1e9);
        let attempts = agg.completed + agg.failed;
        let success_rate = (attempts > 0).then(|| agg.completed as f64 / attempts as f64);
        let (uptime, availability) = match agg.first_up {
            None => (None, None),
            Some(first) => {
                let open = if agg.last_transition == Some(Availability::Up) { i128::from(as_of.as_nanos()) } else { 0 };
                let up = (agg.signed_transitions + open).max(0) as u64;
                let elapsed = as_of.saturating_since(first).as_nanos();
                let avail = if elapsed == 0 {
                    if agg.last_transition == Some(Availability::Up) { 1.0 } else { 0.0 }
                } else {
                    up as f64 / elapsed as f64
                };
                (Some(SimDuration::from_nanos(up)), Some(avail))
            }
        };
        NodeStats {
            started: agg.started,
            completed: agg.completed,
            failed: agg.failed,
            heartbeats: agg.heartbeats,
            duration_sum: SimDuration::from_nanos(agg.duration_sum as u64),
            duration_sq_sum: agg.duration_sq_sum,
            duration_max: SimDuration::from_nanos(agg.duration_max),
            mean_duration,
            success_rate,
            uptime,
            availability,
        }
    }

    /// History factor used in node rating; optimistic 1.0 without data.
    pub fn reliability(&self) -> f64 {
        self.success_rate.unwrap_or(1.0) * self.availability.unwrap_or(1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub count: u64,
    pub duration_sum: SimDuration,
    pub mean_duration: Option<f64>,
}

impl ClassStats {
    pub fn from_agg(agg: &ClassAgg) -> Self {
        ClassStats {
            count: agg.count,
            duration_sum: SimDuration::from_nanos(agg.duration_sum as u64),
            mean_duration: (agg.count > 0).then(|| agg.duration_sum as f64 / agg.count as f64 / 1e9),
        }
    }
}

/// Log-derived statistics at a point in time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewStats {
    pub as_of: SimTime,
    pub nodes: BTreeMap<String, NodeStats>,
    pub classes: BTreeMap<TaskOrigin, ClassStats>,
}

/// Live, non-historical facts the simulation loop attaches to a snapshot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LiveNode {
    pub up: bool,
    pub queue_len: usize,
    /// Remaining occupancy of everything queued or running on the node.
    pub backlog: SimDuration,
}

/// What the decision engine reads: merged history plus live state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnvSnapshot {
    pub stats: ViewStats,
    pub live: BTreeMap<String, LiveNode>,
}

impl EnvSnapshot {
    pub fn as_of(&self) -> SimTime {
        self.stats.as_of
    }

    pub fn node_stats(&self, id: &str) -> Option<&NodeStats> {
        self.stats.nodes.get(id)
    }

    pub fn is_up(&self, id: &str) -> bool {
        self.live.get(id).map_or(true, |l| l.up)
    }

    pub fn backlog(&self, id: &str) -> SimDuration {
        self.live.get(id).map_or(SimDuration::ZERO, |l| l.backlog)
    }
}

/// Master log plus the batch and stream views over it.
#[derive(Clone, Debug)]
pub struct MonitoringViews {
    log: Vec<LogRecord>,
    node_ids: Vec<String>,
    rebuild_delay: SimDuration,
    batch: BatchView,
    pending: VecDeque<(SimTime, BatchView)>,
    stream: StreamView,
}

impl MonitoringViews {
    pub fn new(node_ids: impl IntoIterator<Item = String>, rebuild_delay: SimDuration) -> Self {
        MonitoringViews {
            log: Vec::new(),
            node_ids: node_ids.into_iter().collect(),
            rebuild_delay,
            batch: BatchView::empty(),
            pending: VecDeque::new(),
            stream: StreamView { since: SimTime::ZERO, from_index: 0, aggregates: Aggregates::default() },
        }
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn batch_view(&self) -> &BatchView {
        &self.batch
    }

    pub fn stream_view(&self) -> &StreamView {
        &self.stream
    }

    pub fn append(&mut self, record: LogRecord) -> Result<(), ViewError> {
        if let Some(last) = self.log.last() {
            if record.at < last.at {
                return Err(ViewError::OutOfOrder { at: record.at, last: last.at });
            }
        }
        self.tick(record.at);
        self.stream.aggregates.apply(&record);
        self.log.push(record);
        Ok(())
    }

    /// Recomputes the batch view from the whole log so far. It becomes
    /// visible to snapshots `rebuild_delay` later.
    pub fn rebuild_batch_view(&mut self, now: SimTime) -> BatchView {
        let view = BatchView {
            built_at: now,
            covers_until: now,
            covered_len: self.log.len(),
            aggregates: Aggregates::fold(&self.log),
        };
        self.pending.push_back((now + self.rebuild_delay, view.clone()));
        self.tick(now);
        view
    }

    /// Makes pending batch views whose delay has elapsed visible, folding the
    /// stream view onto the new boundary.
    pub fn tick(&mut self, now: SimTime) {
        let mut promoted = false;
        while self.pending.front().is_some_and(|(visible_at, _)| *visible_at <= now) {
            let (_, view) = self.pending.pop_front().expect("checked front");
            self.batch = view;
            promoted = true;
        }
        if promoted {
            let from = self.batch.covered_len;
            self.stream = StreamView {
                since: self.batch.covers_until,
                from_index: from,
                aggregates: Aggregates::fold(&self.log[from..]),
            };
        }
    }

    /// Merged statistics as of `as_of`, which must not precede the latest
    /// appended record.
    pub fn snapshot(&mut self, as_of: SimTime) -> ViewStats {
        self.tick(as_of);
        let merged = if self.log.last().is_some_and(|r| r.at > as_of) {
            // historical query: fold the prefix directly
            Aggregates::fold(self.log.iter().take_while(|r| r.at <= as_of))
        } else {
            self.batch.aggregates.merge(&self.stream.aggregates)
        };
        let mut nodes: BTreeMap<String, NodeStats> =
            self.node_ids.iter().map(|id| (id.clone(), NodeStats::from_agg(&NodeAgg::default(), as_of))).collect();
        for (id, agg) in &merged.nodes {
            nodes.insert(id.clone(), NodeStats::from_agg(agg, as_of));
        }
        let classes = merged.classes.iter().map(|(c, a)| (*c, ClassStats::from_agg(a))).collect();
        ViewStats { as_of, nodes, classes }
    }

    pub fn write_trace<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_trace(&self.log, out)
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    at: f64,
    subject: &'a str,
    kind: LogKind,
    payload: &'a Payload,
}

/// JSON-Lines export: one record per line with fields `at` (seconds),
/// `subject`, `kind`, `payload`.
pub fn write_trace<W: Write>(records: &[LogRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        let line = TraceLine { at: r.at.as_secs(), subject: &r.subject, kind: r.kind, payload: &r.payload };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
