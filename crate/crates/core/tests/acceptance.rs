//! Acceptance suite. Each test checks one criterion and writes a single
//! `PASS`/`FAIL` line to stderr (bypassing output capture) before asserting.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use rand::Rng;

use common::*;
use lambdasim::dispatcher::{place, rate_node, PlacementMode, PlacementPolicy, RatingWeights, RoundRobin};
use lambdasim::environment::{build_environment, ChurnMode, EnvironmentSpec, Location, NodeClass, NodeSpec};
use lambdasim::kernel::{RngStream, SimDuration, SimTime};
use lambdasim::scenarios::{load_inputs, Part, PolicyOverrides, ScenarioConfig, ToggleOverrides};
use lambdasim::views::{
    write_trace, ClassStats, EnvSnapshot, LiveNode, LogKind, LogRecord, MonitoringViews, NodeStats, Payload, ViewStats,
};
use lambdasim::workload::{
    ArrivalMode, BatchingMode, BatchingPolicy, InputSource, StreamSourceSpec, TaskOrigin, TaskSpec, TaskTemplate,
    WorkloadSpec,
};

// Pinned tolerances and sizes.
const VIEW_LOGS: usize = 1000;
const VIEW_MAX_RECORDS: usize = 10_000;
const VIEW_QUERIES: usize = 20;
const ESTIMATOR_INSTANCES: usize = 1000;
const OVERHEAD_INSTANCES: usize = 300;
const MAX_SURVIVAL_NODES: usize = 5;
const MICROBATCH_INSTANCES: usize = 300;
const RATING_INSTANCES: usize = 500;
const BEST_RESULT_REL_TOL: f64 = 1e-6;

fn verdict(criterion: &str, result: Result<String, String>) {
    let line = match &result {
        Ok(detail) => format!("[acceptance] PASS {criterion}: {detail}\n"),
        Err(why) => format!("[acceptance] FAIL {criterion}: {why}\n"),
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(why) = result {
        panic!("{criterion}: {why}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_config() -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/ladder.yaml");
    ScenarioConfig::load(&path).expect("sample ladder config")
}

fn trace_bytes(records: &[LogRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(records, &mut buf).unwrap();
    buf
}

#[test]
fn determinism() {
    let check = || -> Result<String, String> {
        let base = repo_config();
        let (e, w) = load_inputs(&base).map_err(|e| e.to_string())?;
        let mut lines = 0;
        for seed in [1u64, 42, 9001] {
            for part in Part::ALL {
                let cfg = ScenarioConfig { part, seed, ..base.clone() };
                let first = trace_bytes(&run(&cfg, &e, &w).trace);
                let second = trace_bytes(&run(&cfg, &e, &w).trace);
                ensure(first == second, || format!("part {part} seed {seed}: traces differ"))?;
                lines += first.iter().filter(|&&b| b == b'\n').count();
            }
        }
        // the seed must matter, otherwise the check above is vacuous
        let a = trace_bytes(&run(&ScenarioConfig { part: Part::E, seed: 1, ..base.clone() }, &e, &w).trace);
        let b = trace_bytes(&run(&ScenarioConfig { part: Part::E, seed: 2, ..base.clone() }, &e, &w).trace);
        ensure(a != b, || "different seeds gave identical traces".into())?;
        Ok(format!("18 runs repeated byte-identical ({lines} trace lines)"))
    };
    verdict("determinism", check());
}

// ---- view merge

const CLASSES: [TaskOrigin; 3] = [TaskOrigin::Batch, TaskOrigin::MicroBatch, TaskOrigin::Aggregation];

fn random_log(rng: &mut RngStream, nodes: &[String]) -> Vec<LogRecord> {
    let len = rng.gen_range(1..=VIEW_MAX_RECORDS);
    let mut up = vec![false; nodes.len()];
    let mut t = 0u64;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        if rng.gen_bool(0.8) {
            t += rng.gen_range(1..2_000_000_000);
        }
        let at = SimTime::from_nanos(t);
        let k = rng.gen_range(0..nodes.len());
        let node = nodes[k].clone();
        let attempt = i as u64;
        let rec = match rng.gen_range(0..10) {
            0 | 1 => {
                up[k] = !up[k];
                let kind = if up[k] { LogKind::NodeUp } else { LogKind::NodeDown };
                LogRecord::new(at, node, kind, Payload::Empty {})
            }
            2 => LogRecord::new(at, node, LogKind::Heartbeat, Payload::Empty {}),
            3 | 4 => LogRecord::new(at, "t", LogKind::TaskStart, Payload::Start { node, attempt }),
            5 | 6 => LogRecord::new(
                at,
                "t",
                LogKind::TaskFinish,
                Payload::Finish {
                    node,
                    attempt,
                    class: CLASSES[rng.gen_range(0..3)],
                    duration_ns: rng.gen_range(0..1_000_000_000_000),
                    bytes_moved: 0.0,
                    cancelled: vec![],
                },
            ),
            7 => LogRecord::new(at, "t", LogKind::TaskFail, Payload::Fail { node, attempt, reason: "x".into() }),
            8 => LogRecord::new(
                at,
                "t",
                LogKind::Migrate,
                Payload::Migrate { from: node.clone(), to: node, remaining_current: 1.0, alt_total: 0.5, move_time: 0.1 },
            ),
            _ => LogRecord::new(
                at,
                "t",
                LogKind::Replicate,
                Payload::Replicate { primary: node.clone(), replicas: vec![node], primary_rating: 0.5 },
            ),
        };
        out.push(rec);
    }
    out
}

/// Full recomputation by direct filtering and interval walking.
fn oracle(records: &[LogRecord], nodes: &[String], as_of: SimTime) -> ViewStats {
    let mut stats = BTreeMap::new();
    for id in nodes {
        let mut s = NodeStats::default();
        let mut durations: Vec<u64> = Vec::new();
        let mut first_up = None;
        let mut up_since: Option<u64> = None;
        let mut up_total = 0u64;
        for r in records {
            match (&r.kind, &r.payload) {
                (LogKind::TaskStart, Payload::Start { node, .. }) if node == id => s.started += 1,
                (LogKind::TaskFinish, Payload::Finish { node, duration_ns, .. }) if node == id => {
                    durations.push(*duration_ns)
                }
                (LogKind::TaskFail, Payload::Fail { node, .. }) if node == id => s.failed += 1,
                (LogKind::Heartbeat, _) if &r.subject == id => s.heartbeats += 1,
                (LogKind::NodeUp, _) if &r.subject == id => {
                    first_up.get_or_insert(r.at.as_nanos());
                    up_since = Some(r.at.as_nanos());
                }
                (LogKind::NodeDown, _) if &r.subject == id => {
                    up_total += r.at.as_nanos() - up_since.take().expect("alternating availability");
                }
                _ => {}
            }
        }
        s.completed = durations.len() as u64;
        let sum: u128 = durations.iter().map(|&d| u128::from(d)).sum();
        s.duration_sum = SimDuration::from_nanos(sum as u64);
        s.duration_sq_sum = durations.iter().map(|&d| u128::from(d) * u128::from(d)).sum();
        s.duration_max = SimDuration::from_nanos(durations.iter().copied().max().unwrap_or(0));
        s.mean_duration = (s.completed > 0).then(|| sum as f64 / s.completed as f64 / 1e9);
        let attempts = s.completed + s.failed;
        s.success_rate = (attempts > 0).then(|| s.completed as f64 / attempts as f64);
        if let Some(first) = first_up {
            let currently_up = up_since.is_some();
            if let Some(since) = up_since {
                up_total += as_of.as_nanos() - since;
            }
            let elapsed = as_of.as_nanos() - first;
            s.uptime = Some(SimDuration::from_nanos(up_total));
            s.availability = Some(if elapsed == 0 {
                if currently_up { 1.0 } else { 0.0 }
            } else {
                up_total as f64 / elapsed as f64
            });
        }
        stats.insert(id.clone(), s);
    }
    let mut classes = BTreeMap::new();
    for c in CLASSES {
        let ds: Vec<u64> = records
            .iter()
            .filter_map(|r| match (&r.kind, &r.payload) {
                (LogKind::TaskFinish, Payload::Finish { class, duration_ns, .. }) if *class == c => Some(*duration_ns),
                _ => None,
            })
            .collect();
        if !ds.is_empty() {
            let sum: u128 = ds.iter().map(|&d| u128::from(d)).sum();
            classes.insert(
                c,
                ClassStats {
                    count: ds.len() as u64,
                    duration_sum: SimDuration::from_nanos(sum as u64),
                    mean_duration: Some(sum as f64 / ds.len() as f64 / 1e9),
                },
            );
        }
    }
    ViewStats { as_of, nodes: stats, classes }
}

#[test]
fn view_merge_oracle() {
    let check = || -> Result<String, String> {
        let started = std::time::Instant::now();
        let mut rng = RngStream::new(7, "acceptance:views");
        let mut total_records = 0;
        let mut rebuilds = 0;
        for log_no in 0..VIEW_LOGS {
            let nodes: Vec<String> = (0..rng.gen_range(1..=6)).map(|i| format!("n{i}")).collect();
            let log = random_log(&mut rng, &nodes);
            total_records += log.len();
            let delay = SimDuration::from_nanos(rng.gen_range(0..5_000_000_000));
            let mut views = MonitoringViews::new(nodes.clone(), delay);
            let mut query_at: BTreeSet<usize> = BTreeSet::new();
            while query_at.len() < VIEW_QUERIES.min(log.len()) {
                query_at.insert(rng.gen_range(0..log.len()));
            }
            for (i, rec) in log.iter().enumerate() {
                views.append(rec.clone()).map_err(|e| e.to_string())?;
                if rng.gen_bool(0.01) {
                    views.rebuild_batch_view(rec.at);
                    rebuilds += 1;
                }
                if query_at.contains(&i) {
                    let next = log.get(i + 1).map_or(rec.at.as_nanos() + 10_000_000_000, |n| n.at.as_nanos());
                    let as_of = SimTime::from_nanos(rng.gen_range(rec.at.as_nanos()..=next));
                    let got = views.snapshot(as_of);
                    let want = oracle(&log[..=i], &nodes, as_of);
                    ensure(got == want, || format!("log {log_no}, record {i}, as_of {as_of}: snapshot != oracle"))?;
                }
            }
        }
        Ok(format!(
            "{VIEW_LOGS} logs, {total_records} records, {rebuilds} rebuilds, {} queries field-exact in {:.1?}",
            VIEW_LOGS * VIEW_QUERIES,
            started.elapsed()
        ))
    };
    verdict("view-merge oracle", check());
}

// ---- estimator

fn round_ns(secs: f64) -> u64 {
    (secs * 1e9).round() as u64
}

fn random_node(rng: &mut RngStream, id: String) -> NodeSpec {
    let class = if rng.gen_bool(0.5) { NodeClass::Cloud } else { NodeClass::Grid };
    let churn = if class == NodeClass::Grid { 1.0 } else { 0.0 };
    NodeSpec {
        id,
        class,
        cpu_speed: rng.gen_range(1e8..1e10),
        memory: rng.gen_range(1e9..6.4e10),
        io_rate: rng.gen_range(1e7..1e9),
        link_bw: rng.gen_range(1e6..1e9),
        link_latency: rng.gen_range(0.0..0.1),
        mean_up: churn * rng.gen_range(10.0..1000.0),
        mean_down: churn * rng.gen_range(10.0..1000.0),
        cost_rate: 0.0,
    }
}

fn random_location(rng: &mut RngStream, n: usize) -> Option<String> {
    match rng.gen_range(0..3) {
        0 => None,
        1 => Some("ingress".into()),
        _ => Some(format!("n{}", rng.gen_range(0..n))),
    }
}

#[test]
fn estimator_exactness() {
    let check = || -> Result<String, String> {
        let mut rng = RngStream::new(11, "acceptance:estimator");
        for i in 0..ESTIMATOR_INSTANCES {
            let n = rng.gen_range(1..=4);
            let mut e = env((0..n).map(|k| random_node(&mut rng, format!("n{k}"))).collect());
            e.ingress.link_bw = rng.gen_range(1e6..1e10);
            e.ingress.link_latency = rng.gen_range(0.0..0.05);
            let t = TaskTemplate {
                cost: rng.gen_range(0.0..1e12),
                input_size: if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1e9) },
                output_size: if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1e9) },
                input_location: random_location(&mut rng, n),
                output_location: random_location(&mut rng, n),
            };
            let out = run_part(Part::A, i as u64, &e, &jobs(vec![job("j", vec![t.clone()])]));
            let rec = &out.tasks[0];
            let est = rec.estimate.as_ref().ok_or("task was never placed")?;
            let simulated = rec.finished_at.ok_or("task never finished")?.saturating_since(rec.placed_at.unwrap());
            ensure(est.total == simulated, || format!("instance {i}: estimate {} != simulated {}", est.total, simulated))?;

            // independent arithmetic on the raw specs
            let host = e.nodes.iter().find(|x| x.id == est.node_id).unwrap();
            let lat = |loc: &Option<String>| -> u64 {
                match loc.as_deref() {
                    None | Some("ingress") => round_ns(e.ingress.link_latency),
                    Some(id) => round_ns(e.nodes.iter().find(|x| x.id == id).unwrap().link_latency),
                }
            };
            let bw = |loc: &Option<String>| -> f64 {
                match loc.as_deref() {
                    None | Some("ingress") => e.ingress.link_bw,
                    Some(id) => e.nodes.iter().find(|x| x.id == id).unwrap().link_bw,
                }
            };
            let hop = |loc: &Option<String>, bytes: f64| -> u64 {
                if loc.as_deref() == Some(host.id.as_str()) {
                    return 0;
                }
                let payload = if bytes > 0.0 { round_ns(bytes / bw(loc).min(host.link_bw)) } else { 0 };
                lat(loc) + round_ns(host.link_latency) + payload
            };
            let transfer_in = hop(&t.input_location, t.input_size);
            let compute = round_ns(t.cost / host.cpu_speed + t.input_size / host.io_rate + t.output_size / host.io_rate);
            let transfer_out = if t.output_location.is_some() { hop(&t.output_location, t.output_size) } else { 0 };
            let expected = transfer_in + compute + transfer_out;
            ensure(simulated.as_nanos() == expected, || {
                format!("instance {i}: simulated {simulated} != hand arithmetic {expected} ns")
            })?;
        }
        Ok(format!("{ESTIMATOR_INSTANCES} single-task instances, estimate == simulated == arithmetic (ns)"))
    };
    verdict("estimator exactness", check());
}

// ---- overhead identity

fn random_batch_instance(rng: &mut RngStream) -> (EnvironmentSpec, WorkloadSpec) {
    let n = rng.gen_range(1..=6);
    let e = env((0..n).map(|k| random_node(rng, format!("n{k}"))).collect());
    let job_count = rng.gen_range(1..=4);
    let js = (0..job_count)
        .map(|j| {
            let tasks = (0..rng.gen_range(1..=20))
                .map(|_| TaskTemplate {
                    cost: rng.gen_range(1e8..1e12),
                    input_size: rng.gen_range(0.0..1e8),
                    output_size: rng.gen_range(0.0..1e7),
                    input_location: random_location(rng, n),
                    output_location: random_location(rng, n),
                })
                .collect();
            job(&format!("j{j}"), tasks)
        })
        .collect();
    (e, jobs(js))
}

#[test]
fn overhead_accounting_identity() {
    let check = || -> Result<String, String> {
        let mut rng = RngStream::new(13, "acceptance:overhead");
        let mut charged_total = SimDuration::ZERO;
        for i in 0..OVERHEAD_INSTANCES {
            let (e, w) = random_batch_instance(&mut rng);
            let policy = PolicyOverrides { service_time: Some(rng.gen_range(0.001..0.5)), ..Default::default() };
            let cfg = |part| ScenarioConfig { part, seed: i as u64, policy: policy.clone(), ..Default::default() };
            let a = run(&cfg(Part::A), &e, &w);
            let b = run(&cfg(Part::B), &e, &w);
            ensure(a.report.complete && b.report.complete, || format!("instance {i}: incomplete run"))?;
            ensure(a.scheduling_charged.is_zero(), || format!("instance {i}: part A charged scheduling"))?;
            let delta = b.makespan.as_nanos() as i128 - a.makespan.as_nanos() as i128;
            ensure(delta == b.scheduling_charged.as_nanos() as i128, || {
                format!("instance {i}: makespan(B)-makespan(A) = {delta} ns, charged {}", b.scheduling_charged)
            })?;
            charged_total += b.scheduling_charged;
        }
        Ok(format!("{OVERHEAD_INSTANCES} churn-free batch instances, identity exact ({charged_total} charged)"))
    };
    verdict("overhead accounting identity", check());
}

// ---- replication survival

#[test]
fn replication_survival() {
    let check = || -> Result<String, String> {
        let mut cases = 0;
        for k in 1..=MAX_SURVIVAL_NODES {
            for r in 0..k {
                for placement in [PlacementMode::Baseline, PlacementMode::Smart] {
                    for failing in 0u32..(1 << k) {
                        let nodes = (0..k)
                            .map(|i| {
                                let fails = failing & (1 << i) != 0;
                                grid(&format!("n{i}"), 1e9 * (i + 1) as f64, if fails { 1.0 } else { 1e9 }, 1e6)
                            })
                            .collect();
                        let e = env(nodes);
                        let w = jobs(vec![job("j", vec![task(1e10)])]);
                        let cfg = ScenarioConfig {
                            part: Part::C,
                            placement: Some(placement),
                            overrides: ToggleOverrides { aggregation: Some(false), ..Default::default() },
                            policy: PolicyOverrides { replicas: Some(r), horizon: Some(1000.0), ..Default::default() },
                            ..Default::default()
                        };
                        let out = run(&cfg, &e, &w);
                        // attempts made by the first placement, before any failure
                        let placed = out.tasks[0].placed_at.unwrap();
                        let mut holders: BTreeSet<usize> = BTreeSet::new();
                        for rec in out.trace.iter().filter(|r| r.at == placed) {
                            match &rec.payload {
                                Payload::Start { node, .. } => {
                                    holders.insert(node[1..].parse().unwrap());
                                }
                                Payload::Replicate { primary, replicas, .. } => {
                                    holders.insert(primary[1..].parse().unwrap());
                                    holders.extend(replicas.iter().map(|x| x[1..].parse::<usize>().unwrap()));
                                }
                                _ => {}
                            }
                        }
                        ensure(holders.len() == 1 + r, || format!("k={k} r={r}: {} holders", holders.len()))?;
                        let survivors: Vec<usize> =
                            holders.iter().copied().filter(|i| failing & (1 << i) == 0).collect();
                        let task = &out.tasks[0];
                        // a re-run after losing every attempt does not count
                        let masked = out.report.complete && out.report.counts.recoveries == 0;
                        ensure(masked == !survivors.is_empty(), || {
                            format!("k={k} r={r} failing={failing:b}: masked={masked} survivors={survivors:?}")
                        })?;
                        if let Some(fastest) = survivors.iter().max() {
                            // every attempt starts right after placement on an idle node
                            let service = SimDuration::from_secs(10.0 / (fastest + 1) as f64).unwrap();
                            let want = task.placed_at.unwrap() + service;
                            ensure(task.finished_at == Some(want) && out.report.counts.recoveries == 0, || {
                                format!("k={k} r={r} failing={failing:b}: finished {:?}, want {want}", task.finished_at)
                            })?;
                        }
                        cases += 1;
                    }
                }
            }
        }
        Ok(format!("{cases} exhaustive (nodes, r, placement, failure set) cases"))
    };
    verdict("replication survival", check());
}

// ---- Good / Best Result

#[test]
fn good_result_reproduction() {
    let check = || -> Result<String, String> {
        let (base, e, w) = good_result_fixture();
        let b = run(&ScenarioConfig { part: Part::B, ..base.clone() }, &e, &w);
        let ev = run(&ScenarioConfig { part: Part::E, ..base.clone() }, &e, &w);
        // B: placed at 0.05 on a-grid, lost at 5, re-placed at 5.05 on b-cloud for 20 s.
        ensure(b.makespan == SimTime::from_nanos(25_050_000_000), || format!("makespan(B) = {}", b.makespan))?;
        ensure(b.report.counts.recoveries == 1, || "B should re-run the task once".into())?;
        // E: replica on b-cloud from 0.05 finishes at 20.05; aggregation round
        // 0.05 plus 1e6 flop at 1e9 flop/s.
        ensure(ev.makespan == SimTime::from_nanos(20_101_000_000), || format!("makespan(E) = {}", ev.makespan))?;
        ensure(ev.report.counts.recoveries == 0 && ev.report.counts.replicas == 1, || "E should mask the fault".into())?;
        ensure(ev.makespan < b.makespan, || "E does not beat B".into())?;
        Ok(format!("makespan(E) {} < makespan(B) {}", ev.makespan, b.makespan))
    };
    verdict("good result reproduction", check());
}

#[test]
fn best_result_reproduction() {
    let check = || -> Result<String, String> {
        let (base, e, w) = best_result_fixture();
        let a = run(&ScenarioConfig { part: Part::A, ..base.clone() }, &e, &w);
        let f = run(&ScenarioConfig { part: Part::F, ..base.clone() }, &e, &w);
        // A: 1e10 flop lands on the 1e9 flop/s node.
        let a_hand = 1e10 / 1e9;
        // F: round of two placements (0.1), both tasks on n1 (0.1 + 1.0),
        // aggregation round (0.05) and 1e8 flop on n1 (0.01).
        let f_hand = 2.0 * 0.05 + 1e9 / 1e10 + 1e10 / 1e10 + 0.05 + 1e8 / 1e10;
        ensure(secs_close(a.report.makespan, a_hand, BEST_RESULT_REL_TOL), || {
            format!("makespan(A) = {} vs {a_hand}", a.report.makespan)
        })?;
        ensure(secs_close(f.report.makespan, f_hand, BEST_RESULT_REL_TOL), || {
            format!("makespan(F) = {} vs hand {f_hand}", f.report.makespan)
        })?;
        ensure(f.report.makespan < a.report.makespan, || "F does not beat A".into())?;
        Ok(format!("makespan(F) {} (hand {f_hand}) < makespan(A) {}", f.report.makespan, a.report.makespan))
    };
    verdict("best result reproduction", check());
}

// ---- micro-batching

fn random_stream(rng: &mut RngStream, id: String) -> StreamSourceSpec {
    let window = rng.gen_range(0.05..10.0);
    let count = rng.gen_range(1..=50);
    let policy = match rng.gen_range(0..3) {
        0 => BatchingPolicy::time_based(window),
        1 => BatchingPolicy::count_based(count),
        _ => BatchingPolicy::hybrid(window, count),
    };
    StreamSourceSpec {
        id,
        rate: rng.gen_range(0.2..50.0),
        event_size: rng.gen_range(1.0..1e5),
        cost_per_event: rng.gen_range(1e3..1e8),
        result_size: rng.gen_range(0.0..1e3),
        start: rng.gen_range(0.0..10.0),
        duration: rng.gen_range(0.0..60.0),
        arrivals: if rng.gen_bool(0.5) { ArrivalMode::Poisson } else { ArrivalMode::Deterministic },
        policy,
    }
}

#[test]
fn microbatch_conservation_and_latency() {
    let check = || -> Result<String, String> {
        let mut rng = RngStream::new(17, "acceptance:microbatch");
        let (mut events, mut batches) = (0usize, 0usize);
        for i in 0..MICROBATCH_INSTANCES {
            let seed = i as u64;
            let streams: Vec<_> = (0..rng.gen_range(1..=3)).map(|s| random_stream(&mut rng, format!("s{s}"))).collect();
            let e = env(vec![cloud("c0", 1e10), cloud("c1", 5e9)]);
            let w = WorkloadSpec { jobs: vec![], streams: streams.clone() };
            let out = run_part(Part::A, seed, &e, &w);
            ensure(out.report.complete, || format!("instance {i}: incomplete"))?;
            for s in &streams {
                let arrivals = s.arrivals(&mut RngStream::new(seed, &format!("stream:{}", s.id)));
                let mine: Vec<_> = out.batches.iter().filter(|b| b.source_id == s.id).collect();
                let mut seen: Vec<u64> = mine.iter().flat_map(|b| b.event_ids.iter().copied()).collect();
                seen.sort_unstable();
                let expected: Vec<u64> = (0..arrivals.len() as u64).collect();
                ensure(seen == expected, || {
                    format!("instance {i} source {}: {} events batched, {} arrived", s.id, seen.len(), arrivals.len())
                })?;
                for b in &mine {
                    ensure(b.finished_at.is_some(), || format!("instance {i}: batch {} unfinished", b.task_id))?;
                    for &id in &b.event_ids {
                        ensure(arrivals[id as usize] <= b.created_at, || "batch created before its event".into())?;
                    }
                    if matches!(s.policy.mode, BatchingMode::TimeBased | BatchingMode::Hybrid) {
                        let window = SimDuration::from_secs(s.policy.window.unwrap()).unwrap();
                        let latency = b.created_at.saturating_since(b.first_event);
                        ensure(latency <= window, || {
                            format!("instance {i} source {}: latency {latency} > window {window}", s.id)
                        })?;
                    }
                    if let Some(max) = s.policy.max_count {
                        ensure(b.event_ids.len() <= max, || "batch above max_count".into())?;
                    }
                }
                events += arrivals.len();
                batches += mine.len();
            }
        }
        Ok(format!("{MICROBATCH_INSTANCES} instances, {events} events in {batches} batches, none lost or duplicated"))
    };
    verdict("micro-batch conservation and latency", check());
}

// ---- rating invariance

fn scaled(spec: &EnvironmentSpec, c: f64) -> EnvironmentSpec {
    let mut out = spec.clone();
    out.ingress.link_bw *= c;
    for n in &mut out.nodes {
        n.cpu_speed *= c;
        n.memory *= c;
        n.io_rate *= c;
        n.link_bw *= c;
    }
    out
}

#[test]
fn rating_argmax_invariance() {
    let check = || -> Result<String, String> {
        let mut rng = RngStream::new(19, "acceptance:rating");
        let scales = [0.25, 0.5, 2.0, 3.0, 5.0, 7.0, 10.0, 1024.0];
        let mut placements = 0;
        for i in 0..RATING_INSTANCES {
            // integer-valued capacities keep every scaled value exact
            let n = rng.gen_range(2..=6);
            let nodes: Vec<NodeSpec> = (0..n)
                .map(|k| NodeSpec {
                    id: format!("n{k}"),
                    class: if k % 2 == 0 { NodeClass::Grid } else { NodeClass::Cloud },
                    cpu_speed: rng.gen_range(1..=100) as f64 * 1e8,
                    memory: rng.gen_range(1..=64) as f64 * 1e9,
                    io_rate: rng.gen_range(1..=100) as f64 * 1e7,
                    link_bw: rng.gen_range(1..=100) as f64 * 1e6,
                    link_latency: 0.0,
                    mean_up: if k % 2 == 0 { 100.0 } else { 0.0 },
                    mean_down: if k % 2 == 0 { 10.0 } else { 0.0 },
                    cost_rate: 0.0,
                })
                .collect();
            let base = EnvironmentSpec { churn_mode: ChurnMode::Exponential, ..env(nodes) };
            let mut stats = ViewStats::default();
            for k in 0..n {
                let s = NodeStats {
                    success_rate: rng.gen_bool(0.7).then(|| rng.gen_range(0.0..=1.0)),
                    availability: rng.gen_bool(0.7).then(|| rng.gen_range(0.0..=1.0)),
                    ..Default::default()
                };
                stats.nodes.insert(format!("n{k}"), s);
            }
            let snap = EnvSnapshot {
                stats,
                live: (0..n).map(|k| (format!("n{k}"), LiveNode { up: true, ..Default::default() })).collect(),
            };
            let tasks: Vec<TaskSpec> = (0..rng.gen_range(1..=10))
                .map(|t| TaskSpec {
                    id: format!("t{t}"),
                    job_id: "j".into(),
                    compute_cost: rng.gen_range(1..=1000) as f64 * 1e9,
                    input_size: rng.gen_range(0..=1000) as f64 * 1e6,
                    output_size: rng.gen_range(0..=1000) as f64 * 1e5,
                    origin: TaskOrigin::Batch,
                    input_location: InputSource::At(Location::Ingress),
                    output_destination: rng.gen_bool(0.5).then_some(Location::Ingress),
                })
                .collect();
            let weights = RatingWeights::default();
            let policy = PlacementPolicy {
                mode: PlacementMode::Smart,
                weights,
                rating_floor: [0.0, 0.3, 0.5, 0.7][rng.gen_range(0..4)],
            };
            let ids: Vec<String> = (0..n).map(|k| format!("n{k}")).collect();
            let reference = |spec: &EnvironmentSpec| {
                let env = build_environment(spec).unwrap();
                let scores: Vec<f64> = ids.iter().map(|id| rate_node(&snap, &env, id, &weights).score).collect();
                let chosen: Vec<String> = place(&tasks, &env, &snap, &ids, &policy, &mut RoundRobin::default())
                    .unwrap()
                    .into_iter()
                    .map(|p| p.node_id)
                    .collect();
                (scores, chosen)
            };
            let (scores, chosen) = reference(&base);
            for &c in &scales {
                let (s2, c2) = reference(&scaled(&base, c));
                ensure(s2 == scores, || format!("instance {i}, scale {c}: ratings changed"))?;
                ensure(c2 == chosen, || format!("instance {i}, scale {c}: placements {chosen:?} -> {c2:?}"))?;
                placements += c2.len();
            }
        }
        Ok(format!("{RATING_INSTANCES} environments x {} scales, {placements} placements unchanged", scales.len()))
    };
    verdict("rating argmax invariance", check());
}
