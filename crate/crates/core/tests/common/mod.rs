//! Instance builders shared by the integration tests.
#![allow(dead_code)]

use lambdasim::environment::{ChurnMode, EnvironmentSpec, IngressSpec, NodeClass, NodeSpec};
use lambdasim::scenarios::{run_with, Part, RunOutcome, ScenarioConfig, ToggleOverrides};
use lambdasim::workload::{JobEntry, TaskTemplate, WorkloadSpec};

pub fn node(id: &str, class: NodeClass, cpu: f64) -> NodeSpec {
    NodeSpec {
        id: id.into(),
        class,
        cpu_speed: cpu,
        memory: 4e9,
        io_rate: 1e9,
        link_bw: 1e8,
        link_latency: 0.0,
        mean_up: 0.0,
        mean_down: 0.0,
        cost_rate: 0.0,
    }
}

pub fn cloud(id: &str, cpu: f64) -> NodeSpec {
    node(id, NodeClass::Cloud, cpu)
}

/// Grid node with deterministic churn: first failure after `up` seconds.
pub fn grid(id: &str, cpu: f64, up: f64, down: f64) -> NodeSpec {
    NodeSpec { mean_up: up, mean_down: down, ..node(id, NodeClass::Grid, cpu) }
}

pub fn env(nodes: Vec<NodeSpec>) -> EnvironmentSpec {
    EnvironmentSpec { ingress: IngressSpec::default(), churn_mode: ChurnMode::Deterministic, nodes }
}

pub fn task(cost: f64) -> TaskTemplate {
    TaskTemplate { cost, input_size: 0.0, output_size: 0.0, input_location: None, output_location: None }
}

pub fn job(id: &str, tasks: Vec<TaskTemplate>) -> JobEntry {
    JobEntry {
        id: id.into(),
        tasks: Some(tasks),
        task_count: None,
        cost: None,
        input_size: 0.0,
        output_size: 0.0,
        input_location: None,
        output_location: None,
        aggregation_output_size: 0.0,
        aggregation_cost: 1e6,
    }
}

pub fn jobs(jobs: Vec<JobEntry>) -> WorkloadSpec {
    WorkloadSpec { jobs, streams: Vec::new() }
}

pub fn run(cfg: &ScenarioConfig, e: &EnvironmentSpec, w: &WorkloadSpec) -> RunOutcome {
    run_with(cfg, e, w).expect("scenario runs")
}

pub fn run_part(part: Part, seed: u64, e: &EnvironmentSpec, w: &WorkloadSpec) -> RunOutcome {
    run(&ScenarioConfig::for_part(part, seed), e, w)
}

/// Churn instance: the faster grid node fails half way through the only
/// task and stays away; the cloud node is half as fast.
pub fn good_result_fixture() -> (ScenarioConfig, EnvironmentSpec, WorkloadSpec) {
    let e = env(vec![grid("a-grid", 2e9, 5.0, 1e6), cloud("b-cloud", 1e9)]);
    let w = jobs(vec![job("j", vec![task(2e10)])]);
    let cfg = ScenarioConfig {
        overrides: ToggleOverrides { churn: Some(true), ..Default::default() },
        ..Default::default()
    };
    (cfg, e, w)
}

/// Heterogeneity instance: round-robin sends the large task to the node
/// that is ten times slower.
pub fn best_result_fixture() -> (ScenarioConfig, EnvironmentSpec, WorkloadSpec) {
    let e = env(vec![cloud("n1", 1e10), cloud("n2", 1e9)]);
    let mut j = job("j", vec![task(1e9), task(1e10)]);
    j.aggregation_cost = 1e8;
    (ScenarioConfig::default(), e, jobs(vec![j]))
}

pub fn secs_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-12)
}
