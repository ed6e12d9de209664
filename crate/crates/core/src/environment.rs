//! Hybrid infrastructure model: stable cloud nodes, volatile desktop-grid
//! nodes, access-link transfers and the churn process.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{RngStream, SimDuration, SimTime};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment spec at `{path}`: {reason}")]
    InvalidSpec { path: String, reason: String },
    #[error("node `{0}` is a cloud node and does not churn")]
    NotVolatile(String),
    #[error("node `{0}` is already down")]
    AlreadyDown(String),
    #[error("node `{0}` is already up")]
    AlreadyUp(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("cannot read environment file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse environment file {path}: {source}")]
    Parse { path: String, source: serde_yaml::Error },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> EnvError {
    EnvError::InvalidSpec { path: path.into(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    Cloud,
    Grid,
}

/// One compute node. Units: flop/s, bytes, bytes/s, seconds, currency/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub class: NodeClass,
    pub cpu_speed: f64,
    pub memory: f64,
    pub io_rate: f64,
    pub link_bw: f64,
    #[serde(default)]
    pub link_latency: f64,
    #[serde(default)]
    pub mean_up: f64,
    #[serde(default)]
    pub mean_down: f64,
    #[serde(default)]
    pub cost_rate: f64,
}

/// The dispatcher's network attachment, where stream events arrive and where
/// final results are delivered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngressSpec {
    pub link_bw: f64,
    #[serde(default)]
    pub link_latency: f64,
}

impl Default for IngressSpec {
    fn default() -> Self {
        IngressSpec { link_bw: 1e9, link_latency: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnMode {
    /// Alternating exponential up/down periods.
    #[default]
    Exponential,
    /// Fixed durations equal to the means, for exact tests.
    Deterministic,
}

/// Parsed environment description file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    #[serde(default)]
    pub ingress: IngressSpec,
    #[serde(default)]
    pub churn_mode: ChurnMode,
    pub nodes: Vec<NodeSpec>,
}

impl EnvironmentSpec {
    pub fn from_yaml(text: &str, path: &str) -> Result<Self, EnvError> {
        serde_yaml::from_str(text).map_err(|source| EnvError::Parse { path: path.to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io { path: p.clone(), source })?;
        Self::from_yaml(&text, &p)
    }
}

/// Where a piece of data lives.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Ingress,
    Node(String),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Ingress => f.write_str("ingress"),
            Location::Node(id) => f.write_str(id),
        }
    }
}

/// A network attachment point: an access link with bandwidth and latency.
#[derive(Clone, Debug, PartialEq)]
pub struct Endpoint {
    pub location: Location,
    pub link_bw: f64,
    pub latency: SimDuration,
}

/// Star-topology transfer cost: both access latencies plus the payload over
/// the slower of the two links. Local transfers are free.
pub fn transfer_time(bytes: f64, src: &Endpoint, dst: &Endpoint) -> SimDuration {
    if src.location == dst.location {
        return SimDuration::ZERO;
    }
    let payload = if bytes > 0.0 {
        SimDuration::from_secs(bytes / src.link_bw.min(dst.link_bw)).expect("transfer time fits the clock")
    } else {
        SimDuration::ZERO
    };
    src.latency + dst.latency + payload
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    Up,
    Down,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnTransition {
    pub node_id: String,
    pub at: SimTime,
    pub state: Availability,
}

fn churn_period(mode: ChurnMode, mean: f64, rng: &mut RngStream) -> SimDuration {
    let secs = match mode {
        ChurnMode::Deterministic => mean,
        ChurnMode::Exponential if mean > 0.0 => Exp::new(1.0 / mean).expect("positive rate").sample(rng),
        ChurnMode::Exponential => 0.0,
    };
    // a zero-length period would put two transitions at the same instant
    SimDuration::from_secs(secs).expect("churn period fits the clock").max(SimDuration::from_nanos(1))
}

/// Draws the next availability change of a grid node that is in `current`
/// state at time `from`.
pub fn next_churn_transition(
    node: &NodeSpec,
    mode: ChurnMode,
    rng: &mut RngStream,
    from: SimTime,
    current: Availability,
) -> Result<ChurnTransition, EnvError> {
    if node.class == NodeClass::Cloud {
        return Err(EnvError::NotVolatile(node.id.clone()));
    }
    let (mean, state) = match current {
        Availability::Up => (node.mean_up, Availability::Down),
        Availability::Down => (node.mean_down, Availability::Up),
    };
    let at = from + churn_period(mode, mean, rng);
    Ok(ChurnTransition { node_id: node.id.clone(), at, state })
}

/// Validated set of nodes plus live availability and the churn log.
#[derive(Clone, Debug)]
pub struct Environment {
    nodes: Vec<NodeSpec>,
    index: BTreeMap<String, usize>,
    endpoints: Vec<Endpoint>,
    ingress: Endpoint,
    churn_mode: ChurnMode,
    up: Vec<bool>,
    resident: Vec<BTreeSet<String>>,
    transitions: Vec<ChurnTransition>,
}

fn check_positive(v: f64, path: String) -> Result<(), EnvError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be a positive number, got {v}")))
    }
}

fn check_non_negative(v: f64, path: String) -> Result<(), EnvError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be non-negative, got {v}")))
    }
}

fn latency(v: f64, path: String) -> Result<SimDuration, EnvError> {
    check_non_negative(v, path.clone())?;
    SimDuration::from_secs(v).map_err(|e| invalid(path, e.to_string()))
}

pub fn build_environment(spec: &EnvironmentSpec) -> Result<Environment, EnvError> {
    check_positive(spec.ingress.link_bw, "ingress.link_bw".into())?;
    let ingress = Endpoint {
        location: Location::Ingress,
        link_bw: spec.ingress.link_bw,
        latency: latency(spec.ingress.link_latency, "ingress.link_latency".into())?,
    };
    if spec.nodes.is_empty() {
        return Err(invalid("nodes", "at least one node is required"));
    }

    let mut nodes = spec.nodes.clone();
    for (i, n) in nodes.iter().enumerate() {
        let p = |f: &str| format!("nodes[{i}].{f}");
        if n.id.is_empty() || n.id == "ingress" {
            return Err(invalid(p("id"), format!("`{}` is not a usable node id", n.id)));
        }
        check_positive(n.cpu_speed, p("cpu_speed"))?;
        check_positive(n.memory, p("memory"))?;
        check_positive(n.io_rate, p("io_rate"))?;
        check_positive(n.link_bw, p("link_bw"))?;
        check_non_negative(n.link_latency, p("link_latency"))?;
        check_non_negative(n.cost_rate, p("cost_rate"))?;
        check_non_negative(n.mean_down, p("mean_down"))?;
        match n.class {
            NodeClass::Cloud if n.mean_down != 0.0 => {
                return Err(invalid(p("mean_down"), "cloud nodes never churn, mean_down must be 0"));
            }
            NodeClass::Grid => check_positive(n.mean_up, p("mean_up"))?,
            NodeClass::Cloud => check_non_negative(n.mean_up, p("mean_up"))?,
        }
    }
    nodes.sort_by(|a, b| a.id.cmp(&b.id));
    let mut index = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if index.insert(n.id.clone(), i).is_some() {
            let pos = spec.nodes.iter().rposition(|m| m.id == n.id).unwrap_or(i);
            return Err(invalid(format!("nodes[{pos}].id"), format!("duplicate node id `{}`", n.id)));
        }
    }
    let endpoints = nodes
        .iter()
        .map(|n| {
            Ok(Endpoint {
                location: Location::Node(n.id.clone()),
                link_bw: n.link_bw,
                latency: latency(n.link_latency, format!("nodes.{}.link_latency", n.id))?,
            })
        })
        .collect::<Result<Vec<_>, EnvError>>()?;
    let count = nodes.len();
    Ok(Environment {
        nodes,
        index,
        endpoints,
        ingress,
        churn_mode: spec.churn_mode,
        up: vec![true; count],
        resident: vec![BTreeSet::new(); count],
        transitions: Vec::new(),
    })
}

impl Environment {
    /// Nodes in id order.
    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn churn_mode(&self) -> ChurnMode {
        self.churn_mode
    }

    pub fn ingress(&self) -> &Endpoint {
        &self.ingress
    }

    pub fn endpoint(&self, loc: &Location) -> Option<&Endpoint> {
        match loc {
            Location::Ingress => Some(&self.ingress),
            Location::Node(id) => self.index.get(id).map(|&i| &self.endpoints[i]),
        }
    }

    pub fn node_endpoint(&self, id: &str) -> Option<&Endpoint> {
        self.index.get(id).map(|&i| &self.endpoints[i])
    }

    pub fn is_up(&self, id: &str) -> bool {
        self.index.get(id).is_some_and(|&i| self.up[i])
    }

    pub fn available_ids(&self) -> Vec<String> {
        self.nodes.iter().zip(&self.up).filter(|(_, up)| **up).map(|(n, _)| n.id.clone()).collect()
    }

    pub fn transitions(&self) -> &[ChurnTransition] {
        &self.transitions
    }

    fn idx(&self, id: &str) -> Result<usize, EnvError> {
        self.index.get(id).copied().ok_or_else(|| EnvError::UnknownNode(id.to_string()))
    }

    /// Records that work item `item` now occupies `node`.
    pub fn assign(&mut self, node: &str, item: &str) -> Result<(), EnvError> {
        let i = self.idx(node)?;
        self.resident[i].insert(item.to_string());
        Ok(())
    }

    pub fn release(&mut self, node: &str, item: &str) {
        if let Some(&i) = self.index.get(node) {
            self.resident[i].remove(item);
        }
    }

    pub fn residents(&self, node: &str) -> BTreeSet<String> {
        self.index.get(node).map(|&i| self.resident[i].clone()).unwrap_or_default()
    }

    /// Marks a grid node down and returns the work items it was holding,
    /// all of which are lost (fail-stop, no checkpoints).
    pub fn on_node_down(&mut self, node_id: &str, at: SimTime) -> Result<BTreeSet<String>, EnvError> {
        let i = self.idx(node_id)?;
        if self.nodes[i].class == NodeClass::Cloud {
            return Err(EnvError::NotVolatile(node_id.to_string()));
        }
        if !self.up[i] {
            return Err(EnvError::AlreadyDown(node_id.to_string()));
        }
        self.up[i] = false;
        self.transitions.push(ChurnTransition { node_id: node_id.to_string(), at, state: Availability::Down });
        Ok(std::mem::take(&mut self.resident[i]))
    }

    /// Brings a node back with an empty queue.
    pub fn on_node_up(&mut self, node_id: &str, at: SimTime) -> Result<(), EnvError> {
        let i = self.idx(node_id)?;
        if self.up[i] {
            return Err(EnvError::AlreadyUp(node_id.to_string()));
        }
        self.up[i] = true;
        self.transitions.push(ChurnTransition { node_id: node_id.to_string(), at, state: Availability::Up });
        Ok(())
    }
}
