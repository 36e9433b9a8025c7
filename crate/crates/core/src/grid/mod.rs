//! Radial distribution network model.
//!
//! A [`Network`] is a spanning tree of buses rooted at the slack bus. Line
//! impedances are stored in per-unit on the network's own base, converted
//! once at load time from the ohmic values in the network file.
//!
//! Power flow is solved by a backward-forward sweep (see [`solve_power_flow`]),
//! which is exact for radial feeders.

mod powerflow;

pub use powerflow::{solve_power_flow, Injection, PowerFlowOptions, PowerFlowResult};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

/// External bus identifier as it appears in the network file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bus {}", self.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("malformed network document: {0}")]
    Malformed(String),
    #[error("network is not radial: {0}")]
    NonRadial(String),
    #[error("duplicate line {from}-{to}")]
    DuplicateLine { from: u32, to: u32 },
    #[error("line {from}-{to} has nonpositive impedance (r={r_ohm} ohm, x={x_ohm} ohm)")]
    NonpositiveImpedance { from: u32, to: u32, r_ohm: f64, x_ohm: f64 },
    #[error("unknown {0}")]
    UnknownBus(BusId),
    #[error("EVCS {0} is not placed in the deployment")]
    UnplacedEvcs(usize),
    #[error("invalid deployment: {0}")]
    InvalidDeployment(String),
    #[error("injection vector has {got} entries, expected {expected}")]
    InjectionLength { got: usize, expected: usize },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Bus record of the network file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: BusId,
    #[serde(default)]
    pub p_load_kw: f64,
    #[serde(default)]
    pub q_load_kvar: f64,
}

/// Line record of the network file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub from: BusId,
    pub to: BusId,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

/// JSON network document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
    pub slack: BusId,
    pub base_kva: f64,
    pub base_kv: f64,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default = "default_v_slack")]
    pub v_slack: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

fn default_v_slack() -> f64 {
    1.0
}

/// A line in internal (index) form, oriented away from the slack bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
}

/// Validated radial network.
///
/// Buses are addressed internally by dense index `0..n`; [`Network::index_of`]
/// maps external ids. The line list is oriented parent to child and ordered
/// breadth-first from the slack bus, which the sweep relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    bus_ids: Vec<BusId>,
    index: HashMap<BusId, usize>,
    base_load_kw: Vec<f64>,
    base_load_kvar: Vec<f64>,
    lines: Vec<Line>,
    /// `parent_line[i]` is the index into `lines` feeding bus `i` (none for slack).
    parent_line: Vec<Option<usize>>,
    adjacency: Vec<Vec<usize>>,
    slack: usize,
    pub v_slack: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub base_kva: f64,
    pub base_kv: f64,
}

impl Network {
    pub fn from_file(doc: NetworkFile) -> Result<Self, GridError> {
        if doc.buses.is_empty() {
            return Err(GridError::Malformed("no buses".into()));
        }
        if !(doc.base_kva > 0.0 && doc.base_kv > 0.0) {
            return Err(GridError::Malformed(format!(
                "bases must be positive (base_kva={}, base_kv={})",
                doc.base_kva, doc.base_kv
            )));
        }
        if !(doc.v_min < doc.v_slack && doc.v_slack <= doc.v_max) {
            return Err(GridError::Malformed(format!(
                "voltage limits must satisfy v_min < v_slack <= v_max (got {} / {} / {})",
                doc.v_min, doc.v_slack, doc.v_max
            )));
        }

        let mut index = HashMap::new();
        let mut bus_ids = Vec::with_capacity(doc.buses.len());
        for (i, b) in doc.buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(GridError::Malformed(format!("duplicate {}", b.id)));
            }
            if !(b.p_load_kw.is_finite() && b.q_load_kvar.is_finite()) {
                return Err(GridError::Malformed(format!("non-finite load at {}", b.id)));
            }
            bus_ids.push(b.id);
        }
        let slack = *index.get(&doc.slack).ok_or(GridError::UnknownBus(doc.slack))?;
        let n = bus_ids.len();
        if doc.lines.len() != n - 1 {
            return Err(GridError::NonRadial(format!(
                "{} buses require {} lines, found {}",
                n,
                n - 1,
                doc.lines.len()
            )));
        }

        let z_base = doc.base_kv * doc.base_kv * 1000.0 / doc.base_kva;
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); n];
        // (neighbor, r_pu, x_pu) per bus, used to orient lines below
        let mut incident: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n];
        for l in &doc.lines {
            let a = *index.get(&l.from).ok_or(GridError::UnknownBus(l.from))?;
            let b = *index.get(&l.to).ok_or(GridError::UnknownBus(l.to))?;
            if a == b {
                return Err(GridError::NonRadial(format!("self-loop at {}", l.from)));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(GridError::DuplicateLine { from: l.from.0, to: l.to.0 });
            }
            if !(l.r_ohm > 0.0 && l.x_ohm > 0.0) {
                return Err(GridError::NonpositiveImpedance {
                    from: l.from.0,
                    to: l.to.0,
                    r_ohm: l.r_ohm,
                    x_ohm: l.x_ohm,
                });
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
            incident[a].push((b, l.r_ohm / z_base, l.x_ohm / z_base));
            incident[b].push((a, l.r_ohm / z_base, l.x_ohm / z_base));
        }
        for adj in adjacency.iter_mut() {
            adj.sort_by_key(|&j| bus_ids[j]);
        }

        // BFS from the slack bus; with n-1 distinct edges, reaching every bus
        // means the graph is a spanning tree.
        let mut lines = Vec::with_capacity(n - 1);
        let mut parent_line = vec![None; n];
        let mut visited = vec![false; n];
        let mut queue = VecDeque::from([slack]);
        visited[slack] = true;
        while let Some(u) = queue.pop_front() {
            let mut next: Vec<_> = incident[u].iter().filter(|(v, _, _)| !visited[*v]).collect();
            next.sort_by_key(|(v, _, _)| bus_ids[*v]);
            for &(v, r, x) in next {
                visited[v] = true;
                parent_line[v] = Some(lines.len());
                lines.push(Line { from: u, to: v, r_pu: r, x_pu: x });
                queue.push_back(v);
            }
        }
        if let Some(orphan) = visited.iter().position(|v| !v) {
            return Err(GridError::NonRadial(format!(
                "{} is not connected to the slack bus (the line set contains a cycle)",
                bus_ids[orphan]
            )));
        }

        Ok(Self {
            base_load_kw: doc.buses.iter().map(|b| b.p_load_kw).collect(),
            base_load_kvar: doc.buses.iter().map(|b| b.q_load_kvar).collect(),
            bus_ids,
            index,
            lines,
            parent_line,
            adjacency,
            slack,
            v_slack: doc.v_slack,
            v_min: doc.v_min,
            v_max: doc.v_max,
            base_kva: doc.base_kva,
            base_kv: doc.base_kv,
        })
    }

    pub fn len(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bus_ids.is_empty()
    }

    pub fn bus_ids(&self) -> &[BusId] {
        &self.bus_ids
    }

    pub fn bus_id(&self, idx: usize) -> BusId {
        self.bus_ids[idx]
    }

    pub fn index_of(&self, id: BusId) -> Result<usize, GridError> {
        self.index.get(&id).copied().ok_or(GridError::UnknownBus(id))
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn slack_id(&self) -> BusId {
        self.bus_ids[self.slack]
    }

    /// Lines oriented away from the slack bus, in breadth-first order.
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Index into [`Network::lines`] of the line feeding dense bus `bus`; `None` for the slack.
    pub fn parent_line(&self, bus: usize) -> Option<usize> {
        self.parent_line[bus]
    }

    /// Nominal base load at each bus, kW.
    pub fn base_load_kw(&self) -> &[f64] {
        &self.base_load_kw
    }

    pub fn base_load_kvar(&self) -> &[f64] {
        &self.base_load_kvar
    }

    /// Converts kW (or kvar) to per-unit on this network's power base.
    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.base_kva
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.base_kva
    }

    /// Neighbors of a bus by dense index, sorted by external id.
    pub fn adjacent(&self, idx: usize) -> &[usize] {
        &self.adjacency[idx]
    }

    pub fn degree(&self, idx: usize) -> usize {
        self.adjacency[idx].len()
    }

    /// Buses sharing a line with `bus`, excluding `bus` itself.
    pub fn neighbors_one_hop(&self, bus: BusId) -> Result<BTreeSet<BusId>, GridError> {
        let idx = self.index_of(bus)?;
        Ok(self.adjacency[idx].iter().map(|&j| self.bus_ids[j]).collect())
    }

    /// Base-load injections (load as negative injection) in p.u., scaled by `factor`.
    pub fn base_injections(&self, factor: f64) -> Vec<Injection> {
        self.base_load_kw
            .iter()
            .zip(&self.base_load_kvar)
            .map(|(&p, &q)| Injection {
                p: -self.kw_to_pu(p) * factor,
                q: -self.kw_to_pu(q) * factor,
            })
            .collect()
    }

    /// Serializes back to the external document form.
    pub fn to_file(&self) -> NetworkFile {
        let z_base = self.base_kv * self.base_kv * 1000.0 / self.base_kva;
        NetworkFile {
            buses: (0..self.len())
                .map(|i| BusRecord {
                    id: self.bus_ids[i],
                    p_load_kw: self.base_load_kw[i],
                    q_load_kvar: self.base_load_kvar[i],
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: self.bus_ids[l.from],
                    to: self.bus_ids[l.to],
                    r_ohm: l.r_pu * z_base,
                    x_ohm: l.x_pu * z_base,
                })
                .collect(),
            slack: self.slack_id(),
            base_kva: self.base_kva,
            base_kv: self.base_kv,
            v_min: self.v_min,
            v_max: self.v_max,
            v_slack: self.v_slack,
            provenance: None,
        }
    }
}

/// Parses and validates a JSON network document.
pub fn load_network(document: &str) -> Result<Network, GridError> {
    let doc: NetworkFile =
        serde_json::from_str(document).map_err(|e| GridError::Malformed(e.to_string()))?;
    Network::from_file(doc)
}

pub fn load_network_file(path: impl AsRef<Path>) -> Result<Network, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_network(&text)
}

/// The bundled 33-bus feeder.
pub const IEEE33_JSON: &str = include_str!("../../fixtures/ieee33.json");
/// Minimal slack + load bus feeder.
pub const TWO_BUS_JSON: &str = include_str!("../../fixtures/two_bus.json");

pub fn ieee33() -> Network {
    load_network(IEEE33_JSON).expect("bundled 33-bus fixture is valid")
}

pub fn two_bus() -> Network {
    load_network(TWO_BUS_JSON).expect("bundled 2-bus fixture is valid")
}

/// EVCS placement: `placements[k]` is the hosting bus of station `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeploymentMap {
    pub placements: Vec<BusId>,
}

impl DeploymentMap {
    pub fn new(network: &Network, placements: Vec<BusId>) -> Result<Self, GridError> {
        let map = Self { placements };
        map.validate(network)?;
        Ok(map)
    }

    pub fn validate(&self, network: &Network) -> Result<(), GridError> {
        let mut used = BTreeSet::new();
        for (k, &bus) in self.placements.iter().enumerate() {
            network.index_of(bus)?;
            if bus == network.slack_id() {
                return Err(GridError::InvalidDeployment(format!(
                    "EVCS {k} placed on the slack bus"
                )));
            }
            if !used.insert(bus) {
                return Err(GridError::InvalidDeployment(format!(
                    "more than one EVCS on {bus}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn bus(&self, k: usize) -> Result<BusId, GridError> {
        self.placements.get(k).copied().ok_or(GridError::UnplacedEvcs(k))
    }
}

/// 1-hop neighbor bus set of the bus hosting EVCS `k`.
pub fn evcs_neighborhood(
    network: &Network,
    deployment: &DeploymentMap,
    k: usize,
) -> Result<BTreeSet<BusId>, GridError> {
    network.neighbors_one_hop(deployment.bus(k)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(lines: &[(u32, u32)]) -> NetworkFile {
        let n = lines.len() as u32 + 1;
        NetworkFile {
            buses: (1..=n)
                .map(|i| BusRecord { id: BusId(i), p_load_kw: 10.0, q_load_kvar: 5.0 })
                .collect(),
            lines: lines
                .iter()
                .map(|&(a, b)| LineRecord { from: BusId(a), to: BusId(b), r_ohm: 0.1, x_ohm: 0.1 })
                .collect(),
            slack: BusId(1),
            base_kva: 1000.0,
            base_kv: 1.0,
            v_min: 0.95,
            v_max: 1.05,
            v_slack: 1.0,
            provenance: None,
        }
    }

    #[test]
    fn bundled_fixtures_load() {
        let net = ieee33();
        assert_eq!(net.len(), 33);
        assert_eq!(net.lines().len(), 32);
        assert_eq!(net.slack_id(), BusId(1));
        let two = two_bus();
        assert_eq!(two.len(), 2);
        assert_eq!(two.lines().len(), 1);
    }

    #[test]
    fn duplicated_line_is_rejected() {
        let mut d = doc(&[(1, 2), (2, 3)]);
        d.buses.push(BusRecord { id: BusId(4), p_load_kw: 0.0, q_load_kvar: 0.0 });
        d.lines.push(LineRecord { from: BusId(3), to: BusId(2), r_ohm: 0.1, x_ohm: 0.1 });
        assert!(matches!(Network::from_file(d), Err(GridError::DuplicateLine { .. })));
    }

    #[test]
    fn cycle_is_rejected_as_non_radial() {
        // 4 buses, 3 lines, but 1-2-3 form a triangle and bus 4 is cut off.
        let mut d = doc(&[(1, 2), (2, 3), (3, 1)]);
        d.buses.truncate(4);
        let err = Network::from_file(d).unwrap_err();
        assert!(matches!(err, GridError::NonRadial(_)), "{err}");
    }

    #[test]
    fn wrong_line_count_is_non_radial() {
        let mut d = doc(&[(1, 2), (2, 3)]);
        d.lines.pop();
        assert!(matches!(Network::from_file(d), Err(GridError::NonRadial(_))));
    }

    #[test]
    fn nonpositive_impedance_reports_line() {
        let mut d = doc(&[(1, 2), (2, 3)]);
        d.lines[1].r_ohm = 0.0;
        match Network::from_file(d) {
            Err(GridError::NonpositiveImpedance { from: 2, to: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_reported() {
        assert!(matches!(load_network("{\"buses\": 3}"), Err(GridError::Malformed(_))));
    }

    #[test]
    fn neighbors_are_symmetric() {
        let net = ieee33();
        for &i in net.bus_ids() {
            for j in net.neighbors_one_hop(i).unwrap() {
                assert!(net.neighbors_one_hop(j).unwrap().contains(&i));
            }
        }
    }

    #[test]
    fn two_bus_neighbors() {
        let net = two_bus();
        let n = net.neighbors_one_hop(BusId(2)).unwrap();
        assert_eq!(n.into_iter().collect::<Vec<_>>(), vec![BusId(1)]);
        assert!(matches!(net.neighbors_one_hop(BusId(9)), Err(GridError::UnknownBus(_))));
    }

    #[test]
    fn deployment_rules() {
        let net = ieee33();
        assert!(DeploymentMap::new(&net, vec![BusId(8), BusId(8)]).is_err());
        assert!(DeploymentMap::new(&net, vec![BusId(1)]).is_err());
        assert!(DeploymentMap::new(&net, vec![BusId(40)]).is_err());
        let d = DeploymentMap::new(&net, vec![BusId(8), BusId(12), BusId(14), BusId(30)]).unwrap();
        assert!(matches!(evcs_neighborhood(&net, &d, 4), Err(GridError::UnplacedEvcs(4))));
    }

    #[test]
    fn file_round_trip_preserves_network() {
        let net = ieee33();
        let again = Network::from_file(net.to_file()).unwrap();
        assert_eq!(net.bus_ids(), again.bus_ids());
        for (a, b) in net.lines().iter().zip(again.lines()) {
            assert_eq!((a.from, a.to), (b.from, b.to));
            assert!((a.r_pu - b.r_pu).abs() < 1e-15);
        }
    }
}
