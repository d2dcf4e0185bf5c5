//! Pipeline network graph: parsing, refinement into lumped segments, and the
//! signed incidence matrices of the discretized system.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{Csr, Triplets};

const KM: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Supply,
    Withdrawal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: u32,
    pub kind: NodeKind,
    pub name: Option<String>,
    /// Display metadata only.
    pub position: Option<[f64; 2]>,
}

/// A pipe, oriented `from -> to`. Lengths and diameters in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    pub length: f64,
    pub diameter: f64,
    pub friction: f64,
}

impl Edge {
    /// `λ / (2 D)`, the friction coefficient of the momentum balance.
    pub fn friction_coefficient(&self) -> f64 {
        self.friction / (2.0 * self.diameter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActuatorPosition {
    /// Compressor boosting the density entering the pipe.
    Inlet,
    /// Regulator reducing the density delivered at the pipe outlet.
    Outlet,
}

/// Which refined segment of the parent pipe carries the actuator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentChoice {
    First,
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actuator {
    pub edge: u32,
    pub position: ActuatorPosition,
    pub segment: SegmentChoice,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl Actuator {
    pub fn is_compressor(&self) -> bool {
        self.position == ActuatorPosition::Inlet
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    actuators: Vec<Actuator>,
    node_index: BTreeMap<u32, usize>,
    edge_index: BTreeMap<u32, usize>,
}

impl Network {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>, actuators: Vec<Actuator>) -> Result<Self> {
        let mut node_index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.id, i).is_some() {
                return Err(Error::DuplicateId { kind: "node", id: n.id });
            }
        }
        for w in nodes.windows(2) {
            if w[0].kind == NodeKind::Withdrawal && w[1].kind == NodeKind::Supply {
                return Err(Error::NodeOrder {
                    supply: w[1].id,
                    withdrawal: w[0].id,
                });
            }
            if w[1].id <= w[0].id {
                return Err(Error::IdOrder {
                    kind: "node",
                    id: w[1].id,
                });
            }
        }
        if !nodes.iter().any(|n| n.kind == NodeKind::Supply) {
            return Err(Error::InvalidNetwork("no supply node".into()));
        }
        if !nodes.iter().any(|n| n.kind == NodeKind::Withdrawal) {
            return Err(Error::InvalidNetwork("no withdrawal node".into()));
        }

        let mut edge_index = BTreeMap::new();
        for (k, e) in edges.iter().enumerate() {
            if edge_index.insert(e.id, k).is_some() {
                return Err(Error::DuplicateId { kind: "edge", id: e.id });
            }
            for node in [e.from, e.to] {
                if !node_index.contains_key(&node) {
                    return Err(Error::UnknownNode { edge: e.id, node });
                }
            }
            if e.from == e.to {
                return Err(Error::InvalidNetwork(format!("edge {} is a self-loop", e.id)));
            }
            for (what, value) in [("length", e.length), ("diameter", e.diameter), ("friction", e.friction)] {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::NonPositiveParameter {
                        edge: e.id,
                        what,
                        value,
                    });
                }
            }
            // Supply densities are prescribed, so a pipe cannot deliver into one.
            if nodes[node_index[&e.to]].kind == NodeKind::Supply {
                return Err(Error::InvalidNetwork(format!(
                    "edge {} terminates at supply node {}",
                    e.id, e.to
                )));
            }
        }
        for w in edges.windows(2) {
            if w[1].id <= w[0].id {
                return Err(Error::IdOrder {
                    kind: "edge",
                    id: w[1].id,
                });
            }
        }

        let mut slots = BTreeSet::new();
        for a in &actuators {
            if !edge_index.contains_key(&a.edge) {
                return Err(Error::UnknownEdge { edge: a.edge });
            }
            if !(a.min_ratio >= 1.0 && a.max_ratio >= a.min_ratio && a.max_ratio.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "actuator on edge {} has invalid ratio bounds [{}, {}]",
                    a.edge, a.min_ratio, a.max_ratio
                )));
            }
            let seg = match a.segment {
                SegmentChoice::First => 0,
                SegmentChoice::Last => 1,
            };
            let pos = match a.position {
                ActuatorPosition::Inlet => 0,
                ActuatorPosition::Outlet => 1,
            };
            if !slots.insert((a.edge, pos, seg)) {
                return Err(Error::InvalidNetwork(format!(
                    "duplicate actuator slot on edge {}",
                    a.edge
                )));
            }
        }

        let net = Self {
            nodes,
            edges,
            actuators,
            node_index,
            edge_index,
        };
        if !net.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(net)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn actuators(&self) -> &[Actuator] {
        &self.actuators
    }

    pub fn node_index(&self, id: u32) -> Option<usize> {
        self.node_index.get(&id).copied()
    }

    pub fn edge_index(&self, id: u32) -> Option<usize> {
        self.edge_index.get(&id).copied()
    }

    pub fn num_supply(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Supply).count()
    }

    pub fn num_withdrawal(&self) -> usize {
        self.nodes.len() - self.num_supply()
    }

    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).sum()
    }

    fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            let (i, j) = (self.node_index[&e.from], self.node_index[&e.to]);
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Serializes to the network document schema (lengths in km).
    pub fn to_document(&self) -> String {
        let doc = NetworkDocument {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.id,
                    kind: n.kind,
                    name: n.name.clone(),
                    position: n.position,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    id: e.id,
                    from: e.from,
                    to: e.to,
                    length_km: e.length / KM,
                    diameter_m: e.diameter,
                    friction: e.friction,
                })
                .collect(),
            actuators: self
                .actuators
                .iter()
                .map(|a| ActuatorDoc {
                    edge: a.edge,
                    position: a.position,
                    min_ratio: a.min_ratio,
                    max_ratio: a.max_ratio,
                    segment: None,
                })
                .collect(),
        };
        toml::to_string(&doc).expect("network document serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkDocument {
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
    #[serde(default)]
    actuators: Vec<ActuatorDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: u32,
    kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    id: u32,
    from: u32,
    to: u32,
    length_km: f64,
    diameter_m: f64,
    friction: f64,
}

fn default_min_ratio() -> f64 {
    1.0
}

fn default_max_ratio() -> f64 {
    2.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActuatorDoc {
    edge: u32,
    position: ActuatorPosition,
    #[serde(default = "default_min_ratio")]
    min_ratio: f64,
    #[serde(default = "default_max_ratio")]
    max_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segment: Option<SegmentChoice>,
}

/// Parses and validates a network document. Lengths are given in km.
pub fn parse_network(document: &str) -> Result<Network> {
    let doc: NetworkDocument = toml::from_str(document).map_err(|e| Error::Parse(e.to_string()))?;
    let nodes = doc
        .nodes
        .into_iter()
        .map(|n| Node {
            id: n.id,
            kind: n.kind,
            name: n.name,
            position: n.position,
        })
        .collect();
    let edges = doc
        .edges
        .into_iter()
        .map(|e| Edge {
            id: e.id,
            from: e.from,
            to: e.to,
            length: e.length_km * KM,
            diameter: e.diameter_m,
            friction: e.friction,
        })
        .collect();
    let actuators = doc
        .actuators
        .into_iter()
        .map(|a| Actuator {
            edge: a.edge,
            position: a.position,
            segment: a.segment.unwrap_or(match a.position {
                ActuatorPosition::Inlet => SegmentChoice::First,
                ActuatorPosition::Outlet => SegmentChoice::Last,
            }),
            min_ratio: a.min_ratio,
            max_ratio: a.max_ratio,
        })
        .collect();
    Network::new(nodes, edges, actuators)
}

/// A network whose pipes are all at most `segment_length_cap` long.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedNetwork {
    pub network: Network,
    /// Parent edge id of every refined edge.
    pub parent_edge: Vec<u32>,
    /// Parent node id of every refined node, `None` for auxiliary nodes.
    pub parent_node: Vec<Option<u32>>,
    /// Segment length cap in meters.
    pub segment_length_cap: f64,
}

impl RefinedNetwork {
    /// Refined index of an original node.
    pub fn node_for_parent(&self, parent: u32) -> Option<usize> {
        self.parent_node.iter().position(|&p| p == Some(parent))
    }

    /// Refined edge indices of a parent edge, in flow order.
    pub fn segments_of(&self, parent: u32) -> Vec<usize> {
        self.parent_edge
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == parent)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Splits every edge into `⌈ℓ/cap⌉` equal segments joined by auxiliary
/// withdrawal nodes with no withdrawal.
///
/// Refined nodes are renumbered 1.. with supplies first; withdrawal nodes
/// follow in the order their first incoming segment appears, so a single
/// pipe becomes a chain numbered along the flow direction.
pub fn refine(net: &Network, cap: f64) -> Result<RefinedNetwork> {
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::InvalidInput(format!("segment cap must be positive, got {cap}")));
    }

    enum Slot {
        Original(usize),
        Auxiliary,
    }
    // Emission order of refined nodes; `label[i]` is the refined position.
    let mut order: Vec<Slot> = Vec::new();
    let mut original_pos: Vec<Option<usize>> = vec![None; net.nodes.len()];
    for (i, n) in net.nodes.iter().enumerate() {
        if n.kind == NodeKind::Supply {
            original_pos[i] = Some(order.len());
            order.push(Slot::Original(i));
        }
    }

    // (tail position, head position, length, parent edge index)
    let mut segments: Vec<(usize, usize, f64, usize)> = Vec::new();
    let mut first_segment = Vec::with_capacity(net.edges.len());
    for (k, e) in net.edges.iter().enumerate() {
        let count = ((e.length / cap) - 1e-9).ceil().max(1.0) as usize;
        let seg_len = e.length / count as f64;
        let tail_idx = net.node_index[&e.from];
        let head_idx = net.node_index[&e.to];
        // Tail positions of withdrawal tails are resolved after emission.
        let mut prev = PendingNode::Original(tail_idx);
        first_segment.push(segments.len());
        for s in 0..count {
            let head = if s + 1 == count {
                if original_pos[head_idx].is_none() {
                    original_pos[head_idx] = Some(order.len());
                    order.push(Slot::Original(head_idx));
                }
                PendingNode::Original(head_idx)
            } else {
                order.push(Slot::Auxiliary);
                PendingNode::Position(order.len() - 1)
            };
            segments.push((prev.encode(), head.encode(), seg_len, k));
            prev = head;
        }
    }
    for (i, _) in net.nodes.iter().enumerate() {
        if original_pos[i].is_none() {
            original_pos[i] = Some(order.len());
            order.push(Slot::Original(i));
        }
    }

    let resolve = |code: usize| -> usize {
        match PendingNode::decode(code) {
            PendingNode::Original(i) => original_pos[i].unwrap(),
            PendingNode::Position(p) => p,
        }
    };

    let mut nodes = Vec::with_capacity(order.len());
    let mut parent_node = Vec::with_capacity(order.len());
    for (pos, slot) in order.iter().enumerate() {
        let id = pos as u32 + 1;
        match slot {
            Slot::Original(i) => {
                let n = &net.nodes[*i];
                nodes.push(Node {
                    id,
                    kind: n.kind,
                    name: n.name.clone(),
                    position: n.position,
                });
                parent_node.push(Some(n.id));
            }
            Slot::Auxiliary => {
                nodes.push(Node {
                    id,
                    kind: NodeKind::Withdrawal,
                    name: None,
                    position: None,
                });
                parent_node.push(None);
            }
        }
    }

    let mut edges = Vec::with_capacity(segments.len());
    let mut parent_edge = Vec::with_capacity(segments.len());
    for (s, &(tail, head, len, k)) in segments.iter().enumerate() {
        let parent = &net.edges[k];
        edges.push(Edge {
            id: s as u32 + 1,
            from: resolve(tail) as u32 + 1,
            to: resolve(head) as u32 + 1,
            length: len,
            diameter: parent.diameter,
            friction: parent.friction,
        });
        parent_edge.push(parent.id);
    }

    let actuators = net
        .actuators
        .iter()
        .map(|a| {
            let k = net.edge_index[&a.edge];
            let first = first_segment[k];
            let last = first_segment.get(k + 1).copied().unwrap_or(segments.len()) - 1;
            let seg = match a.segment {
                SegmentChoice::First => first,
                SegmentChoice::Last => last,
            };
            Actuator {
                edge: seg as u32 + 1,
                position: a.position,
                segment: match a.position {
                    ActuatorPosition::Inlet => SegmentChoice::First,
                    ActuatorPosition::Outlet => SegmentChoice::Last,
                },
                min_ratio: a.min_ratio,
                max_ratio: a.max_ratio,
            }
        })
        .collect();

    Ok(RefinedNetwork {
        network: Network::new(nodes, edges, actuators)?,
        parent_edge,
        parent_node,
        segment_length_cap: cap,
    })
}

#[derive(Clone, Copy)]
enum PendingNode {
    Original(usize),
    Position(usize),
}

impl PendingNode {
    // Packs both variants into one usize so segment tuples stay `Copy`.
    fn encode(self) -> usize {
        match self {
            PendingNode::Original(i) => i << 1,
            PendingNode::Position(p) => (p << 1) | 1,
        }
    }

    fn decode(code: usize) -> Self {
        if code & 1 == 0 {
            PendingNode::Original(code >> 1)
        } else {
            PendingNode::Position(code >> 1)
        }
    }
}

/// Where an edge draws its inlet state from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Supply(usize),
    Withdrawal(usize),
}

/// Index-level view of a network, built once and shared by the evaluators.
#[derive(Debug, Clone)]
pub struct Topology {
    pub num_supply: usize,
    pub num_withdrawal: usize,
    pub tails: Vec<Tail>,
    /// Withdrawal index of each edge's head node.
    pub heads: Vec<usize>,
    pub lengths: Vec<f64>,
    pub diameters: Vec<f64>,
    /// `λ_k ℓ_k / (2 D_k)`.
    pub friction_length: Vec<f64>,
    /// Edge index and position of each actuator.
    pub actuator_slots: Vec<(usize, ActuatorPosition)>,
    pub incoming: Vec<Vec<usize>>,
    pub outgoing: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(net: &Network) -> Self {
        let r = net.num_supply();
        let nw = net.num_withdrawal();
        let mut tails = Vec::new();
        let mut heads = Vec::new();
        let mut incoming = vec![Vec::new(); nw];
        let mut outgoing = vec![Vec::new(); nw];
        for (k, e) in net.edges.iter().enumerate() {
            let i = net.node_index[&e.from];
            let j = net.node_index[&e.to];
            tails.push(if i < r {
                Tail::Supply(i)
            } else {
                outgoing[i - r].push(k);
                Tail::Withdrawal(i - r)
            });
            heads.push(j - r);
            incoming[j - r].push(k);
        }
        let actuator_slots = net
            .actuators
            .iter()
            .map(|a| (net.edge_index[&a.edge], a.position))
            .collect();
        Self {
            num_supply: r,
            num_withdrawal: nw,
            tails,
            heads,
            lengths: net.edges.iter().map(|e| e.length).collect(),
            diameters: net.edges.iter().map(|e| e.diameter).collect(),
            friction_length: net.edges.iter().map(|e| e.friction_coefficient() * e.length).collect(),
            actuator_slots,
            incoming,
            outgoing,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.heads.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_supply + self.num_withdrawal
    }

    pub fn num_actuators(&self) -> usize {
        self.actuator_slots.len()
    }

    /// Expands actuator values into per-edge inlet/outlet ratios (unit elsewhere).
    pub fn edge_ratios(&self, actuator_values: &[f64]) -> Result<EdgeRatios> {
        if actuator_values.len() != self.num_actuators() {
            return Err(Error::InvalidInput(format!(
                "expected {} actuator values, got {}",
                self.num_actuators(),
                actuator_values.len()
            )));
        }
        let mut ratios = EdgeRatios::unit(self.num_edges());
        for (a, (&(k, pos), &v)) in self.actuator_slots.iter().zip(actuator_values).enumerate() {
            if !(v >= 1.0) {
                return Err(Error::RatioBelowOne { actuator: a, value: v });
            }
            match pos {
                ActuatorPosition::Inlet => ratios.inlet[k] = v,
                ActuatorPosition::Outlet => ratios.outlet[k] = v,
            }
        }
        Ok(ratios)
    }

    /// Whether any outlet regulator is actuated (makes the mass matrix time-varying).
    pub fn has_regulators(&self) -> bool {
        self.actuator_slots.iter().any(|&(_, p)| p == ActuatorPosition::Outlet)
    }

    /// Diagonal of `Q̄_wᵀ L M̄_w`: the linepack weight of each withdrawal node.
    pub fn mass_diagonal(&self, ratios: &EdgeRatios) -> Result<Vec<f64>> {
        let mut diag = vec![0.0; self.num_withdrawal];
        for (k, &j) in self.heads.iter().enumerate() {
            diag[j] += self.lengths[k] * ratios.outlet[k];
        }
        if let Some(node) = diag.iter().position(|&d| d <= 0.0) {
            return Err(Error::SingularMassMatrix { node });
        }
        Ok(diag)
    }

    pub fn incidence(&self, ratios: &EdgeRatios) -> Result<IncidenceSet> {
        // Reported index runs over inlet slots first, then outlet slots.
        if let Some((slot, &v)) = ratios
            .inlet
            .iter()
            .chain(&ratios.outlet)
            .enumerate()
            .find(|(_, &v)| !(v >= 1.0))
        {
            return Err(Error::RatioBelowOne {
                actuator: slot,
                value: v,
            });
        }
        let e = self.num_edges();
        let r = self.num_supply;
        let mut m = Triplets::new(e, self.num_nodes());
        for k in 0..e {
            let tail_col = match self.tails[k] {
                Tail::Supply(i) => i,
                Tail::Withdrawal(i) => r + i,
            };
            m.push(k, tail_col, -ratios.inlet[k]);
            m.push(k, r + self.heads[k], ratios.outlet[k]);
        }
        let m = m.to_csr();
        let supply_cols: Vec<usize> = (0..r).collect();
        let withdrawal_cols: Vec<usize> = (r..r + self.num_withdrawal).collect();
        let m_s = m.select_columns(&supply_cols);
        let m_w = m.select_columns(&withdrawal_cols);
        let m_w_pos = m_w.filter(|v| v > 0.0);
        let m_w_neg = m_w.filter(|v| v < 0.0);
        let m_s_neg = m_s.filter(|v| v < 0.0);
        let sign = |v: f64| v.signum();
        Ok(IncidenceSet {
            q: m.map(sign),
            q_w: m_w.map(sign),
            q_w_pos: m_w_pos.map(sign),
            q_w_neg: m_w_neg.map(sign),
            q_s: m_s.map(sign),
            q_s_neg: m_s_neg.map(sign),
            m,
            m_s,
            m_w,
            m_w_pos,
            m_w_neg,
            lengths: Csr::diagonal(&self.lengths),
            friction: Csr::diagonal(
                &self
                    .friction_length
                    .iter()
                    .zip(&self.lengths)
                    .map(|(fl, l)| fl / l)
                    .collect::<Vec<_>>(),
            ),
        })
    }
}

/// Per-edge compressor (inlet) and regulator (outlet) ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRatios {
    pub inlet: Vec<f64>,
    pub outlet: Vec<f64>,
}

impl EdgeRatios {
    pub fn unit(num_edges: usize) -> Self {
        Self {
            inlet: vec![1.0; num_edges],
            outlet: vec![1.0; num_edges],
        }
    }
}

/// The signed incidence family at one instant.
///
/// `m` is `E × V` with `+μ̄_k` at the head and `−μ̲_k` at the tail of edge `k`.
/// The `_pos`/`_neg` matrices are the positive and negative parts, so
/// `m_w = m_w_pos + m_w_neg` and `|m_w| = m_w_pos − m_w_neg`.
#[derive(Debug, Clone)]
pub struct IncidenceSet {
    pub m: Csr,
    pub m_s: Csr,
    pub m_w: Csr,
    pub m_w_pos: Csr,
    pub m_w_neg: Csr,
    pub q: Csr,
    pub q_w: Csr,
    pub q_w_pos: Csr,
    pub q_w_neg: Csr,
    pub q_s: Csr,
    pub q_s_neg: Csr,
    /// `L`, diagonal of segment lengths.
    pub lengths: Csr,
    /// `K`, diagonal of `λ_k / (2 D_k)`.
    pub friction: Csr,
}

impl IncidenceSet {
    /// `F = Q̄_wᵀ L M̄_w`.
    pub fn mass_matrix(&self) -> Csr {
        self.q_w_pos.transpose().mul(&self.lengths).mul(&self.m_w_pos)
    }
}

/// Builds the incidence family of a refined network for the given actuator values.
pub fn incidence(net: &RefinedNetwork, actuator_values: &[f64]) -> Result<IncidenceSet> {
    let topo = Topology::new(&net.network);
    topo.incidence(&topo.edge_ratios(actuator_values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE_STUDY: &str = crate::test_fixtures::CASE_STUDY_NETWORK;

    fn single_pipe(length_km: f64) -> Network {
        parse_network(&format!(
            r#"
[[nodes]]
id = 1
kind = "supply"
[[nodes]]
id = 2
kind = "withdrawal"
[[edges]]
id = 1
from = 1
to = 2
length_km = {length_km}
diameter_m = 0.5
friction = 0.011
"#
        ))
        .unwrap()
    }

    #[test]
    fn parses_case_study_document() {
        let net = parse_network(CASE_STUDY).unwrap();
        assert_eq!(net.nodes().len(), 4);
        assert_eq!(net.edges().len(), 4);
        assert_eq!(net.actuators().len(), 2);
        assert_eq!(net.edges()[0].length, 50_000.0);
        assert_eq!(net.actuators()[1].segment, SegmentChoice::Last);
    }

    #[test]
    fn parses_minimal_pipe() {
        let net = single_pipe(10.0);
        assert_eq!((net.nodes().len(), net.edges().len()), (2, 1));
    }

    #[test]
    fn rejects_unknown_node() {
        let doc = CASE_STUDY.replace("to = 4\nlength_km = 30.0", "to = 9\nlength_km = 30.0");
        assert!(matches!(parse_network(&doc), Err(Error::UnknownNode { node: 9, .. })));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let doc = CASE_STUDY.replace("id = 3\nkind", "id = 2\nkind");
        assert!(matches!(
            parse_network(&doc),
            Err(Error::DuplicateId { kind: "node", id: 2 })
        ));
    }

    #[test]
    fn rejects_supply_after_withdrawal() {
        let doc = r#"
[[nodes]]
id = 1
kind = "withdrawal"
[[nodes]]
id = 2
kind = "supply"
[[edges]]
id = 1
from = 2
to = 1
length_km = 1.0
diameter_m = 0.5
friction = 0.011
"#;
        assert!(matches!(parse_network(doc), Err(Error::NodeOrder { .. })));
    }

    #[test]
    fn rejects_disconnected_graph() {
        let doc = r#"
[[nodes]]
id = 1
kind = "supply"
[[nodes]]
id = 2
kind = "withdrawal"
[[nodes]]
id = 3
kind = "withdrawal"
[[edges]]
id = 1
from = 1
to = 2
length_km = 1.0
diameter_m = 0.5
friction = 0.011
"#;
        assert!(matches!(parse_network(doc), Err(Error::Disconnected)));
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let doc = CASE_STUDY.replacen("friction = 0.011", "friction = 0.0", 1);
        assert!(matches!(
            parse_network(&doc),
            Err(Error::NonPositiveParameter { what: "friction", .. })
        ));
        let doc = CASE_STUDY.replacen("length_km = 50.0", "length_km = -1.0", 1);
        assert!(matches!(
            parse_network(&doc),
            Err(Error::NonPositiveParameter { what: "length", .. })
        ));
    }

    #[test]
    fn refines_case_study_at_10km() {
        let net = parse_network(CASE_STUDY).unwrap();
        let refined = refine(&net, 10_000.0).unwrap();
        let rn = &refined.network;
        assert_eq!(rn.edges().len(), 13);
        assert_eq!(rn.nodes().len(), 13);
        assert_eq!(rn.num_supply(), 1);
        assert_eq!(rn.num_withdrawal(), 12);
        assert!(rn.edges().iter().all(|e| e.length <= 10_000.0));
        // compressors on segments 1 and 5 of the 50 km pipe
        let acts: Vec<_> = rn.actuators().iter().map(|a| (a.edge, a.position)).collect();
        assert_eq!(acts, vec![(1, ActuatorPosition::Inlet), (5, ActuatorPosition::Inlet)]);
        assert_eq!(refined.segments_of(1), vec![0, 1, 2, 3, 4]);
        assert_eq!(refined.node_for_parent(2), Some(5));
    }

    #[test]
    fn refines_single_pipe_into_chain() {
        let refined = refine(&single_pipe(50.0), 10_000.0).unwrap();
        let rn = &refined.network;
        assert_eq!(rn.edges().len(), 5);
        assert_eq!(refined.parent_node.iter().filter(|p| p.is_none()).count(), 4);
        for (k, e) in rn.edges().iter().enumerate() {
            assert_eq!((e.from, e.to), (k as u32 + 1, k as u32 + 2));
        }
    }

    #[test]
    fn refine_is_noop_at_cap() {
        let net = single_pipe(10.0);
        let refined = refine(&net, 10_000.0).unwrap();
        assert_eq!(refined.network.edges(), net.edges());
    }

    #[test]
    fn refine_rejects_nonpositive_cap() {
        assert!(refine(&single_pipe(10.0), 0.0).is_err());
    }

    #[test]
    fn chain_incidence_is_identity_and_subdiagonal() {
        let refined = refine(&single_pipe(50.0), 10_000.0).unwrap();
        let inc = incidence(&refined, &[]).unwrap();
        let pos = inc.m_w_pos.to_dense();
        let neg = inc.m_w_neg.to_dense();
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(pos[(r, c)], if r == c { 1.0 } else { 0.0 });
                assert_eq!(neg[(r, c)], if r == c + 1 { -1.0 } else { 0.0 });
            }
        }
        assert_eq!(inc.q_s_neg.to_dense()[(0, 0)], -1.0);
        assert_eq!(inc.q_s_neg.nnz(), 1);
    }

    #[test]
    fn single_edge_rows_carry_ratios() {
        let doc = r#"
[[nodes]]
id = 1
kind = "supply"
[[nodes]]
id = 2
kind = "withdrawal"
[[edges]]
id = 1
from = 1
to = 2
length_km = 10.0
diameter_m = 0.5
friction = 0.011
[[actuators]]
edge = 1
position = "inlet"
"#;
        let net = refine(&parse_network(doc).unwrap(), 10_000.0).unwrap();
        let inc = incidence(&net, &[1.5]).unwrap();
        assert_eq!(inc.m.get(0, 0), -1.5);
        assert_eq!(inc.m.get(0, 1), 1.0);
        assert!(matches!(incidence(&net, &[0.9]), Err(Error::RatioBelowOne { .. })));
    }

    #[test]
    fn case_study_sign_structure() {
        let net = refine(&parse_network(CASE_STUDY).unwrap(), 10_000.0).unwrap();
        let inc = incidence(&net, &[1.3, 1.2]).unwrap();
        let q = inc.q_w.to_dense();
        // every edge: one +1 at its head; -1 at its tail unless the tail is the supply
        for k in 0..13 {
            let row: Vec<f64> = (0..12).map(|c| q[(k, c)]).collect();
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            let negs = row.iter().filter(|&&v| v == -1.0).count();
            assert_eq!(negs, if k == 0 { 0 } else { 1 });
        }
        // internal chain nodes (auxiliary) have exactly one incoming and one outgoing edge
        for (pos, parent) in net.parent_node.iter().enumerate().skip(1) {
            let col = pos - 1;
            let plus = (0..13).filter(|&k| q[(k, col)] == 1.0).count();
            let minus = (0..13).filter(|&k| q[(k, col)] == -1.0).count();
            if parent.is_none() {
                assert_eq!((plus, minus), (1, 1));
            }
        }
        // cyan (parent 4) has two incoming segments
        let cyan = net.node_for_parent(4).unwrap() - 1;
        assert_eq!((0..13).filter(|&k| q[(k, cyan)] == 1.0).count(), 2);
        // mass matrix is diagonal with linepack lengths
        let f = inc.mass_matrix().to_dense();
        assert_eq!(f[(cyan, cyan)], 20_000.0);
        assert_eq!(f.iter().filter(|v| **v != 0.0).count(), 12);
    }
}
