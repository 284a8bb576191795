//! Road-network graph, regional partition and per-edge traffic state.

pub mod fixtures;
pub mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("edge {edge} references undeclared node {node}")]
    DanglingEdge { edge: u32, node: u32 },
    #[error("edge {edge} has non-positive {what} ({value})")]
    NonPositiveWeight {
        edge: u32,
        what: &'static str,
        value: f64,
    },
    #[error("duplicate node id {0}")]
    DuplicateNode(u32),
    #[error("duplicate edge id {0}")]
    DuplicateEdge(u32),
    #[error("attribute width mismatch: expected {expected}, found {found}")]
    AttributeWidth { expected: usize, found: usize },
    #[error("density needs at least 2 nodes, network has {0}")]
    TooFewNodes(usize),
    #[error("node {0} has no region assignment")]
    UncoveredNode(u32),
    #[error("region {0} has no nodes")]
    EmptyRegion(u32),
    #[error("mapping references unknown node {0}")]
    UnknownNode(u32),
    #[error("node {node}: {what} {value} out of range")]
    InvalidDemographics {
        node: u32,
        what: &'static str,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    /// Static segment attributes.
    #[serde(default)]
    pub attrs: Vec<f64>,
}

impl Node {
    pub fn new(id: u32) -> Self {
        Self {
            id: NodeId(id),
            attrs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    /// Minutes.
    pub free_flow_time: f64,
    /// Vehicles per hour.
    pub capacity: f64,
    pub length_miles: f64,
    #[serde(default)]
    pub attrs: Vec<f64>,
}

impl Edge {
    /// Edge whose length is implied by a 60 mph free-flow speed.
    pub fn new(id: u32, from: u32, to: u32, free_flow_time: f64, capacity: f64) -> Self {
        Self {
            id: EdgeId(id),
            from: NodeId(from),
            to: NodeId(to),
            free_flow_time,
            capacity,
            length_miles: free_flow_time,
            attrs: Vec::new(),
        }
    }
}

/// Validated directed road graph with dense internal indices.
///
/// Nodes keep their declared order; edges are normalized to ascending
/// [`EdgeId`] so edge index `i` is stable across serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: HashMap<NodeId, usize>,
    endpoints: Vec<(usize, usize)>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMode {
    Directed,
    Undirected,
}

impl RoadNetwork {
    pub fn build(nodes: Vec<Node>, mut edges: Vec<Edge>) -> Result<Self, NetworkError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return Err(NetworkError::DuplicateNode(n.id.0));
            }
        }
        if let Some(first) = nodes.first() {
            let w = first.attrs.len();
            if let Some(bad) = nodes.iter().find(|n| n.attrs.len() != w) {
                return Err(NetworkError::AttributeWidth {
                    expected: w,
                    found: bad.attrs.len(),
                });
            }
        }
        edges.sort_by_key(|e| e.id);
        if let Some(w) = edges.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(NetworkError::DuplicateEdge(w[0].id.0));
        }
        let edge_width = edges.first().map_or(0, |e| e.attrs.len());
        let mut endpoints = Vec::with_capacity(edges.len());
        let mut out_edges = vec![Vec::new(); nodes.len()];
        let mut in_edges = vec![Vec::new(); nodes.len()];
        for (k, e) in edges.iter().enumerate() {
            let lookup = |n: NodeId| {
                index.get(&n).copied().ok_or(NetworkError::DanglingEdge {
                    edge: e.id.0,
                    node: n.0,
                })
            };
            let (u, v) = (lookup(e.from)?, lookup(e.to)?);
            for (what, value) in [
                ("free_flow_time", e.free_flow_time),
                ("capacity", e.capacity),
                ("length", e.length_miles),
            ] {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(NetworkError::NonPositiveWeight {
                        edge: e.id.0,
                        what,
                        value,
                    });
                }
            }
            if e.attrs.len() != edge_width {
                return Err(NetworkError::AttributeWidth {
                    expected: edge_width,
                    found: e.attrs.len(),
                });
            }
            endpoints.push((u, v));
            out_edges[u].push(k);
            in_edges[v].push(k);
        }
        Ok(Self {
            nodes,
            edges,
            index,
            endpoints,
            out_edges,
            in_edges,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Dense `(from, to)` node indices of edge `e`.
    pub fn endpoints(&self, e: usize) -> (usize, usize) {
        self.endpoints[e]
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    pub fn in_edges(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    pub fn node_attr_width(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.attrs.len())
    }

    pub fn edge_attr_width(&self) -> usize {
        self.edges.first().map_or(0, |e| e.attrs.len())
    }

    pub fn free_flow_times(&self) -> Vec<f64> {
        self.edges.iter().map(|e| e.free_flow_time).collect()
    }

    pub fn density(&self, mode: DensityMode) -> Result<f64, NetworkError> {
        let n = self.nodes.len();
        if n < 2 {
            return Err(NetworkError::TooFewNodes(n));
        }
        let pairs = (n * (n - 1)) as f64;
        Ok(match mode {
            DensityMode::Directed => {
                let distinct: BTreeSet<(usize, usize)> =
                    self.endpoints.iter().copied().filter(|(u, v)| u != v).collect();
                distinct.len() as f64 / pairs
            }
            DensityMode::Undirected => {
                let distinct: BTreeSet<(usize, usize)> = self
                    .endpoints
                    .iter()
                    .filter(|(u, v)| u != v)
                    .map(|&(u, v)| (u.min(v), u.max(v)))
                    .collect();
                distinct.len() as f64 / (pairs / 2.0)
            }
        })
    }

    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        }
    }
}

/// Serializable form of a [`RoadNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl NetworkSpec {
    pub fn build(self) -> Result<RoadNetwork, NetworkError> {
        RoadNetwork::build(self.nodes, self.edges)
    }
}

/// Convenience wrapper over [`RoadNetwork::build`].
pub fn build_network(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<RoadNetwork, NetworkError> {
    RoadNetwork::build(nodes, edges)
}

pub fn network_density(net: &RoadNetwork, mode: DensityMode) -> Result<f64, NetworkError> {
    net.density(mode)
}

/// Disjoint cover of the node set. Region ids are dense: `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    members: Vec<Vec<usize>>,
    region_of: Vec<usize>,
}

impl RegionPartition {
    pub fn region_count(&self) -> usize {
        self.members.len()
    }

    /// Node indices belonging to region `k`.
    pub fn members(&self, k: usize) -> &[usize] {
        &self.members[k]
    }

    pub fn region_of(&self, node: usize) -> usize {
        self.region_of[node]
    }

    /// Region of edge `e`: the region of its `from` node.
    pub fn region_of_edge(&self, net: &RoadNetwork, e: usize) -> usize {
        self.region_of[net.endpoints(e).0]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Edge indices attributed to each region.
    pub fn edges_by_region(&self, net: &RoadNetwork) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.region_count()];
        for e in 0..net.edge_count() {
            out[self.region_of_edge(net, e)].push(e);
        }
        out
    }
}

/// Builds a partition from a total node → region mapping. The region count
/// is `max(region id) + 1`; any id in that range without nodes is an error.
pub fn assign_regions(
    net: &RoadNetwork,
    mapping: &BTreeMap<NodeId, RegionId>,
) -> Result<RegionPartition, NetworkError> {
    for id in mapping.keys() {
        if net.node_index(*id).is_none() {
            return Err(NetworkError::UnknownNode(id.0));
        }
    }
    let mut region_of = Vec::with_capacity(net.node_count());
    for n in net.nodes() {
        let r = mapping
            .get(&n.id)
            .ok_or(NetworkError::UncoveredNode(n.id.0))?;
        region_of.push(r.0 as usize);
    }
    let k = region_of.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &r) in region_of.iter().enumerate() {
        members[r].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(NetworkError::EmptyRegion(empty as u32));
    }
    Ok(RegionPartition { members, region_of })
}

/// Per-node importance weight and vulnerability score.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDemographics {
    pub weight: Vec<f64>,
    pub vulnerability: Vec<f64>,
}

impl SegmentDemographics {
    pub fn new(weight: Vec<f64>, vulnerability: Vec<f64>) -> Result<Self, NetworkError> {
        for (i, (&w, &v)) in weight.iter().zip(&vulnerability).enumerate() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(NetworkError::InvalidDemographics {
                    node: i as u32,
                    what: "weight",
                    value: w,
                });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(NetworkError::InvalidDemographics {
                    node: i as u32,
                    what: "vulnerability",
                    value: v,
                });
            }
        }
        Ok(Self {
            weight,
            vulnerability,
        })
    }

    pub fn uniform(n: usize, weight: f64, vulnerability: f64) -> Self {
        Self {
            weight: vec![weight; n],
            vulnerability: vec![vulnerability; n],
        }
    }

    /// Builds from a sparse per-node table; missing nodes get weight 1 and
    /// vulnerability 0.
    pub fn from_table(
        net: &RoadNetwork,
        table: &BTreeMap<NodeId, (f64, f64)>,
    ) -> Result<Self, NetworkError> {
        let mut weight = vec![1.0; net.node_count()];
        let mut vulnerability = vec![0.0; net.node_count()];
        for (id, &(w, v)) in table {
            let i = net.node_index(*id).ok_or(NetworkError::UnknownNode(id.0))?;
            weight[i] = w;
            vulnerability[i] = v;
        }
        Self::new(weight, vulnerability)
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    /// Vehicles per hour.
    pub flow: f64,
    /// Miles per hour.
    pub speed: f64,
    /// Minutes.
    pub travel_time: f64,
    /// Vehicles per mile.
    pub density: f64,
    /// Flow in excess of capacity.
    pub queue: f64,
    pub incident: bool,
}

impl EdgeState {
    pub fn from_flow(edge: &Edge, flow: f64, travel_time: f64) -> Self {
        let speed = edge.length_miles / (travel_time / 60.0);
        Self {
            flow,
            speed,
            travel_time,
            density: if speed > 0.0 { flow / speed } else { 0.0 },
            queue: (flow - edge.capacity).max(0.0),
            incident: false,
        }
    }

    /// The per-segment state vector (density, speed, queue, incident flag).
    pub fn vector(&self) -> [f64; 4] {
        [
            self.density,
            self.speed,
            self.queue,
            if self.incident { 1.0 } else { 0.0 },
        ]
    }
}

/// One record per edge, indexed like [`RoadNetwork::edges`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub time_step: u64,
    pub edges: Vec<EdgeState>,
}

impl TrafficState {
    pub fn free_flow(net: &RoadNetwork) -> Self {
        Self {
            time_step: 0,
            edges: net
                .edges()
                .iter()
                .map(|e| EdgeState::from_flow(e, 0.0, e.free_flow_time))
                .collect(),
        }
    }

    pub fn flows(&self) -> Vec<f64> {
        self.edges.iter().map(|s| s.flow).collect()
    }

    pub fn travel_times(&self) -> Vec<f64> {
        self.edges.iter().map(|s| s.travel_time).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete(n: u32) -> RoadNetwork {
        let nodes = (0..n).map(Node::new).collect();
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                edges.push(Edge::new(edges.len() as u32, u, v, 1.0, 100.0));
            }
        }
        build_network(nodes, edges).unwrap()
    }

    #[test]
    fn minimal_graph() {
        let net = build_network(
            vec![Node::new(0), Node::new(1)],
            vec![Edge::new(0, 0, 1, 5.0, 100.0)],
        )
        .unwrap();
        assert_eq!((net.node_count(), net.edge_count()), (2, 1));
        assert_eq!(net.out_edges(0), &[0]);
        assert_eq!(net.in_edges(1), &[0]);
    }

    #[test]
    fn dangling_and_nonpositive_edges_rejected() {
        let err = build_network(vec![Node::new(0)], vec![Edge::new(0, 0, 7, 5.0, 100.0)]);
        assert_eq!(err, Err(NetworkError::DanglingEdge { edge: 0, node: 7 }));
        let err = build_network(
            vec![Node::new(0), Node::new(1)],
            vec![Edge::new(0, 0, 1, 5.0, 0.0)],
        );
        assert!(matches!(err, Err(NetworkError::NonPositiveWeight { what: "capacity", .. })));
    }

    #[test]
    fn adjacency_mirrors_edges() {
        let net = complete(5);
        let mut seen = 0;
        for v in 0..net.node_count() {
            for &e in net.out_edges(v) {
                assert_eq!(net.endpoints(e).0, v);
                seen += 1;
            }
            for &e in net.in_edges(v) {
                assert_eq!(net.endpoints(e).1, v);
            }
        }
        assert_eq!(seen, net.edge_count());
    }

    #[test]
    fn density_examples() {
        assert_eq!(complete(4).density(DensityMode::Undirected).unwrap(), 1.0);
        let net = build_network(
            (0..3).map(Node::new).collect(),
            vec![Edge::new(0, 0, 1, 1.0, 1.0), Edge::new(1, 1, 0, 1.0, 1.0)],
        )
        .unwrap();
        assert!((net.density(DensityMode::Undirected).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((net.density(DensityMode::Directed).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        let one = build_network(vec![Node::new(0)], vec![]).unwrap();
        assert_eq!(one.density(DensityMode::Directed), Err(NetworkError::TooFewNodes(1)));
    }

    #[test]
    fn region_assignment() {
        let net = complete(4);
        let all_zero: BTreeMap<_, _> = (0..4).map(|i| (NodeId(i), RegionId(0))).collect();
        let p = assign_regions(&net, &all_zero).unwrap();
        assert_eq!(p.region_count(), 1);
        assert_eq!(p.sizes(), vec![4]);

        let mut missing = all_zero.clone();
        missing.remove(&NodeId(2));
        assert_eq!(assign_regions(&net, &missing), Err(NetworkError::UncoveredNode(2)));

        let gap: BTreeMap<_, _> = (0..4).map(|i| (NodeId(i), RegionId(i % 2 * 2))).collect();
        assert_eq!(assign_regions(&net, &gap), Err(NetworkError::EmptyRegion(1)));
    }

    #[test]
    fn demographics_validated() {
        assert!(SegmentDemographics::new(vec![1.0], vec![1.5]).is_err());
        assert!(SegmentDemographics::new(vec![-1.0], vec![0.5]).is_err());
        assert!(SegmentDemographics::new(vec![2.0], vec![0.5]).is_ok());
    }
}
