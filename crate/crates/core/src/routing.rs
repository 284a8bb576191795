//! Fairness-aware route selection: loopless k-shortest candidates, penalty
//! based diverse alternatives, four route objectives, Pareto filtering and
//! sequential assignment with in-step congestion feedback.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{gini_or_zero, gini_traffic, region_load_from_flows, FairnessWeights, MetricsError};
use crate::network::{NodeId, RegionPartition, RoadNetwork, SegmentDemographics, TrafficState};

/// Grams of CO2-equivalent per mile at free flow.
pub const BASE_EMISSIONS_G_PER_MILE: f64 = 200.0;
/// Extra equal-cost paths examined past the `k`-th.
pub const TIE_TIER_LIMIT: usize = 256;

/// Edge-weight multiplier applied per accepted route in [`diverse_routes`].
pub const DIVERSITY_PENALTY: f64 = 1.3;
/// Consecutive duplicate results after which [`diverse_routes`] gives up.
const DIVERSITY_PATIENCE: usize = 8;
const BPR_ALPHA: f64 = 0.15;
const BPR_BETA: i32 = 4;

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("no prediction for edge {0}")]
    MissingPrediction(usize),
    #[error("no demographics for node {0}")]
    MissingDemographics(usize),
    #[error("no state for edge {0}")]
    MissingState(usize),
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("no candidates")]
    NoCandidates,
    #[error("invalid request {vehicle}: {reason}")]
    InvalidRequest { vehicle: u64, reason: String },
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRequest {
    pub vehicle_id: u64,
    pub origin: NodeId,
    pub destination: NodeId,
    /// Per-vehicle `β` override, consulted only when
    /// [`AssignOptions::use_preferences`] is set.
    #[serde(default)]
    pub preferences: Option<[f64; 4]>,
}

impl VehicleRequest {
    pub fn new(vehicle_id: u64, origin: u32, destination: u32) -> Self {
        Self {
            vehicle_id,
            origin: NodeId(origin),
            destination: NodeId(destination),
            preferences: None,
        }
    }

    /// Node indices of origin and destination.
    pub fn endpoints(&self, net: &RoadNetwork) -> Result<(usize, usize), RoutingError> {
        let bad = |reason: String| RoutingError::InvalidRequest {
            vehicle: self.vehicle_id,
            reason,
        };
        let o = net
            .node_index(self.origin)
            .ok_or_else(|| bad(format!("unknown origin {}", self.origin.0)))?;
        let d = net
            .node_index(self.destination)
            .ok_or_else(|| bad(format!("unknown destination {}", self.destination.0)))?;
        if o == d {
            return Err(bad("origin equals destination".into()));
        }
        Ok((o, d))
    }
}

/// An ordered list of edge indices with a stable content hash.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Route {
    pub edges: Vec<usize>,
    pub route_id: u64,
}

impl Route {
    pub fn new(edges: Vec<usize>) -> Self {
        // FNV-1a over the little-endian edge indices.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &edges {
            for b in (*e as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Self { edges, route_id: h }
    }

    /// Node indices visited, origin first.
    pub fn nodes(&self, net: &RoadNetwork) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.edges.len() + 1);
        if let Some(&first) = self.edges.first() {
            out.push(net.endpoints(first).0);
        }
        out.extend(self.edges.iter().map(|&e| net.endpoints(e).1));
        out
    }

    /// Consecutive edges share endpoints and no edge repeats.
    pub fn is_simple_path(&self, net: &RoadNetwork) -> bool {
        let connected = self
            .edges
            .windows(2)
            .all(|w| net.endpoints(w[0]).1 == net.endpoints(w[1]).0);
        let mut seen = HashSet::new();
        connected && self.edges.iter().all(|e| seen.insert(*e))
    }

    pub fn cost(&self, weights: &[f64]) -> f64 {
        self.edges.iter().map(|&e| weights[e]).sum()
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(
    net: &RoadNetwork,
    weights: &[f64],
    src: usize,
    dst: usize,
    banned_edges: &[bool],
    banned_nodes: &[bool],
) -> Option<Vec<usize>> {
    let n = net.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut via: Vec<Option<usize>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Entry(0.0, src));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        if u == dst {
            break;
        }
        for &e in net.out_edges(u) {
            let v = net.endpoints(e).1;
            if banned_edges[e] || banned_nodes[v] {
                continue;
            }
            let nd = d + weights[e];
            if nd < dist[v] {
                dist[v] = nd;
                via[v] = Some(e);
                heap.push(Entry(nd, v));
            }
        }
    }
    if !dist[dst].is_finite() {
        return None;
    }
    let mut edges = Vec::new();
    let mut at = dst;
    while at != src {
        let e = via[at]?;
        edges.push(e);
        at = net.endpoints(e).0;
    }
    edges.reverse();
    Some(edges)
}

fn by_cost_then_edges(weights: &[f64]) -> impl Fn(&Route, &Route) -> Ordering + '_ {
    move |a, b| {
        a.cost(weights)
            .total_cmp(&b.cost(weights))
            .then_with(|| a.edges.cmp(&b.edges))
    }
}

/// Yen's algorithm: up to `k` loopless paths in non-decreasing cost. An
/// unreachable destination yields an empty list.
///
/// Equal-cost paths are ordered by edge sequence. To make the cut at `k`
/// independent of discovery order, the search continues through the whole
/// cost tier of the `k`-th path (at most [`TIE_TIER_LIMIT`] extra paths)
/// before sorting and truncating.
pub fn k_shortest_paths(
    net: &RoadNetwork,
    origin: usize,
    destination: usize,
    k: usize,
    weights: &[f64],
) -> Vec<Route> {
    let n = net.node_count();
    let m = net.edge_count();
    if k == 0 || origin == destination {
        return Vec::new();
    }
    let Some(first) = dijkstra(net, weights, origin, destination, &vec![false; m], &vec![false; n]) else {
        return Vec::new();
    };
    let mut found = vec![Route::new(first)];
    let mut pool: Vec<Route> = Vec::new();
    let order = by_cost_then_edges(weights);
    loop {
        let prev = found.last().expect("non-empty").clone();
        let prev_nodes = prev.nodes(net);
        for i in 0..prev.edges.len() {
            let spur = prev_nodes[i];
            let root = &prev.edges[..i];
            let mut banned_edges = vec![false; m];
            for p in &found {
                if p.edges.len() > i && &p.edges[..i] == root {
                    banned_edges[p.edges[i]] = true;
                }
            }
            let mut banned_nodes = vec![false; n];
            for &v in &prev_nodes[..i] {
                banned_nodes[v] = true;
            }
            if let Some(tail) = dijkstra(net, weights, spur, destination, &banned_edges, &banned_nodes) {
                let mut edges = root.to_vec();
                edges.extend(tail);
                let cand = Route::new(edges);
                if !found.contains(&cand) && !pool.contains(&cand) {
                    pool.push(cand);
                }
            }
        }
        if pool.is_empty() {
            break;
        }
        pool.sort_by(&order);
        if found.len() >= k {
            let kth = found[k - 1].cost(weights);
            let next = pool[0].cost(weights);
            if next > kth + 1e-12 * kth.abs().max(1.0) || found.len() >= k + TIE_TIER_LIMIT {
                break;
            }
        }
        found.push(pool.remove(0));
    }
    found.sort_by(&order);
    found.truncate(k);
    found
}

/// Alternatives found by re-running shortest path with the weight of every
/// edge on an accepted (or re-found) route multiplied by 1.3. Stops after
/// `count` new routes, or when the penalized search keeps returning known
/// routes.
pub fn diverse_routes(
    net: &RoadNetwork,
    origin: usize,
    destination: usize,
    base_routes: &[Route],
    count: usize,
    weights: &[f64],
) -> Vec<Route> {
    let mut penalized = weights.to_vec();
    let penalize = |w: &mut [f64], r: &Route| r.edges.iter().for_each(|&e| w[e] *= DIVERSITY_PENALTY);
    for r in base_routes {
        penalize(&mut penalized, r);
    }
    let none_e = vec![false; net.edge_count()];
    let none_n = vec![false; net.node_count()];
    let mut known: HashSet<u64> = base_routes.iter().map(|r| r.route_id).collect();
    let mut out = Vec::new();
    let mut misses = 0;
    while out.len() < count && misses < DIVERSITY_PATIENCE {
        let Some(edges) = dijkstra(net, &penalized, origin, destination, &none_e, &none_n) else {
            break;
        };
        let route = Route::new(edges);
        penalize(&mut penalized, &route);
        if known.insert(route.route_id) {
            out.push(route);
            misses = 0;
        } else {
            misses += 1;
        }
    }
    out
}

/// `Σ ŵ_e` over the route.
pub fn route_travel_time(route: &Route, predicted: &[f64]) -> Result<f64, RoutingError> {
    route.edges.iter().try_fold(0.0, |acc, &e| match predicted.get(e) {
        Some(w) if w.is_finite() => Ok(acc + w),
        _ => Err(RoutingError::MissingPrediction(e)),
    })
}

/// Change in regional Gini from adding `unit_flow` to every route edge. An
/// all-zero baseline counts as perfectly even.
pub fn spatial_impact(
    route: &Route,
    flows: &[f64],
    unit_flow: f64,
    partition: &RegionPartition,
    net: &RoadNetwork,
) -> Result<f64, RoutingError> {
    let before = gini_or_zero(&region_load_from_flows(flows, partition, net)?)?;
    let mut after = flows.to_vec();
    for &e in &route.edges {
        *after.get_mut(e).ok_or(RoutingError::MissingState(e))? += unit_flow;
    }
    let after = gini_traffic(&region_load_from_flows(&after, partition, net)?)?;
    Ok(after - before)
}

/// `Σ ω_v · vulnerability_v · (increment / capacity)` with `v` the node
/// each route edge leaves from.
pub fn demographic_impact(
    route: &Route,
    demographics: &SegmentDemographics,
    unit_flow: f64,
    net: &RoadNetwork,
) -> Result<f64, RoutingError> {
    route.edges.iter().try_fold(0.0, |acc, &e| {
        let v = net.endpoints(e).0;
        let (Some(w), Some(vul)) = (demographics.weight.get(v), demographics.vulnerability.get(v)) else {
            return Err(RoutingError::MissingDemographics(v));
        };
        Ok(acc + w * vul * unit_flow / net.edges()[e].capacity)
    })
}

/// `Σ length · 200 g/mile · travel_time / free_flow_time`.
pub fn emissions_estimate(route: &Route, travel_times: &[f64], net: &RoadNetwork) -> Result<f64, RoutingError> {
    route.edges.iter().try_fold(0.0, |acc, &e| {
        let tt = travel_times.get(e).ok_or(RoutingError::MissingState(e))?;
        let edge = &net.edges()[e];
        Ok(acc + edge.length_miles * BASE_EMISSIONS_G_PER_MILE * tt / edge.free_flow_time)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteObjectives {
    pub travel_time: f64,
    pub spatial: f64,
    pub demographic: f64,
    pub emissions: f64,
}

impl RouteObjectives {
    pub fn to_array(&self) -> [f64; 4] {
        [self.travel_time, self.spatial, self.demographic, self.emissions]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    /// Weights on travel time, spatial impact, demographic impact, emissions.
    pub beta: [f64; 4],
    /// Efficiency share in `[0, 1]`; the fairness objectives get `1 − λ`.
    pub lambda: f64,
    pub fairness: FairnessWeights,
    /// Min-max normalize objectives over the candidate set.
    pub normalize: bool,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            beta: [1.0, 1.0, 1.0, 1.0],
            lambda: 0.5,
            fairness: FairnessWeights::default(),
            normalize: true,
        }
    }
}

impl ObjectiveWeights {
    /// Pure travel-time routing.
    pub fn shortest_path() -> Self {
        Self {
            beta: [1.0, 0.0, 0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RoutingError> {
        if let Some(b) = self.beta.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
            return Err(RoutingError::InvalidWeights(format!("beta component {b}")));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RoutingError::LambdaOutOfRange(self.lambda));
        }
        combined_check(&self.fairness)
    }

    /// Per-objective weights in the Pareto distance: `λ` scales the
    /// efficiency objectives (time, emissions), `1 − λ` the fairness ones.
    pub fn distance_weights(&self) -> [f64; 4] {
        let [b1, b2, b3, b4] = self.beta;
        let l = self.lambda;
        [l * b1, (1.0 - l) * b2, (1.0 - l) * b3, l * b4]
    }

    /// `α_s F_spatial + α_d F_demo`; a single route has no temporal term.
    pub fn fairness_objective(&self, o: &RouteObjectives) -> f64 {
        self.fairness.spatial * o.spatial + self.fairness.demographic * o.demographic
    }
}

fn combined_check(w: &FairnessWeights) -> Result<(), RoutingError> {
    crate::metrics::combined_fairness(0.0, 0.0, 0.0, w)?;
    Ok(())
}

/// Per-objective `(min, max)` over a candidate set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveRanges {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl ObjectiveRanges {
    pub fn of(objs: &[RouteObjectives]) -> Self {
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for o in objs {
            for (k, v) in o.to_array().into_iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Self { min, max }
    }

    /// Maps each objective to `[0, 1]`; a constant objective maps to 0.
    pub fn normalize(&self, o: &RouteObjectives) -> [f64; 4] {
        let a = o.to_array();
        std::array::from_fn(|k| {
            let span = self.max[k] - self.min[k];
            if span > 0.0 {
                (a[k] - self.min[k]) / span
            } else {
                0.0
            }
        })
    }
}

/// `β · objectives`, optionally on min-max normalized objectives.
pub fn route_utility(objs: &RouteObjectives, beta: &[f64; 4], ranges: Option<&ObjectiveRanges>) -> f64 {
    let v = match ranges {
        Some(r) => r.normalize(objs),
        None => objs.to_array(),
    };
    v.iter().zip(beta).map(|(x, b)| x * b).sum()
}

/// `λ f_time + (1 − λ) f_fairness`.
pub fn scalarize(time_obj: f64, fairness_obj: f64, lambda: f64) -> Result<f64, RoutingError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RoutingError::LambdaOutOfRange(lambda));
    }
    Ok(lambda * time_obj + (1.0 - lambda) * fairness_obj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub route: Route,
    pub objectives: RouteObjectives,
}

/// Candidate indices ordered by `scalarize(T, fairness, λ)`, ties by
/// route id.
pub fn rank_candidates(cands: &[Candidate], weights: &ObjectiveWeights) -> Result<Vec<usize>, RoutingError> {
    let scores: Vec<f64> = cands
        .iter()
        .map(|c| {
            scalarize(
                c.objectives.travel_time,
                weights.fairness_objective(&c.objectives),
                weights.lambda,
            )
        })
        .collect::<Result<_, _>>()?;
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(cands[a].route.route_id.cmp(&cands[b].route.route_id))
    });
    Ok(idx)
}

/// Ideal point and normalization ranges over the current candidate set, plus
/// the per-objective distance weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParetoContext {
    pub ideal: [f64; 4],
    pub ranges: ObjectiveRanges,
    pub weights: [f64; 4],
}

impl ParetoContext {
    pub fn new(cands: &[Candidate], weights: [f64; 4]) -> Self {
        let objs: Vec<RouteObjectives> = cands.iter().map(|c| c.objectives).collect();
        let ranges = ObjectiveRanges::of(&objs);
        Self {
            ideal: ranges.min,
            ranges,
            weights,
        }
    }

    /// Weighted Euclidean distance to the ideal point in normalized space.
    pub fn distance(&self, o: &RouteObjectives) -> f64 {
        let n = self.ranges.normalize(o);
        n.iter().zip(&self.weights).map(|(x, w)| w * x * x).sum::<f64>().sqrt()
    }
}

/// `a` dominates `b`: no worse anywhere and strictly better somewhere.
pub fn dominates(a: &RouteObjectives, b: &RouteObjectives) -> bool {
    let (a, b) = (a.to_array(), b.to_array());
    a.iter().zip(&b).all(|(x, y)| x <= y) && a.iter().zip(&b).any(|(x, y)| x < y)
}

/// Indices of candidates no other candidate dominates.
pub fn non_dominated(cands: &[Candidate]) -> Vec<usize> {
    (0..cands.len())
        .filter(|&i| !cands.iter().any(|c| dominates(&c.objectives, &cands[i].objectives)))
        .collect()
}

/// Among non-dominated candidates, the one closest to the ideal point; ties
/// by lower travel time, then lower route id.
pub fn pareto_select(cands: &[Candidate], ctx: &ParetoContext) -> Result<usize, RoutingError> {
    non_dominated(cands)
        .into_iter()
        .map(|i| (i, ctx.distance(&cands[i].objectives)))
        .min_by(|(a, da), (b, db)| {
            da.total_cmp(db)
                .then(
                    cands[*a]
                        .objectives
                        .travel_time
                        .total_cmp(&cands[*b].objectives.travel_time),
                )
                .then(cands[*a].route.route_id.cmp(&cands[*b].route.route_id))
        })
        .map(|(i, _)| i)
        .ok_or(RoutingError::NoCandidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignOptions {
    /// Yen candidates per request.
    pub k: usize,
    /// Additional diverse candidates per request.
    pub diverse: usize,
    /// Hourly flow one vehicle adds to each edge of its route.
    pub unit_flow: f64,
    /// Feed each assignment back into the flows seen by later requests.
    pub update_state: bool,
    pub use_preferences: bool,
}

impl Default for AssignOptions {
    fn default() -> Self {
        Self {
            k: 3,
            diverse: 2,
            unit_flow: 12.0,
            update_state: true,
            use_preferences: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub vehicle_id: u64,
    pub route: Route,
    pub objectives: RouteObjectives,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// In ascending vehicle id.
    pub assignments: Vec<Assignment>,
    pub unreachable: Vec<u64>,
    /// Flows after every accepted assignment.
    pub flows: Vec<f64>,
}

/// BPR multiplier `1 + 0.15 (v/c)^4`.
pub fn bpr_factor(flow: f64, capacity: f64) -> f64 {
    1.0 + BPR_ALPHA * (flow / capacity).powi(BPR_BETA)
}

/// Inputs shared by every request of one assignment pass.
pub struct RoutingContext<'a> {
    pub net: &'a RoadNetwork,
    pub partition: &'a RegionPartition,
    pub demographics: &'a SegmentDemographics,
    pub state: &'a TrafficState,
    /// Model travel times per edge, in minutes.
    pub predicted: &'a [f64],
}

/// Greedy sequential assignment in ascending vehicle id. Each request sees
/// the flows left by earlier ones: model times are scaled by the BPR ratio
/// between the current and the starting flow on each edge.
pub fn assign_routes(
    ctx: &RoutingContext<'_>,
    requests: &[VehicleRequest],
    weights: &ObjectiveWeights,
    opts: &AssignOptions,
) -> Result<AssignmentResult, RoutingError> {
    weights.validate()?;
    let net = ctx.net;
    if ctx.predicted.len() != net.edge_count() {
        return Err(RoutingError::MissingPrediction(ctx.predicted.len().min(net.edge_count())));
    }
    if ctx.state.edges.len() != net.edge_count() {
        return Err(RoutingError::MissingState(ctx.state.edges.len().min(net.edge_count())));
    }
    let start = ctx.state.flows();
    let mut flows = start.clone();
    let mut order: Vec<&VehicleRequest> = requests.iter().collect();
    order.sort_by_key(|r| r.vehicle_id);
    let mut assignments = Vec::new();
    let mut unreachable = Vec::new();
    for req in order {
        let (o, d) = req.endpoints(net)?;
        let times: Vec<f64> = net
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| {
                ctx.predicted[e] * bpr_factor(flows[e], edge.capacity) / bpr_factor(start[e], edge.capacity)
            })
            .collect();
        let mut routes = k_shortest_paths(net, o, d, opts.k.max(1), &times);
        if routes.is_empty() {
            unreachable.push(req.vehicle_id);
            continue;
        }
        routes.extend(diverse_routes(net, o, d, &routes, opts.diverse, &times));
        let cands = routes
            .into_iter()
            .map(|route| {
                let objectives = RouteObjectives {
                    travel_time: route_travel_time(&route, &times)?,
                    spatial: spatial_impact(&route, &flows, opts.unit_flow, ctx.partition, net)?,
                    demographic: demographic_impact(&route, ctx.demographics, opts.unit_flow, net)?,
                    emissions: emissions_estimate(&route, &times, net)?,
                };
                Ok(Candidate { route, objectives })
            })
            .collect::<Result<Vec<_>, RoutingError>>()?;
        let mut w = *weights;
        if opts.use_preferences {
            if let Some(p) = req.preferences {
                w.beta = p;
                w.validate()?;
            }
        }
        let pick = pareto_select(&cands, &ParetoContext::new(&cands, w.distance_weights()))?;
        let chosen = cands[pick].clone();
        if opts.update_state {
            for &e in &chosen.route.edges {
                flows[e] += opts.unit_flow;
            }
        }
        assignments.push(Assignment {
            vehicle_id: req.vehicle_id,
            route: chosen.route,
            objectives: chosen.objectives,
        });
    }
    Ok(AssignmentResult {
        assignments,
        unreachable,
        flows,
    })
}

#[derive(Debug, Serialize)]
struct AssignmentRow {
    vehicle_id: u64,
    route_edges: String,
    travel_time_min: f64,
    gini_delta: f64,
    demo_impact: f64,
    emissions_g: f64,
}

/// `vehicle_id,route_edges,travel_time_min,gini_delta,demo_impact,emissions_g`
/// with route edges as `;`-joined edge ids.
pub fn write_assignments_csv<W: Write>(
    out: W,
    net: &RoadNetwork,
    assignments: &[Assignment],
) -> Result<(), RoutingError> {
    let mut w = csv::Writer::from_writer(out);
    for a in assignments {
        let route_edges = a
            .route
            .edges
            .iter()
            .map(|&e| net.edges()[e].id.0.to_string())
            .collect::<Vec<_>>()
            .join(";");
        w.serialize(AssignmentRow {
            vehicle_id: a.vehicle_id,
            route_edges,
            travel_time_min: a.objectives.travel_time,
            gini_delta: a.objectives.spatial,
            demo_impact: a.objectives.demographic,
            emissions_g: a.objectives.emissions,
        })
        .map_err(|e| RoutingError::Csv(e.to_string()))?;
    }
    if assignments.is_empty() {
        w.write_record([
            "vehicle_id",
            "route_edges",
            "travel_time_min",
            "gini_delta",
            "demo_impact",
            "emissions_g",
        ])
        .map_err(|e| RoutingError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| RoutingError::Csv(e.to_string()))
}
