//! Regional load and fairness measures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{RegionPartition, RoadNetwork, TrafficState};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("region {0} has no attributed edges")]
    EmptyRegion(usize),
    #[error("state has {found} edge records, network has {expected}")]
    StateMismatch { expected: usize, found: usize },
    #[error("mean load is zero")]
    ZeroMeanLoad,
    #[error("Gini needs at least two regions")]
    SingleRegion,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all temporal weights are zero")]
    AllZeroWeights,
    #[error("all loads are zero")]
    AllZero,
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("negative load {0}")]
    NegativeLoad(f64),
}

/// Per-region mean utilization (flow / capacity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoadVector(pub Vec<f64>);

impl LoadVector {
    pub fn new(loads: Vec<f64>) -> Result<Self, MetricsError> {
        if let Some(&bad) = loads.iter().find(|l| !(**l >= 0.0)) {
            return Err(MetricsError::NegativeLoad(bad));
        }
        Ok(Self(loads))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Loads from per-edge flows; edges count toward their `from` node's region.
pub fn region_load_from_flows(
    flows: &[f64],
    partition: &RegionPartition,
    net: &RoadNetwork,
) -> Result<LoadVector, MetricsError> {
    if flows.len() != net.edge_count() {
        return Err(MetricsError::StateMismatch {
            expected: net.edge_count(),
            found: flows.len(),
        });
    }
    let k = partition.region_count();
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (e, edge) in net.edges().iter().enumerate() {
        let r = partition.region_of_edge(net, e);
        sum[r] += flows[e] / edge.capacity;
        count[r] += 1;
    }
    if let Some(r) = count.iter().position(|&c| c == 0) {
        return Err(MetricsError::EmptyRegion(r));
    }
    LoadVector::new(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

pub fn region_load(
    state: &TrafficState,
    partition: &RegionPartition,
    net: &RoadNetwork,
) -> Result<LoadVector, MetricsError> {
    region_load_from_flows(&state.flows(), partition, net)
}

/// Gini coefficient over regional loads, normalized by `2 K² μ`.
///
/// Evaluated through the sorted-rank identity
/// `Σ_i Σ_j |L_i − L_j| = 2 Σ_i (2i − K + 1) L_(i)` (0-based ranks).
pub fn gini_traffic(loads: &LoadVector) -> Result<f64, MetricsError> {
    let k = loads.len();
    if k < 2 {
        return Err(MetricsError::SingleRegion);
    }
    let mu = loads.mean();
    if mu <= 0.0 {
        return Err(MetricsError::ZeroMeanLoad);
    }
    let mut sorted = loads.0.clone();
    sorted.sort_by(f64::total_cmp);
    let pair_sum: f64 = 2.0
        * sorted
            .iter()
            .enumerate()
            .map(|(i, &l)| (2.0 * i as f64 - k as f64 + 1.0) * l)
            .sum::<f64>();
    Ok((pair_sum / (2.0 * (k * k) as f64 * mu)).max(0.0))
}

/// Gini that treats an all-zero load vector as perfectly even.
pub fn gini_or_zero(loads: &LoadVector) -> Result<f64, MetricsError> {
    match gini_traffic(loads) {
        Err(MetricsError::ZeroMeanLoad) => Ok(0.0),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemporalWeights(pub Vec<f64>);

impl TemporalWeights {
    pub fn uniform(t: usize) -> Self {
        Self(vec![1.0; t])
    }
}

/// Time-weighted mean of per-step Gini values, `(1/T) Σ w_t G(t)`.
///
/// All-zero weights yield 0.0, or [`MetricsError::AllZeroWeights`] when
/// `strict` is set.
pub fn gini_temporal(
    series: &[f64],
    weights: &TemporalWeights,
    strict: bool,
) -> Result<f64, MetricsError> {
    if series.len() != weights.0.len() {
        return Err(MetricsError::LengthMismatch(series.len(), weights.0.len()));
    }
    if series.is_empty() {
        return Err(MetricsError::LengthMismatch(0, 0));
    }
    if let Some(&w) = weights.0.iter().find(|w| **w < 0.0) {
        return Err(MetricsError::NegativeWeight(w));
    }
    if strict && weights.0.iter().all(|&w| w == 0.0) {
        return Err(MetricsError::AllZeroWeights);
    }
    let t = series.len() as f64;
    Ok(series.iter().zip(&weights.0).map(|(g, w)| w * g).sum::<f64>() / t)
}

/// Jain's index `(Σx)² / (K Σx²)`.
pub fn jain_index(loads: &LoadVector) -> Result<f64, MetricsError> {
    let sum: f64 = loads.0.iter().sum();
    let sq: f64 = loads.0.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return Err(MetricsError::AllZero);
    }
    Ok(sum * sum / (loads.len() as f64 * sq))
}

/// Jain's index with all-zero loads treated as perfectly fair.
pub fn jain_or_one(loads: &LoadVector) -> f64 {
    jain_index(loads).unwrap_or(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessWeights {
    pub spatial: f64,
    pub temporal: f64,
    pub demographic: f64,
}

impl Default for FairnessWeights {
    fn default() -> Self {
        Self {
            spatial: 0.5,
            temporal: 0.3,
            demographic: 0.2,
        }
    }
}

pub fn combined_fairness(
    spatial: f64,
    temporal: f64,
    demographic: f64,
    w: &FairnessWeights,
) -> Result<f64, MetricsError> {
    for x in [w.spatial, w.temporal, w.demographic] {
        if x < 0.0 {
            return Err(MetricsError::NegativeWeight(x));
        }
    }
    Ok(w.spatial * spatial + w.temporal * temporal + w.demographic * demographic)
}

/// Demographic aggregate over assigned routes: the sum of per-route impacts
/// divided by the number of routes.
pub fn demographic_aggregate(route_impacts: &[f64]) -> f64 {
    if route_impacts.is_empty() {
        0.0
    } else {
        route_impacts.iter().sum::<f64>() / route_impacts.len() as f64
    }
}

/// `1 − Gini`, the "higher is fairer" presentation of the Gini coefficient.
pub fn fairness_score(gini: f64) -> f64 {
    1.0 - gini
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub round: usize,
    pub gini_spatial: f64,
    pub gini_temporal: f64,
    pub jain: f64,
    pub mean_travel_time_min: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{assign_regions, build_network, EdgeState, Edge, Node, NodeId, RegionId};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn brute_gini(l: &[f64]) -> f64 {
        let k = l.len() as f64;
        let mu = l.iter().sum::<f64>() / k;
        let mut s = 0.0;
        for a in l {
            for b in l {
                s += (a - b).abs();
            }
        }
        s / (2.0 * k * k * mu)
    }

    fn lv(v: &[f64]) -> LoadVector {
        LoadVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini_traffic(&lv(&[0.5, 0.5, 0.5])).unwrap(), 0.0);
        assert!((gini_traffic(&lv(&[0.0, 1.0])).unwrap() - 0.5).abs() < 1e-15);
        assert!((gini_traffic(&lv(&[0.2, 0.4, 0.6, 0.8])).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(gini_traffic(&lv(&[0.0, 0.0])), Err(MetricsError::ZeroMeanLoad));
        assert_eq!(gini_traffic(&lv(&[1.0])), Err(MetricsError::SingleRegion));
    }

    #[test]
    fn temporal_examples() {
        let w = TemporalWeights(vec![1.0, 1.0]);
        assert!((gini_temporal(&[0.2, 0.4], &w, false).unwrap() - 0.3).abs() < 1e-15);
        let w = TemporalWeights(vec![2.0, 0.0]);
        assert!((gini_temporal(&[0.2, 0.4], &w, false).unwrap() - 0.2).abs() < 1e-15);
        let z = TemporalWeights(vec![0.0, 0.0]);
        assert_eq!(gini_temporal(&[0.2, 0.4], &z, false).unwrap(), 0.0);
        assert_eq!(gini_temporal(&[0.2, 0.4], &z, true), Err(MetricsError::AllZeroWeights));
        assert!(matches!(
            gini_temporal(&[0.2], &w, false),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn jain_examples() {
        assert_eq!(jain_index(&lv(&[1.0, 1.0, 1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(jain_index(&lv(&[1.0, 0.0, 0.0, 0.0])).unwrap(), 0.25);
        assert_eq!(jain_index(&lv(&[2.0, 2.0])).unwrap(), 1.0);
        assert_eq!(jain_index(&lv(&[0.0, 0.0])), Err(MetricsError::AllZero));
    }

    #[test]
    fn combined_examples() {
        let w = FairnessWeights { spatial: 1.0, temporal: 0.0, demographic: 0.0 };
        assert_eq!(combined_fairness(0.3, 0.9, 0.9, &w).unwrap(), 0.3);
        let w = FairnessWeights { spatial: 0.5, temporal: 0.3, demographic: 0.2 };
        assert!((combined_fairness(0.2, 0.4, 0.1, &w).unwrap() - 0.24).abs() < 1e-15);
        let w = FairnessWeights { spatial: 0.0, temporal: 0.0, demographic: 0.0 };
        assert_eq!(combined_fairness(0.2, 0.4, 0.1, &w).unwrap(), 0.0);
        let w = FairnessWeights { spatial: -1.0, temporal: 0.0, demographic: 0.0 };
        assert!(combined_fairness(0.2, 0.4, 0.1, &w).is_err());
    }

    fn two_region_net() -> (RoadNetwork, RegionPartition) {
        let net = build_network(
            (0..4).map(Node::new).collect(),
            vec![
                Edge::new(0, 0, 1, 1.0, 100.0),
                Edge::new(1, 1, 0, 1.0, 100.0),
                Edge::new(2, 2, 3, 1.0, 100.0),
                Edge::new(3, 3, 2, 1.0, 100.0),
            ],
        )
        .unwrap();
        let m: BTreeMap<_, _> = [(0, 0), (1, 0), (2, 1), (3, 1)]
            .into_iter()
            .map(|(n, r)| (NodeId(n), RegionId(r)))
            .collect();
        let p = assign_regions(&net, &m).unwrap();
        (net, p)
    }

    fn state(net: &RoadNetwork, flows: &[f64]) -> TrafficState {
        TrafficState {
            time_step: 0,
            edges: net
                .edges()
                .iter()
                .zip(flows)
                .map(|(e, &f)| EdgeState::from_flow(e, f, e.free_flow_time))
                .collect(),
        }
    }

    #[test]
    fn region_load_examples() {
        let (net, p) = two_region_net();
        let one: BTreeMap<_, _> = (0..4).map(|n| (NodeId(n), RegionId(0))).collect();
        let p1 = assign_regions(&net, &one).unwrap();
        let l = region_load(&state(&net, &[30.0, 60.0, 30.0, 60.0]), &p1, &net).unwrap();
        assert!((l.0[0] - 0.45).abs() < 1e-15);
        let l = region_load(&state(&net, &[0.0; 4]), &p, &net).unwrap();
        assert_eq!(l.0, vec![0.0, 0.0]);
        let l = region_load(&state(&net, &[10.0, 20.0, 10.0, 20.0]), &p, &net).unwrap();
        assert_eq!(l.0[0], l.0[1]);
    }

    #[test]
    fn region_without_edges_is_an_error() {
        let net = build_network(
            (0..3).map(Node::new).collect(),
            vec![Edge::new(0, 0, 1, 1.0, 10.0)],
        )
        .unwrap();
        let m: BTreeMap<_, _> = [(0, 0), (1, 0), (2, 1)]
            .into_iter()
            .map(|(n, r)| (NodeId(n), RegionId(r)))
            .collect();
        let p = assign_regions(&net, &m).unwrap();
        assert_eq!(
            region_load_from_flows(&[1.0], &p, &net),
            Err(MetricsError::EmptyRegion(1))
        );
    }

    fn loads() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..10.0, 2..9).prop_filter("positive mean", |v| {
            v.iter().sum::<f64>() > 1e-6
        })
    }

    proptest! {
        #[test]
        fn gini_matches_brute_force(l in loads()) {
            let g = gini_traffic(&lv(&l)).unwrap();
            prop_assert!((g - brute_gini(&l)).abs() <= 1e-12);
            prop_assert!((0.0..1.0).contains(&g));
        }

        #[test]
        fn gini_scale_invariant(l in loads(), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = l.iter().map(|x| x * c).collect();
            let a = gini_traffic(&lv(&l)).unwrap();
            let b = gini_traffic(&lv(&scaled)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn permutation_invariant(l in loads(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut p = l.clone();
            p.shuffle(&mut crate::rng::rng_for(seed, &[]));
            prop_assert!((gini_traffic(&lv(&l)).unwrap() - gini_traffic(&lv(&p)).unwrap()).abs() <= 1e-12);
            let (ja, jb) = (jain_index(&lv(&l)).unwrap(), jain_index(&lv(&p)).unwrap());
            prop_assert!((ja - jb).abs() <= 1e-12);
            let k = l.len() as f64;
            prop_assert!(ja >= 1.0 / k - 1e-12 && ja <= 1.0 + 1e-12);
        }
    }
}
