//! Deterministic synthetic networks: a small grid for desk-scale scenarios and
//! a 207-sensor highway-style topology with six sensor clusters.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::io::{network_from_topology, Reading, RegionRow, SensorSeries, TopologyOptions, TopologyRow};
use super::{
    assign_regions, Edge, EdgeId, Node, NodeId, RegionId, RegionPartition, RoadNetwork,
    SegmentDemographics,
};
use crate::rng::{rng_for, stream};

pub const METR_SENSORS: usize = 207;
pub const METR_UNDIRECTED_EDGES: usize = 3661;
pub const METR_CLUSTER_SIZES: [usize; 6] = [41, 38, 35, 33, 31, 29];

/// Network plus partition and demographics, ready for a scenario.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub net: RoadNetwork,
    pub partition: RegionPartition,
    pub demographics: SegmentDemographics,
}

/// `rows × cols` bidirectional grid split into `region_rows × region_cols`
/// rectangular blocks. Row 0 and column 0 are faster, higher-capacity
/// arterials, so pure shortest-path routing concentrates load on them.
pub fn grid(rows: u32, cols: u32, region_rows: u32, region_cols: u32, seed: u64) -> Fixture {
    let mut rng = rng_for(seed, &[stream::FIXTURE, 1]);
    let id = |r: u32, c: u32| r * cols + c;
    let mut degree = vec![0usize; (rows * cols) as usize];
    let mut edges = Vec::new();
    let push = |edges: &mut Vec<Edge>, u: u32, v: u32, arterial: bool, len: f64| {
        let (speed, capacity) = if arterial { (50.0, 1200.0) } else { (30.0, 600.0) };
        for (a, b) in [(u, v), (v, u)] {
            edges.push(Edge {
                id: EdgeId(edges.len() as u32),
                from: NodeId(a),
                to: NodeId(b),
                free_flow_time: len / speed * 60.0,
                capacity,
                length_miles: len,
                attrs: vec![len, capacity / 1000.0],
            });
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                let len = rng.random_range(0.6..1.4);
                push(&mut edges, id(r, c), id(r, c + 1), r == 0, len);
                degree[id(r, c) as usize] += 1;
                degree[id(r, c + 1) as usize] += 1;
            }
            if r + 1 < rows {
                let len = rng.random_range(0.6..1.4);
                push(&mut edges, id(r, c), id(r + 1, c), c == 0, len);
                degree[id(r, c) as usize] += 1;
                degree[id(r + 1, c) as usize] += 1;
            }
        }
    }
    let nodes = (0..rows * cols)
        .map(|i| Node {
            id: NodeId(i),
            attrs: vec![degree[i as usize] as f64 / 4.0],
        })
        .collect();
    let net = RoadNetwork::build(nodes, edges).expect("grid fixture is valid");
    let region = |r: u32, c: u32| (r * region_rows / rows) * region_cols + c * region_cols / cols;
    let mapping: BTreeMap<NodeId, RegionId> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (NodeId(id(r, c)), RegionId(region(r, c)))))
        .collect();
    let partition = assign_regions(&net, &mapping).expect("grid regions are a partition");
    let k = partition.region_count();
    let base: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..0.9)).collect();
    let vulnerability = (0..net.node_count())
        .map(|i| (base[partition.region_of(i)] + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
        .collect();
    let demographics = SegmentDemographics::new(vec![1.0; net.node_count()], vulnerability)
        .expect("grid demographics are valid");
    Fixture {
        net,
        partition,
        demographics,
    }
}

/// The 4×5 grid with four regions used by the desk scenarios.
pub fn desk_grid(seed: u64) -> Fixture {
    grid(4, 5, 2, 2, seed)
}

/// Raw tables for the 207-sensor fixture.
#[derive(Debug, Clone)]
pub struct MetrLaTables {
    pub sensor_ids: Vec<u32>,
    /// Exactly [`METR_UNDIRECTED_EDGES`] undirected pairs: the closest pairs
    /// by Euclidean distance between synthetic sensor positions.
    pub topology: Vec<TopologyRow>,
    pub regions: Vec<RegionRow>,
}

pub fn metr_la_like(seed: u64) -> MetrLaTables {
    let mut rng = rng_for(seed, &[stream::FIXTURE, 2]);
    let spread = Normal::new(0.0, 2.5).unwrap();
    let mut positions = Vec::with_capacity(METR_SENSORS);
    let mut regions = Vec::with_capacity(METR_SENSORS);
    let mut sensor_ids = Vec::with_capacity(METR_SENSORS);
    let mut next_id = 716_000u32;
    for (k, &size) in METR_CLUSTER_SIZES.iter().enumerate() {
        let angle = k as f64 / METR_CLUSTER_SIZES.len() as f64 * std::f64::consts::TAU;
        let (cx, cy) = (12.0 * angle.cos(), 12.0 * angle.sin());
        let vuln_base: f64 = rng.random_range(0.1..0.9);
        for _ in 0..size {
            next_id += rng.random_range(1..60);
            sensor_ids.push(next_id);
            positions.push((cx + spread.sample(&mut rng), cy + spread.sample(&mut rng)));
            regions.push(RegionRow {
                sensor_id: next_id,
                region_id: k as u32,
                vulnerability: (vuln_base + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0),
                weight: 1.0,
            });
        }
    }
    let mut pairs = Vec::with_capacity(METR_SENSORS * (METR_SENSORS - 1) / 2);
    for i in 0..METR_SENSORS {
        for j in (i + 1)..METR_SENSORS {
            let (a, b) = (positions[i], positions[j]);
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt().max(1e-3);
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let topology = pairs[..METR_UNDIRECTED_EDGES]
        .iter()
        .map(|&(d, i, j)| TopologyRow {
            from: sensor_ids[i],
            to: sensor_ids[j],
            distance_miles: (d * 1e4).round() / 1e4,
        })
        .collect();
    MetrLaTables {
        sensor_ids,
        topology,
        regions,
    }
}

impl MetrLaTables {
    pub fn network(&self) -> RoadNetwork {
        network_from_topology(&self.topology, &self.sensor_ids, TopologyOptions::default())
            .expect("fixture topology is valid")
    }
}

/// Five-minute speed readings with a daily profile, seeded.
pub fn synthetic_sensor_series(sensor_ids: &[u32], steps: usize, seed: u64) -> Vec<SensorSeries> {
    let start = NaiveDate::from_ymd_opt(2012, 3, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    sensor_ids
        .iter()
        .map(|&id| {
            let mut rng = rng_for(seed, &[stream::FIXTURE, 3, id as u64]);
            let free: f64 = rng.random_range(55.0..70.0);
            let noise = Normal::new(0.0, 1.5).unwrap();
            let readings = (0..steps)
                .map(|t| {
                    let hour = (t * 5) as f64 / 60.0 % 24.0;
                    let peak = (-(hour - 8.0).powi(2) / 2.0).exp() + (-(hour - 17.5).powi(2) / 3.0).exp();
                    let v = (free * (1.0 - 0.45 * peak) + noise.sample(&mut rng)).max(3.0);
                    Reading {
                        timestamp: start + Duration::minutes(5 * t as i64),
                        speed_mph: Some((v * 10.0).round() / 10.0),
                    }
                })
                .collect();
            SensorSeries {
                sensor_id: NodeId(id),
                readings,
            }
        })
        .collect()
}
