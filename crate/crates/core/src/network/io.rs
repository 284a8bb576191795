//! CSV ingestion for sensor readings, sensor topology and region tables.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Edge, EdgeId, NetworkError, Node, NodeId, RegionId, RoadNetwork};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("sensor {sensor}: timestamps not strictly increasing at row {row}")]
    NonMonotonicTimestamps { sensor: u32, row: usize },
    #[error("unexpected header {found:?}, expected {expected:?}")]
    BadHeader { expected: String, found: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub timestamp: NaiveDateTime,
    /// `None` marks a gap.
    pub speed_mph: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub sensor_id: NodeId,
    pub readings: Vec<Reading>,
}

impl SensorSeries {
    pub fn gap_count(&self) -> usize {
        self.readings.iter().filter(|r| r.speed_mph.is_none()).count()
    }

    /// Linearly interpolates interior runs of at most `max_gap` missing
    /// readings. Longer runs and runs touching either end stay gaps.
    pub fn interpolate_gaps(&mut self, max_gap: usize) {
        let r = &mut self.readings;
        let mut i = 0;
        while i < r.len() {
            if r[i].speed_mph.is_some() {
                i += 1;
                continue;
            }
            let start = i;
            while i < r.len() && r[i].speed_mph.is_none() {
                i += 1;
            }
            let len = i - start;
            if start == 0 || i == r.len() || len > max_gap {
                continue;
            }
            let (t0, v0) = (r[start - 1].timestamp, r[start - 1].speed_mph.unwrap());
            let (t1, v1) = (r[i].timestamp, r[i].speed_mph.unwrap());
            let span = (t1 - t0).num_milliseconds() as f64;
            for k in start..i {
                let f = (r[k].timestamp - t0).num_milliseconds() as f64 / span;
                r[k].speed_mph = Some(v0 + f * (v1 - v0));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorCsvOptions {
    /// METR-LA encodes missing readings as 0.
    pub zero_is_missing: bool,
    pub max_interpolated_gap: usize,
}

impl Default for SensorCsvOptions {
    fn default() -> Self {
        Self {
            zero_is_missing: true,
            max_interpolated_gap: 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn open(path: &Path) -> Result<std::fs::File, IngestError> {
    std::fs::File::open(path).map_err(io_err(path))
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), IngestError> {
    let found = rdr.headers().map_err(|e| IngestError::MalformedRow {
        row: 0,
        reason: e.to_string(),
    })?;
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != expected {
        return Err(IngestError::BadHeader {
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(())
}

fn records<R: Read>(
    rdr: &mut csv::Reader<R>,
    width: usize,
) -> impl Iterator<Item = Result<(usize, csv::StringRecord), IngestError>> + '_ {
    rdr.records().enumerate().map(move |(i, rec)| {
        // Row numbers are 1-based and count the header.
        let row = i + 2;
        let rec = rec.map_err(|e| IngestError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        Ok((row, rec))
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, row: usize, col: &str) -> Result<T, IngestError> {
    s.trim().parse().map_err(|_| IngestError::MalformedRow {
        row,
        reason: format!("cannot parse {col} from {s:?}"),
    })
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Reads `timestamp,sensor_id,speed_mph`. Series are returned in ascending
/// sensor id; each sensor's rows must be strictly increasing in time.
pub fn read_sensor_csv<R: Read>(
    reader: R,
    opts: SensorCsvOptions,
) -> Result<Vec<SensorSeries>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(&mut rdr, &["timestamp", "sensor_id", "speed_mph"])?;
    let mut by_sensor: BTreeMap<u32, (Vec<Reading>, usize)> = BTreeMap::new();
    for rec in records(&mut rdr, 3) {
        let (row, rec) = rec?;
        let timestamp = parse_timestamp(&rec[0]).ok_or_else(|| IngestError::MalformedRow {
            row,
            reason: format!("bad timestamp {:?}", &rec[0]),
        })?;
        let sensor: u32 = parse_num(&rec[1], row, "sensor_id")?;
        let speed = match rec[2].trim() {
            "" => None,
            s => {
                let v: f64 = parse_num(s, row, "speed_mph")?;
                if !v.is_finite() || v < 0.0 {
                    return Err(IngestError::MalformedRow {
                        row,
                        reason: format!("invalid speed {v}"),
                    });
                }
                (!(opts.zero_is_missing && v == 0.0)).then_some(v)
            }
        };
        let (series, _) = by_sensor.entry(sensor).or_insert((Vec::new(), row));
        if let Some(last) = series.last() {
            if timestamp <= last.timestamp {
                return Err(IngestError::NonMonotonicTimestamps { sensor, row });
            }
        }
        series.push(Reading {
            timestamp,
            speed_mph: speed,
        });
    }
    Ok(by_sensor
        .into_iter()
        .map(|(id, (readings, _))| {
            let mut s = SensorSeries {
                sensor_id: NodeId(id),
                readings,
            };
            s.interpolate_gaps(opts.max_interpolated_gap);
            s
        })
        .collect())
}

pub fn ingest_sensor_csv(
    path: &Path,
    opts: SensorCsvOptions,
) -> Result<Vec<SensorSeries>, IngestError> {
    read_sensor_csv(open(path)?, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyOptions {
    /// Pairs farther apart than this are dropped.
    pub distance_threshold_miles: f64,
    pub speed_limit_mph: f64,
    pub capacity_vph: f64,
}

impl Default for TopologyOptions {
    fn default() -> Self {
        Self {
            distance_threshold_miles: f64::INFINITY,
            speed_limit_mph: 60.0,
            capacity_vph: 2000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopologyRow {
    pub from: u32,
    pub to: u32,
    pub distance_miles: f64,
}

pub fn read_topology_rows<R: Read>(reader: R) -> Result<Vec<TopologyRow>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(&mut rdr, &["from", "to", "distance_miles"])?;
    let mut rows = Vec::new();
    for rec in records(&mut rdr, 3) {
        let (row, rec) = rec?;
        let distance_miles: f64 = parse_num(&rec[2], row, "distance_miles")?;
        if !(distance_miles > 0.0 && distance_miles.is_finite()) {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("non-positive distance {distance_miles}"),
            });
        }
        rows.push(TopologyRow {
            from: parse_num(&rec[0], row, "from")?,
            to: parse_num(&rec[1], row, "to")?,
            distance_miles,
        });
    }
    Ok(rows)
}

/// Builds the sensor graph from pairwise distances: each pair within the
/// threshold becomes one undirected adjacency, stored as two directed edges.
///
/// `extra_nodes` declares sensors that may have no adjacency (e.g. from the
/// region table). Nodes are ordered by id.
pub fn network_from_topology(
    rows: &[TopologyRow],
    extra_nodes: &[u32],
    opts: TopologyOptions,
) -> Result<RoadNetwork, IngestError> {
    let mut pairs: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut ids: BTreeSet<u32> = extra_nodes.iter().copied().collect();
    for r in rows {
        ids.insert(r.from);
        ids.insert(r.to);
        if r.from == r.to || r.distance_miles > opts.distance_threshold_miles {
            continue;
        }
        let key = (r.from.min(r.to), r.from.max(r.to));
        let d = pairs.entry(key).or_insert(r.distance_miles);
        *d = d.min(r.distance_miles);
    }
    let mut degree: BTreeMap<u32, usize> = BTreeMap::new();
    for &(a, b) in pairs.keys() {
        *degree.entry(a).or_default() += 1;
        *degree.entry(b).or_default() += 1;
    }
    let max_deg = degree.values().copied().max().unwrap_or(1).max(1) as f64;
    let nodes = ids
        .iter()
        .map(|&id| Node {
            id: NodeId(id),
            attrs: vec![degree.get(&id).copied().unwrap_or(0) as f64 / max_deg],
        })
        .collect();
    let mut edges = Vec::with_capacity(pairs.len() * 2);
    for (k, (&(a, b), &d)) in pairs.iter().enumerate() {
        let fft = d / opts.speed_limit_mph * 60.0;
        for (j, (u, v)) in [(a, b), (b, a)].into_iter().enumerate() {
            edges.push(Edge {
                id: EdgeId((2 * k + j) as u32),
                from: NodeId(u),
                to: NodeId(v),
                free_flow_time: fft,
                capacity: opts.capacity_vph,
                length_miles: d,
                attrs: vec![d, opts.capacity_vph / 1000.0],
            });
        }
    }
    Ok(RoadNetwork::build(nodes, edges)?)
}

pub fn load_topology_csv(
    path: &Path,
    extra_nodes: &[u32],
    opts: TopologyOptions,
) -> Result<RoadNetwork, IngestError> {
    let rows = read_topology_rows(open(path)?)?;
    network_from_topology(&rows, extra_nodes, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionRow {
    pub sensor_id: u32,
    pub region_id: u32,
    pub vulnerability: f64,
    pub weight: f64,
}

pub fn read_region_rows<R: Read>(reader: R) -> Result<Vec<RegionRow>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(&mut rdr, &["sensor_id", "region_id", "vulnerability", "weight"])?;
    let mut rows = Vec::new();
    for rec in records(&mut rdr, 4) {
        let (row, rec) = rec?;
        rows.push(RegionRow {
            sensor_id: parse_num(&rec[0], row, "sensor_id")?,
            region_id: parse_num(&rec[1], row, "region_id")?,
            vulnerability: parse_num(&rec[2], row, "vulnerability")?,
            weight: parse_num(&rec[3], row, "weight")?,
        });
    }
    Ok(rows)
}

pub fn load_regions_csv(path: &Path) -> Result<Vec<RegionRow>, IngestError> {
    read_region_rows(open(path)?)
}

/// Splits region rows into the partition mapping and the demographics table.
#[allow(clippy::type_complexity)]
pub fn split_region_rows(
    rows: &[RegionRow],
) -> (BTreeMap<NodeId, RegionId>, BTreeMap<NodeId, (f64, f64)>) {
    let mapping = rows
        .iter()
        .map(|r| (NodeId(r.sensor_id), RegionId(r.region_id)))
        .collect();
    let demo = rows
        .iter()
        .map(|r| (NodeId(r.sensor_id), (r.weight, r.vulnerability)))
        .collect();
    (mapping, demo)
}

pub fn write_topology_csv<W: Write>(w: W, rows: &[TopologyRow]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["from", "to", "distance_miles"])?;
    for r in rows {
        wtr.write_record([r.from.to_string(), r.to.to_string(), r.distance_miles.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_region_csv<W: Write>(w: W, rows: &[RegionRow]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["sensor_id", "region_id", "vulnerability", "weight"])?;
    for r in rows {
        wtr.write_record([
            r.sensor_id.to_string(),
            r.region_id.to_string(),
            r.vulnerability.to_string(),
            r.weight.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_sensor_csv<W: Write>(w: W, series: &[SensorSeries]) -> csv::Result<()> {
    let mut rows: Vec<(NaiveDateTime, u32, Option<f64>)> = series
        .iter()
        .flat_map(|s| {
            s.readings
                .iter()
                .map(move |r| (r.timestamp, s.sensor_id.0, r.speed_mph))
        })
        .collect();
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["timestamp", "sensor_id", "speed_mph"])?;
    for (t, id, v) in rows {
        wtr.write_record([
            t.format("%Y-%m-%dT%H:%M:%S").to_string(),
            id.to_string(),
            v.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str) -> Result<Vec<SensorSeries>, IngestError> {
        read_sensor_csv(s.as_bytes(), SensorCsvOptions::default())
    }

    #[test]
    fn two_row_file() {
        let s = read(
            "timestamp,sensor_id,speed_mph\n\
             2012-03-01T00:00:00,773869,64.4\n\
             2012-03-01T00:05:00,773869,62.7\n",
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].sensor_id, NodeId(773869));
        assert_eq!(s[0].readings.len(), 2);
    }

    #[test]
    fn out_of_order_rejected() {
        let err = read(
            "timestamp,sensor_id,speed_mph\n\
             2012-03-01T00:05:00,1,64.4\n\
             2012-03-01T00:00:00,1,62.7\n",
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::NonMonotonicTimestamps { sensor: 1, row: 3 }));
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(matches!(
            read("timestamp,sensor_id,speed_mph\n2012-03-01T00:00:00,1\n"),
            Err(IngestError::MalformedRow { row: 2, .. })
        ));
        assert!(matches!(
            read("timestamp,sensor_id,speed_mph\n2012-03-01T00:00:00,x,3\n"),
            Err(IngestError::MalformedRow { .. })
        ));
        assert!(matches!(read("a,b,c\n"), Err(IngestError::BadHeader { .. })));
    }

    #[test]
    fn short_gaps_interpolated_long_gaps_kept() {
        let mut csv = String::from("timestamp,sensor_id,speed_mph\n");
        let speeds = ["60", "0", "", "66", "50", "", "", "", "", "40", ""];
        for (i, v) in speeds.iter().enumerate() {
            csv.push_str(&format!("2012-03-01T00:{:02}:00,5,{v}\n", i * 5));
        }
        let s = &read(&csv).unwrap()[0];
        let got: Vec<Option<f64>> = s.readings.iter().map(|r| r.speed_mph).collect();
        assert_eq!(got[1], Some(62.0));
        assert_eq!(got[2], Some(64.0));
        assert!(got[5..9].iter().all(Option::is_none));
        assert_eq!(got[10], None);
        assert_eq!(s.gap_count(), 5);
    }

    #[test]
    fn topology_threshold_and_symmetry() {
        let rows = read_topology_rows(
            "from,to,distance_miles\n1,2,0.5\n2,1,0.5\n2,3,2.0\n3,3,1.0\n".as_bytes(),
        )
        .unwrap();
        let opts = TopologyOptions {
            distance_threshold_miles: 1.0,
            ..Default::default()
        };
        let net = network_from_topology(&rows, &[9], opts).unwrap();
        assert_eq!(net.node_count(), 4);
        assert_eq!(net.edge_count(), 2);
        assert!((net.edges()[0].free_flow_time - 0.5).abs() < 1e-12);
    }
}
