//! Scenario driver: seeded demand, BPR ground truth, time-stepped routing
//! interleaved with federated rounds, report files and baseline comparison.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federated::{
    client_edge_scopes, run_round, Client, FederatedConfig, FederatedError, FederatedState, RoundOutcome,
    RoundReport,
};
use crate::gnn::{node_features, predict_state, GnnError, GnnModel, Sample};
use crate::metrics::{gini_or_zero, gini_temporal, jain_or_one, region_load, MetricReport, MetricsError, TemporalWeights};
use crate::network::fixtures::Fixture;
use crate::network::{Edge, EdgeState, RegionPartition, RoadNetwork, TrafficState};
use crate::par::Exec;
use crate::privacy::{PrivacyError, PrivacyReport};
use crate::rng::{rng_for, stream};
use crate::routing::{
    assign_routes, write_assignments_csv, AssignOptions, Assignment, ObjectiveWeights, RoutingContext, RoutingError,
    VehicleRequest,
};

/// Share of last step's flow still on an edge.
pub const FLOW_DECAY: f64 = 0.7;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("incomplete report: {0}")]
    IncompleteReport(String),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Federated(#[from] FederatedError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OdSampling {
    #[default]
    Uniform,
    /// Relative weight per region, shared evenly among its nodes.
    RegionWeighted { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemandModel {
    /// Mean vehicles per step.
    pub rate: f64,
    pub od: OdSampling,
}

impl Default for DemandModel {
    fn default() -> Self {
        Self {
            rate: 60.0,
            od: OdSampling::Uniform,
        }
    }
}

impl DemandModel {
    /// Per-node sampling weights, summing to 1.
    pub fn node_weights(&self, net: &RoadNetwork, partition: &RegionPartition) -> Result<Vec<f64>, SimError> {
        let n = net.node_count();
        let raw: Vec<f64> = match &self.od {
            OdSampling::Uniform => vec![1.0; n],
            OdSampling::RegionWeighted { weights } => {
                if weights.len() != partition.region_count() {
                    return Err(SimError::InvalidScenario(format!(
                        "{} region weights for {} regions",
                        weights.len(),
                        partition.region_count()
                    )));
                }
                (0..n)
                    .map(|v| {
                        let r = partition.region_of(v);
                        weights[r] / partition.members(r).len() as f64
                    })
                    .collect()
            }
        };
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) || raw.iter().any(|w| !(*w >= 0.0)) {
            return Err(SimError::InvalidScenario("sampling weights must be >= 0 and not all zero".into()));
        }
        Ok(raw.iter().map(|w| w / total).collect())
    }
}

/// Seeded requests for one step: a Poisson count, then origin/destination
/// draws with origin = destination rejected. Ids start at `first_id`.
pub fn generate_demand(
    model: &DemandModel,
    net: &RoadNetwork,
    partition: &RegionPartition,
    step: u64,
    seed: u64,
    first_id: u64,
) -> Result<Vec<VehicleRequest>, SimError> {
    if !(model.rate >= 0.0 && model.rate.is_finite()) {
        return Err(SimError::InvalidScenario(format!("demand rate {}", model.rate)));
    }
    if model.rate == 0.0 {
        return Ok(Vec::new());
    }
    let weights = model.node_weights(net, partition)?;
    if weights.iter().filter(|w| **w > 0.0).count() < 2 {
        return Err(SimError::InvalidScenario("need two nodes with positive weight".into()));
    }
    let mut rng = rng_for(seed, &[stream::DEMAND, step]);
    let count = Poisson::new(model.rate)
        .map_err(|e| SimError::InvalidScenario(e.to_string()))?
        .sample(&mut rng) as u64;
    let pick = WeightedIndex::new(&weights).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    Ok((0..count)
        .map(|i| {
            let o = pick.sample(&mut rng);
            let d = loop {
                let d = pick.sample(&mut rng);
                if d != o {
                    break d;
                }
            };
            VehicleRequest {
                vehicle_id: first_id + i,
                origin: net.nodes()[o].id,
                destination: net.nodes()[d].id,
                preferences: None,
            }
        })
        .collect())
}

/// Volume-delay parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeDynamics {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for EdgeDynamics {
    fn default() -> Self {
        Self { alpha: 0.15, beta: 4.0 }
    }
}

/// `free_flow · (1 + α (flow / capacity)^β)`.
pub fn ground_truth_time(edge: &Edge, flow: f64, dynamics: &EdgeDynamics) -> f64 {
    edge.free_flow_time * (1.0 + dynamics.alpha * (flow / edge.capacity).powf(dynamics.beta))
}

/// Decays every flow by 0.7, adds `injections`, and recomputes times.
pub fn step(net: &RoadNetwork, state: &TrafficState, injections: &[f64], dynamics: &EdgeDynamics) -> TrafficState {
    TrafficState {
        time_step: state.time_step + 1,
        edges: net
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| {
                let flow = (FLOW_DECAY * state.edges[e].flow + injections[e]).max(0.0);
                EdgeState::from_flow(edge, flow, ground_truth_time(edge, flow, dynamics))
            })
            .collect(),
    }
}

/// Hourly flow per edge from the assigned routes.
pub fn injections(net: &RoadNetwork, assignments: &[Assignment], unit_flow: f64) -> Vec<f64> {
    let mut out = vec![0.0; net.edge_count()];
    for a in assignments {
        for &e in &a.route.edges {
            out[e] += unit_flow;
        }
    }
    out
}

/// Sensor view of a state: speeds carry multiplicative Gaussian noise.
pub fn observe(net: &RoadNetwork, state: &TrafficState, noise: f64, seed: u64) -> TrafficState {
    let mut rng = rng_for(seed, &[stream::OBSERVATION, state.time_step]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let edges = net
        .edges()
        .iter()
        .zip(&state.edges)
        .map(|(edge, s)| {
            let z: f64 = normal.sample(&mut rng);
            let speed = (s.speed * (1.0 + noise * z)).max(0.1);
            let mut o = *s;
            o.speed = speed;
            o.travel_time = edge.length_miles / speed * 60.0;
            o
        })
        .collect();
    TrafficState {
        time_step: state.time_step,
        edges,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Steps between federated rounds.
    pub steps_per_round: usize,
    pub step_minutes: f64,
    /// Total steps; defaults to `rounds × steps_per_round`.
    pub horizon: Option<usize>,
    pub demand: DemandModel,
    pub dynamics: EdgeDynamics,
    /// Relative standard deviation of observed speeds.
    pub observation_noise: f64,
    /// Clear the inference hidden state at each round boundary.
    pub reset_hidden_each_round: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            steps_per_round: 12,
            step_minutes: 5.0,
            horizon: None,
            demand: DemandModel::default(),
            dynamics: EdgeDynamics::default(),
            observation_noise: 0.05,
            reset_hidden_each_round: true,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.steps_per_round == 0 {
            return bad("steps_per_round must be >= 1".into());
        }
        if !(self.step_minutes > 0.0) {
            return bad(format!("step length {} must be > 0", self.step_minutes));
        }
        if self.horizon == Some(0) {
            return bad("horizon must be >= 1".into());
        }
        if !(self.demand.rate >= 0.0 && self.demand.rate.is_finite()) {
            return bad(format!("demand rate {}", self.demand.rate));
        }
        if !(self.dynamics.alpha >= 0.0 && self.dynamics.beta >= 1.0) {
            return bad("dynamics need alpha >= 0 and beta >= 1".into());
        }
        if !(self.observation_noise >= 0.0) {
            return bad(format!("observation noise {}", self.observation_noise));
        }
        Ok(())
    }

    pub fn horizon(&self, rounds: usize) -> usize {
        self.horizon.unwrap_or(rounds * self.steps_per_round)
    }

    /// Hourly flow one vehicle contributes during a step.
    pub fn unit_flow(&self) -> f64 {
        60.0 / self.step_minutes
    }
}

/// Everything that shapes one scenario run besides the road fixture.
#[derive(Debug, Clone)]
pub struct Scenario<'a> {
    pub fixture: &'a Fixture,
    pub config: ScenarioConfig,
    pub federated: FederatedConfig,
    pub weights: ObjectiveWeights,
    pub assign: AssignOptions,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub vehicles: usize,
    pub unreachable: usize,
    pub mean_travel_time_min: Option<f64>,
    pub gini: f64,
    pub jain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub steps: usize,
    pub rounds_completed: usize,
    pub vehicles: usize,
    pub mean_travel_time_min: Option<f64>,
    pub final_gini: f64,
    pub fairness_score: f64,
    pub final_jain: f64,
    pub total_uplink_bytes: u64,
    pub total_downlink_bytes: u64,
    pub total_bytes: u64,
    pub bytes_per_round: Option<f64>,
    pub epsilon_spent: f64,
    pub final_loss: Option<f64>,
    /// Set when the privacy budget stopped training early.
    pub training_stopped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub steps: Vec<StepRecord>,
    pub rounds: Vec<RoundReport>,
    pub privacy: Vec<PrivacyReport>,
    pub metrics: Vec<MetricReport>,
    pub assignments: Vec<Assignment>,
    pub summary: ScenarioSummary,
    pub model: GnnModel,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-client training samples from one observed transition.
fn push_samples(
    clients: &mut [Client],
    scopes: &[Vec<usize>],
    features: &[Vec<f64>],
    hidden: Option<&[Vec<f64>]>,
    next: &TrafficState,
    edge_count: usize,
) {
    for (c, scope) in clients.iter_mut().zip(scopes) {
        let mut targets = vec![None; edge_count];
        for &e in scope {
            targets[e] = Some(next.edges[e].speed);
        }
        c.samples.push(Sample {
            features: features.to_vec(),
            hidden: hidden.map(<[Vec<f64>]>::to_vec),
            targets,
        });
    }
}

/// Runs the scenario: each step draws demand, predicts edge times with the
/// current global model, assigns routes and advances the ground truth; every
/// `steps_per_round` steps the clients train one federated round on the
/// observations gathered since the previous round.
pub fn run_scenario(sc: &Scenario<'_>, model: GnnModel, exec: Exec) -> Result<ScenarioReport, SimError> {
    sc.config.validate()?;
    let fx = sc.fixture;
    let net = &fx.net;
    let fed = &sc.federated;
    let mut state_fed = FederatedState::new(model, fed)?;
    let scopes = client_edge_scopes(net, &fx.partition, fed.num_clients);
    let fresh = || -> Vec<Client> {
        (0..fed.num_clients)
            .map(|id| Client { id, samples: Vec::new() })
            .collect()
    };
    let mut clients = fresh();
    let horizon = sc.config.horizon(fed.rounds);
    let assign = AssignOptions {
        unit_flow: sc.config.unit_flow(),
        ..sc.assign
    };

    let mut truth = TrafficState::free_flow(net);
    let mut seen = observe(net, &truth, sc.config.observation_noise, sc.seed);
    let mut hidden: Option<Vec<Vec<f64>>> = None;
    let mut next_id = 0u64;
    let mut steps = Vec::with_capacity(horizon);
    let mut window: Vec<StepRecord> = Vec::new();
    let mut window_ginis: Vec<f64> = Vec::new();
    let mut rounds = Vec::new();
    let mut privacy = Vec::new();
    let mut metrics = Vec::new();
    let mut all_assignments = Vec::new();
    let mut realized_all = Vec::new();
    let mut stopped: Option<String> = None;

    for t in 0..horizon {
        let requests = generate_demand(&sc.config.demand, net, &fx.partition, t as u64, sc.seed, next_id)?;
        next_id += requests.len() as u64;
        let features = node_features(net, &seen);
        let pred = predict_state(&state_fed.global, net, &seen, hidden.as_deref())?;
        let ctx = RoutingContext {
            net,
            partition: &fx.partition,
            demographics: &fx.demographics,
            state: &truth,
            predicted: &pred.predictions,
        };
        let result = assign_routes(&ctx, &requests, &sc.weights, &assign)?;
        let inj = injections(net, &result.assignments, assign.unit_flow);
        let next = step(net, &truth, &inj, &sc.config.dynamics);
        let realized: Vec<f64> = result
            .assignments
            .iter()
            .map(|a| a.route.edges.iter().map(|&e| next.edges[e].travel_time).sum())
            .collect();
        let loads = region_load(&next, &fx.partition, net)?;
        let record = StepRecord {
            step: t,
            vehicles: requests.len(),
            unreachable: result.unreachable.len(),
            mean_travel_time_min: mean(realized.iter().copied()),
            gini: gini_or_zero(&loads)?,
            jain: jain_or_one(&loads),
        };
        let next_seen = observe(net, &next, sc.config.observation_noise, sc.seed);
        push_samples(&mut clients, &scopes, &features, hidden.as_deref(), &next_seen, net.edge_count());
        realized_all.extend(realized);
        all_assignments.extend(result.assignments);
        hidden = Some(pred.hidden);
        truth = next;
        seen = next_seen;
        window_ginis.push(record.gini);
        window.push(record.clone());
        steps.push(record);

        if (t + 1) % sc.config.steps_per_round == 0 && rounds.len() < fed.rounds {
            let round = rounds.len();
            let travel = mean(window.iter().filter_map(|s| s.mean_travel_time_min));
            let last = window.last().expect("window holds this step");
            let (gini, jain) = (last.gini, last.jain);
            if stopped.is_none() {
                match run_round(&mut state_fed, &clients, net, fed, round, sc.seed, exec) {
                    Ok(RoundOutcome {
                        report, privacy: p, ..
                    }) => {
                        let mut report = report;
                        report.travel_time_min = travel;
                        report.gini = Some(gini);
                        report.jain = Some(jain);
                        rounds.push(report);
                        privacy.push(p);
                    }
                    Err(FederatedError::Privacy(e @ PrivacyError::BudgetExhausted { .. })) => {
                        stopped = Some(format!("round {round}: {e}"));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            metrics.push(MetricReport {
                round,
                gini_spatial: gini,
                gini_temporal: gini_temporal(&window_ginis, &TemporalWeights::uniform(window_ginis.len()), false)?,
                jain,
                mean_travel_time_min: travel.unwrap_or(0.0),
            });
            clients = fresh();
            if sc.config.reset_hidden_each_round {
                hidden = None;
            }
            window.clear();
            window_ginis.clear();
        }
    }

    let last = steps.last().expect("horizon >= 1");
    let ledger = &state_fed.ledger;
    let summary = ScenarioSummary {
        steps: steps.len(),
        rounds_completed: rounds.len(),
        vehicles: all_assignments.len(),
        mean_travel_time_min: mean(realized_all.iter().copied()),
        final_gini: last.gini,
        fairness_score: crate::metrics::fairness_score(last.gini),
        final_jain: last.jain,
        total_uplink_bytes: ledger.total_uplink,
        total_downlink_bytes: ledger.total_downlink,
        total_bytes: ledger.total_bytes(),
        bytes_per_round: (!ledger.entries.is_empty())
            .then(|| ledger.total_bytes() as f64 / ledger.entries.len() as f64),
        epsilon_spent: state_fed.accountant.spent(),
        final_loss: rounds.last().map(|r| r.mean_loss),
        training_stopped: stopped,
    };
    Ok(ScenarioReport {
        steps,
        rounds,
        privacy,
        metrics,
        assignments: all_assignments,
        summary,
        model: state_fed.global,
    })
}

/// A fixed observation corpus for training without routing feedback:
/// demand is routed on ground-truth times and every transition becomes one
/// sample per client.
pub fn observation_corpus(
    fixture: &Fixture,
    config: &ScenarioConfig,
    clients: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<Client>, SimError> {
    config.validate()?;
    let net = &fixture.net;
    let scopes = client_edge_scopes(net, &fixture.partition, clients);
    let mut out: Vec<Client> = (0..clients).map(|id| Client { id, samples: Vec::new() }).collect();
    let assign = AssignOptions {
        unit_flow: config.unit_flow(),
        ..AssignOptions::default()
    };
    let mut truth = TrafficState::free_flow(net);
    let mut seen = observe(net, &truth, config.observation_noise, seed);
    let mut next_id = 0;
    for t in 0..steps {
        let requests = generate_demand(&config.demand, net, &fixture.partition, t as u64, seed, next_id)?;
        next_id += requests.len() as u64;
        let times = truth.travel_times();
        let ctx = RoutingContext {
            net,
            partition: &fixture.partition,
            demographics: &fixture.demographics,
            state: &truth,
            predicted: &times,
        };
        let result = assign_routes(&ctx, &requests, &ObjectiveWeights::shortest_path(), &assign)?;
        let next = step(net, &truth, &injections(net, &result.assignments, assign.unit_flow), &config.dynamics);
        let next_seen = observe(net, &next, config.observation_noise, seed);
        push_samples(&mut out, &scopes, &node_features(net, &seen), None, &next_seen, net.edge_count());
        truth = next;
        seen = next_seen;
    }
    Ok(out)
}

/// Federated rounds only. Stops early, without error, when the privacy
/// budget runs out.
pub fn train_rounds(
    state: &mut FederatedState,
    clients: &[Client],
    net: &RoadNetwork,
    cfg: &FederatedConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<RoundOutcome>, Option<String>), SimError> {
    let mut out = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        match run_round(state, clients, net, cfg, round, seed, exec) {
            Ok(o) => out.push(o),
            Err(FederatedError::Privacy(e @ PrivacyError::BudgetExhausted { .. })) => {
                return Ok((out, Some(format!("round {round}: {e}"))));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((out, None))
}

/// Centered-free trailing mean over `window` entries (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report files

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SimError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SimError::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct StepCsv {
    step: usize,
    vehicles: usize,
    unreachable: usize,
    mean_travel_time_min: String,
    gini: f64,
    jain: f64,
}

#[derive(Serialize)]
struct RoundCsv {
    round: usize,
    mean_loss: f64,
    travel_time_min: String,
    gini: String,
    jain: String,
    epsilon_spent: f64,
    uplink_bytes: u64,
    downlink_bytes: u64,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl ScenarioReport {
    /// Writes `rounds.jsonl`, `privacy.jsonl`, `metrics.jsonl`,
    /// `summary.json` and `model.json`; with `emit_csv` also `steps.csv`,
    /// `rounds.csv` and `assignments.csv`.
    pub fn write(&self, dir: &Path, net: &RoadNetwork, emit_csv: bool) -> Result<Vec<String>, SimError> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("rounds.jsonl"), &self.rounds)?;
        write_jsonl(&dir.join("privacy.jsonl"), &self.privacy)?;
        write_jsonl(&dir.join("metrics.jsonl"), &self.metrics)?;
        write_json(&dir.join("summary.json"), &self.summary)?;
        write_json(&dir.join("model.json"), &self.model)?;
        let mut files: Vec<String> = ["rounds.jsonl", "privacy.jsonl", "metrics.jsonl", "summary.json", "model.json"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if emit_csv {
            let steps: Vec<StepCsv> = self
                .steps
                .iter()
                .map(|s| StepCsv {
                    step: s.step,
                    vehicles: s.vehicles,
                    unreachable: s.unreachable,
                    mean_travel_time_min: opt(s.mean_travel_time_min),
                    gini: s.gini,
                    jain: s.jain,
                })
                .collect();
            write_csv(&dir.join("steps.csv"), &steps)?;
            let rounds: Vec<RoundCsv> = self
                .rounds
                .iter()
                .map(|r| RoundCsv {
                    round: r.round,
                    mean_loss: r.mean_loss,
                    travel_time_min: opt(r.travel_time_min),
                    gini: opt(r.gini),
                    jain: opt(r.jain),
                    epsilon_spent: r.epsilon_spent,
                    uplink_bytes: r.uplink_bytes,
                    downlink_bytes: r.downlink_bytes,
                })
                .collect();
            write_csv(&dir.join("rounds.csv"), &rounds)?;
            let f = std::io::BufWriter::new(fs::File::create(dir.join("assignments.csv"))?);
            write_assignments_csv(f, net, &self.assignments)?;
            files.extend(["steps.csv", "rounds.csv", "assignments.csv"].map(String::from));
        }
        Ok(files)
    }
}

// ---------------------------------------------------------------------------
// Comparison against reported baselines

/// One row of a comparison: any field may be absent in a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MetricRow {
    pub name: String,
    pub mean_travel_time_min: Option<f64>,
    pub final_gini: Option<f64>,
    /// Megabytes (10⁶ bytes) exchanged per round.
    pub mb_per_round: Option<f64>,
    pub epsilon_spent: Option<f64>,
}

impl MetricRow {
    pub fn from_summary(name: &str, s: &ScenarioSummary) -> Self {
        Self {
            name: name.to_string(),
            mean_travel_time_min: s.mean_travel_time_min,
            final_gini: Some(s.final_gini),
            mb_per_round: s.bytes_per_round.map(|b| b / 1e6),
            epsilon_spent: Some(s.epsilon_spent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub baseline: String,
    /// `100 · (ours − baseline) / baseline`.
    pub travel_time_delta_pct: Option<f64>,
    pub gini_delta_pct: Option<f64>,
    pub fairness_score_delta_pct: Option<f64>,
    /// `100 · (1 − ours / baseline)`.
    pub bytes_reduction_pct: Option<f64>,
    pub epsilon_delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub ours: MetricRow,
    pub fairness_score: Option<f64>,
    pub rows: Vec<DeltaRow>,
}

fn pct_delta(ours: Option<f64>, base: Option<f64>) -> Option<f64> {
    match (ours, base) {
        (Some(o), Some(b)) if b != 0.0 => Some(100.0 * (o - b) / b),
        _ => None,
    }
}

/// Percentage deltas of `ours` against each baseline row. Baseline values
/// are taken as given, not recomputed.
pub fn evaluate(ours: &MetricRow, baselines: &[MetricRow]) -> Result<ComparisonTable, SimError> {
    let missing: Vec<&str> = [
        ("mean_travel_time_min", ours.mean_travel_time_min.is_none()),
        ("final_gini", ours.final_gini.is_none()),
    ]
    .iter()
    .filter(|(_, m)| *m)
    .map(|(n, _)| *n)
    .collect();
    if !missing.is_empty() {
        return Err(SimError::IncompleteReport(format!("missing {}", missing.join(", "))));
    }
    let score = |g: Option<f64>| g.map(crate::metrics::fairness_score);
    let rows = baselines
        .iter()
        .map(|b| DeltaRow {
            baseline: b.name.clone(),
            travel_time_delta_pct: pct_delta(ours.mean_travel_time_min, b.mean_travel_time_min),
            gini_delta_pct: pct_delta(ours.final_gini, b.final_gini),
            fairness_score_delta_pct: pct_delta(score(ours.final_gini), score(b.final_gini)),
            bytes_reduction_pct: pct_delta(ours.mb_per_round, b.mb_per_round).map(|d| -d),
            epsilon_delta_pct: pct_delta(ours.epsilon_spent, b.epsilon_spent),
        })
        .collect();
    Ok(ComparisonTable {
        ours: ours.clone(),
        fairness_score: score(ours.final_gini),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::GnnConfig;
    use crate::network::fixtures::desk_grid;

    fn tiny_scenario(fx: &Fixture, rate: f64, horizon: Option<usize>) -> Scenario<'_> {
        Scenario {
            fixture: fx,
            config: ScenarioConfig {
                steps_per_round: 3,
                horizon,
                demand: DemandModel {
                    rate,
                    od: OdSampling::Uniform,
                },
                ..ScenarioConfig::default()
            },
            federated: FederatedConfig {
                num_clients: 4,
                rounds: 2,
                ..FederatedConfig::default()
            },
            weights: ObjectiveWeights::default(),
            assign: AssignOptions::default(),
            seed: 3,
        }
    }

    fn small_model(net: &RoadNetwork) -> GnnModel {
        GnnModel::init(GnnConfig::for_network(net, 8), 1)
    }

    #[test]
    fn demand_examples() {
        let f = desk_grid(1);
        let zero = DemandModel { rate: 0.0, od: OdSampling::Uniform };
        assert!(generate_demand(&zero, &f.net, &f.partition, 0, 1, 0).unwrap().is_empty());
        let m = DemandModel { rate: 5.0, od: OdSampling::Uniform };
        let a = generate_demand(&m, &f.net, &f.partition, 4, 9, 0).unwrap();
        assert_eq!(a, generate_demand(&m, &f.net, &f.partition, 4, 9, 0).unwrap());
        assert!(a.iter().all(|r| r.origin != r.destination));
        let total: usize = (0..10_000)
            .map(|t| generate_demand(&m, &f.net, &f.partition, t, 9, 0).unwrap().len())
            .sum();
        assert!((total as f64 / 10_000.0 / 5.0 - 1.0).abs() < 0.02);
    }

    #[test]
    fn region_weighted_demand_normalizes() {
        let f = desk_grid(1);
        let m = DemandModel {
            rate: 1.0,
            od: OdSampling::RegionWeighted { weights: vec![4.0, 1.0, 1.0, 0.0] },
        };
        let w = m.node_weights(&f.net, &f.partition).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let bad = DemandModel {
            rate: 1.0,
            od: OdSampling::RegionWeighted { weights: vec![1.0] },
        };
        assert!(bad.node_weights(&f.net, &f.partition).is_err());
    }

    #[test]
    fn bpr_examples() {
        let e = Edge::new(0, 0, 1, 2.0, 1000.0);
        let d = EdgeDynamics::default();
        assert_eq!(ground_truth_time(&e, 0.0, &d), 2.0);
        assert!((ground_truth_time(&e, 1000.0, &d) - 2.3).abs() < 1e-12);
        assert!((ground_truth_time(&e, 2000.0, &d) - 6.8).abs() < 1e-12);
    }

    #[test]
    fn step_examples() {
        let f = desk_grid(1);
        let free = TrafficState::free_flow(&f.net);
        let zero = vec![0.0; f.net.edge_count()];
        let same = step(&f.net, &free, &zero, &EdgeDynamics::default());
        assert_eq!(same.edges, free.edges);

        let mut inj = zero.clone();
        inj[3] = 12.0;
        let one = step(&f.net, &free, &inj, &EdgeDynamics::default());
        let two = step(&f.net, &one, &zero, &EdgeDynamics::default());
        assert_eq!(one.edges[3].flow, 12.0);
        assert!((two.edges[3].flow - 8.4).abs() < 1e-12);
        assert!(two.edges.iter().all(|s| s.flow >= 0.0));
    }

    #[test]
    fn flows_stay_bounded_under_constant_injection() {
        let f = desk_grid(1);
        let inj: Vec<f64> = (0..f.net.edge_count()).map(|e| (e % 5) as f64 * 10.0).collect();
        let mut s = TrafficState::free_flow(&f.net);
        for _ in 0..200 {
            s = step(&f.net, &s, &inj, &EdgeDynamics::default());
            for (e, st) in s.edges.iter().enumerate() {
                assert!(st.flow <= inj[e] / (1.0 - FLOW_DECAY) + 1e-9);
                assert!(st.travel_time >= f.net.edges()[e].free_flow_time);
            }
        }
        for (e, st) in s.edges.iter().enumerate() {
            assert!((st.flow - inj[e] / (1.0 - FLOW_DECAY)).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_scenario_reports_free_flow() {
        let f = desk_grid(1);
        let sc = tiny_scenario(&f, 0.0, Some(1));
        let r = run_scenario(&sc, small_model(&f.net), Exec::Sequential).unwrap();
        assert_eq!(r.steps.len(), 1);
        assert_eq!(r.steps[0].vehicles, 0);
        assert_eq!(r.summary.final_gini, 0.0);
        assert_eq!(r.summary.final_jain, 1.0);
        assert_eq!(r.summary.mean_travel_time_min, None);
        assert!(r.rounds.is_empty());
    }

    #[test]
    fn scenario_is_deterministic_and_conserves_injections() {
        let f = desk_grid(2);
        let sc = tiny_scenario(&f, 6.0, None);
        let a = run_scenario(&sc, small_model(&f.net), Exec::Parallel).unwrap();
        let b = run_scenario(&sc, small_model(&f.net), Exec::Sequential).unwrap();
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.model, b.model);
        assert_eq!(a.rounds.len(), 2);
        assert!(a.rounds.iter().all(|r| r.gini.is_some() && r.travel_time_min.is_some()));

        let inj = injections(&f.net, &a.assignments, sc.config.unit_flow());
        let expected: usize = a.assignments.iter().map(|x| x.route.edges.len()).sum();
        assert!((inj.iter().sum::<f64>() - expected as f64 * sc.config.unit_flow()).abs() < 1e-9);
    }

    #[test]
    fn exhausted_budget_freezes_model_but_simulation_continues() {
        let f = desk_grid(2);
        let mut sc = tiny_scenario(&f, 4.0, None);
        sc.federated.privacy.budget_epsilon = Some(0.01);
        let m = small_model(&f.net);
        let r = run_scenario(&sc, m.clone(), Exec::Sequential).unwrap();
        assert!(r.summary.training_stopped.is_some());
        assert!(r.rounds.is_empty());
        assert_eq!(r.steps.len(), 6);
        assert_eq!(r.model, m);
    }

    #[test]
    fn evaluation_examples() {
        let ours = MetricRow {
            name: "ours".into(),
            mean_travel_time_min: Some(14.2),
            final_gini: Some(0.3),
            mb_per_round: Some(28.2),
            epsilon_spent: Some(1.0),
        };
        let same = evaluate(&ours, std::slice::from_ref(&ours)).unwrap();
        let r = &same.rows[0];
        for d in [r.travel_time_delta_pct, r.gini_delta_pct, r.bytes_reduction_pct, r.epsilon_delta_pct] {
            assert_eq!(d.unwrap().abs(), 0.0);
        }
        let base = MetricRow {
            name: "centralized".into(),
            mean_travel_time_min: Some(15.2),
            mb_per_round: Some(256.7),
            ..MetricRow::default()
        };
        let t = evaluate(&ours, &[base]).unwrap();
        assert!((t.rows[0].bytes_reduction_pct.unwrap() - 89.0).abs() < 0.1);
        assert!((t.rows[0].travel_time_delta_pct.unwrap() + 6.6).abs() < 0.05);
        assert_eq!(t.rows[0].gini_delta_pct, None);

        let incomplete = MetricRow::default();
        assert!(matches!(evaluate(&incomplete, &[]), Err(SimError::IncompleteReport(_))));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[3.0, 1.0, 2.0, 6.0], 3), vec![3.0, 2.0, 2.0, 3.0]);
    }
}
