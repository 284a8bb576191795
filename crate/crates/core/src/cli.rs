//! The `fedfair` command line: JSON run configuration, flag overrides,
//! subcommands and run manifests.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federated::{FederatedConfig, FederatedState};
use crate::gnn::{predict_state, GnnConfig, GnnModel};
use crate::network::fixtures::{desk_grid, metr_la_like, Fixture};
use crate::network::io::{
    ingest_sensor_csv, load_regions_csv, load_topology_csv, split_region_rows, SensorCsvOptions, TopologyOptions,
};
use crate::network::{assign_regions, DensityMode, NodeId, RegionId, SegmentDemographics, TrafficState};
use crate::par::Exec;
use crate::routing::{assign_routes, write_assignments_csv, AssignOptions, ObjectiveWeights, RoutingContext, VehicleRequest};
use crate::sim::{
    evaluate, generate_demand, observation_corpus, run_scenario, train_rounds, write_json, write_jsonl, MetricRow,
    Scenario, ScenarioConfig, ScenarioSummary,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("value out of range: {0}")]
    RangeViolation(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed config: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinFixture {
    /// 20-node grid with four regions.
    #[default]
    Desk,
    /// 207 sensors in six clusters.
    MetrLa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    /// Pairs farther apart are dropped; unset keeps every pair.
    pub distance_threshold_miles: Option<f64>,
    pub speed_limit_mph: f64,
    pub capacity_vph: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        let d = TopologyOptions::default();
        Self {
            distance_threshold_miles: None,
            speed_limit_mph: d.speed_limit_mph,
            capacity_vph: d.capacity_vph,
        }
    }
}

impl TopologyConfig {
    pub fn options(&self) -> TopologyOptions {
        TopologyOptions {
            distance_threshold_miles: self.distance_threshold_miles.unwrap_or(f64::INFINITY),
            speed_limit_mph: self.speed_limit_mph,
            capacity_vph: self.capacity_vph,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub hidden: usize,
    /// Starting checkpoint; a fresh seeded model otherwise.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden: 64,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingSettings {
    pub weights: ObjectiveWeights,
    pub assign: AssignOptions,
    /// Traffic state for `route`; free flow otherwise.
    pub state: Option<PathBuf>,
    /// `vehicle_id,origin,destination` CSV for `route`; one step of
    /// generated demand otherwise.
    pub requests: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Simulated steps that make up the training corpus.
    pub corpus_steps: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { corpus_steps: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSettings {
    /// `summary.json` written by `simulate`.
    pub summary: Option<PathBuf>,
    /// A metric row to use instead of a summary.
    pub ours: Option<PathBuf>,
    /// JSON list of baseline metric rows.
    pub baselines: Option<PathBuf>,
}

/// Full run configuration. Every field has a default, so `{}` is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub emit_csv: bool,
    pub topology: Option<PathBuf>,
    pub sensors: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    /// Used when no topology file is given.
    pub fixture: BuiltinFixture,
    pub topology_options: TopologyConfig,
    pub model: ModelSettings,
    pub scenario: ScenarioConfig,
    pub federated: FederatedConfig,
    pub routing: RoutingSettings,
    pub train: TrainSettings,
    pub report: ReportSettings,
    /// Run client training on one thread.
    pub sequential: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("out"),
            emit_csv: false,
            topology: None,
            sensors: None,
            regions: None,
            fixture: BuiltinFixture::Desk,
            topology_options: TopologyConfig::default(),
            model: ModelSettings::default(),
            scenario: ScenarioConfig::default(),
            federated: FederatedConfig::default(),
            routing: RoutingSettings::default(),
            train: TrainSettings::default(),
            report: ReportSettings::default(),
            sequential: false,
        }
    }
}

impl RunConfig {
    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    fn files(&self) -> Vec<&Path> {
        [
            &self.topology,
            &self.sensors,
            &self.regions,
            &self.model.checkpoint,
            &self.routing.state,
            &self.routing.requests,
            &self.report.summary,
            &self.report.ours,
            &self.report.baselines,
        ]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .collect()
    }

    /// Range checks plus existence of every referenced file.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |m: String| Err(ConfigError::RangeViolation(m));
        let p = &self.federated.privacy;
        if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
            return range(format!("epsilon {} must be > 0", p.epsilon));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return range(format!("delta {} must lie in (0, 1)", p.delta));
        }
        if !(p.clip_norm > 0.0 && p.clip_norm.is_finite()) {
            return range(format!("clip_norm {} must be > 0", p.clip_norm));
        }
        if let Some(b) = p.budget_epsilon {
            if !(b > 0.0) {
                return range(format!("budget_epsilon {b} must be > 0"));
            }
        }
        if self.model.hidden == 0 {
            return range("model.hidden must be >= 1".into());
        }
        let t = &self.topology_options;
        if !(t.speed_limit_mph > 0.0 && t.capacity_vph > 0.0) {
            return range("topology speed limit and capacity must be > 0".into());
        }
        if let Some(d) = t.distance_threshold_miles {
            if !(d > 0.0) {
                return range(format!("distance threshold {d} must be > 0"));
            }
        }
        if self.routing.assign.k == 0 || !(self.routing.assign.unit_flow > 0.0) {
            return range("routing.assign needs k >= 1 and unit_flow > 0".into());
        }
        self.federated
            .validate()
            .map_err(|e| ConfigError::RangeViolation(e.to_string()))?;
        self.scenario
            .validate()
            .map_err(|e| ConfigError::RangeViolation(e.to_string()))?;
        self.routing
            .weights
            .validate()
            .map_err(|e| ConfigError::RangeViolation(e.to_string()))?;
        if let Some(missing) = self.files().into_iter().find(|f| !f.is_file()) {
            return Err(ConfigError::MissingFile(missing.to_path_buf()));
        }
        Ok(())
    }
}

/// Written next to every run's outputs. Passing it back as `--config`
/// reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub parallel_build: bool,
    pub config: RunConfig,
    pub outputs: Vec<String>,
}

fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

/// Parses a config (or a run manifest), filling defaults and validating.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))?;
    let is_manifest = value
        .as_object()
        .is_some_and(|o| o.contains_key("command") && o.contains_key("config"));
    let parsed = if is_manifest {
        serde_json::from_value::<Manifest>(value).map(|m| m.config)
    } else {
        serde_json::from_value::<RunConfig>(value)
    };
    let cfg = parsed.map_err(|e| {
        let msg = e.to_string();
        match unknown_key(&msg) {
            Some(k) => ConfigError::UnknownKey(k),
            None => ConfigError::Malformed(msg),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|_| ConfigError::MissingFile(path.to_path_buf()))?;
    parse_config_str(&text)
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(name = "fedfair", version, about = "Federated private traffic prediction and fair routing")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the network from CSV tables and print its statistics.
    Ingest(IngestArgs),
    /// Run the closed-loop scenario and write reports.
    Simulate(CommonArgs),
    /// Federated training rounds only, on a simulated observation corpus.
    Train(CommonArgs),
    /// Assign one batch of requests on a given traffic state.
    Route(RouteArgs),
    /// Compare a run against baseline rows.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run configuration or a previous run's manifest.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    emit_csv: bool,
    /// Single-threaded client training.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// `from,to,distance_miles` CSV.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// `sensor_id,region_id,vulnerability,weight` CSV.
    #[arg(long)]
    regions: Option<PathBuf>,
    /// `timestamp,sensor_id,speed_mph` CSV.
    #[arg(long)]
    sensors: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RouteArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Traffic state JSON.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Model checkpoint used to predict edge times.
    #[arg(long)]
    model: Option<PathBuf>,
    /// `vehicle_id,origin,destination` CSV.
    #[arg(long)]
    requests: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    ours: Option<PathBuf>,
    #[arg(long)]
    baselines: Option<PathBuf>,
}

impl CommonArgs {
    /// Loads the config file (or defaults) and applies flag overrides.
    fn resolve(&self, extra: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rounds {
            cfg.federated.rounds = r;
        }
        if let Some(e) = self.epsilon {
            cfg.federated.privacy.epsilon = e;
        }
        if let Some(d) = self.delta {
            cfg.federated.privacy.delta = d;
        }
        if let Some(c) = self.clip_norm {
            cfg.federated.privacy.clip_norm = c;
        }
        if let Some(c) = self.clients {
            cfg.federated.num_clients = c;
        }
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(ConfigError::RangeViolation(format!("lambda {l} outside [0, 1]")));
            }
            cfg.routing.weights.lambda = l;
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        cfg.emit_csv |= self.emit_csv;
        cfg.sequential |= self.sequential;
        extra(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let Some(command) = cli.command else {
        use clap::CommandFactory;
        let _ = writeln!(err, "{}", Cli::command().render_usage());
        let _ = writeln!(err, "a subcommand is required; see `fedfair --help`");
        return 1;
    };
    match dispatch(command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Ingest(a) => {
            let write_outputs = a.common.output.is_some() || a.common.config.is_some();
            let cfg = a.common.resolve(|c| {
                c.topology = a.topology.clone().or(c.topology.take());
                c.regions = a.regions.clone().or(c.regions.take());
                c.sensors = a.sensors.clone().or(c.sensors.take());
            })?;
            ingest(&cfg, write_outputs, out)
        }
        Command::Simulate(a) => simulate(&a.resolve(|_| {})?, out),
        Command::Train(a) => train(&a.resolve(|_| {})?, out),
        Command::Route(a) => {
            let cfg = a.common.resolve(|c| {
                c.routing.state = a.state.clone().or(c.routing.state.take());
                c.routing.requests = a.requests.clone().or(c.routing.requests.take());
                c.model.checkpoint = a.model.clone().or(c.model.checkpoint.take());
            })?;
            route(&cfg, out)
        }
        Command::Report(a) => {
            let cfg = a.common.resolve(|c| {
                c.report.summary = a.summary.clone().or(c.report.summary.take());
                c.report.ours = a.ours.clone().or(c.report.ours.take());
                c.report.baselines = a.baselines.clone().or(c.report.baselines.take());
            })?;
            report(&cfg, out)
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands

/// Network, partition and demographics from the configured tables, or the
/// built-in fixture.
pub fn load_fixture(cfg: &RunConfig) -> Result<Fixture, CliError> {
    let Some(topology) = &cfg.topology else {
        return Ok(match cfg.fixture {
            BuiltinFixture::Desk => desk_grid(cfg.seed),
            BuiltinFixture::MetrLa => {
                let t = metr_la_like(cfg.seed);
                let net = t.network();
                let (mapping, demo) = split_region_rows(&t.regions);
                Fixture {
                    partition: assign_regions(&net, &mapping).map_err(runtime)?,
                    demographics: SegmentDemographics::from_table(&net, &demo).map_err(runtime)?,
                    net,
                }
            }
        });
    };
    let rows = match &cfg.regions {
        Some(p) => load_regions_csv(p).map_err(runtime)?,
        None => Vec::new(),
    };
    let extra: Vec<u32> = rows.iter().map(|r| r.sensor_id).collect();
    let net = load_topology_csv(topology, &extra, cfg.topology_options.options()).map_err(runtime)?;
    let (mut mapping, demo) = split_region_rows(&rows);
    if rows.is_empty() {
        mapping = net.nodes().iter().map(|n| (n.id, RegionId(0))).collect::<BTreeMap<NodeId, RegionId>>();
    }
    Ok(Fixture {
        partition: assign_regions(&net, &mapping).map_err(runtime)?,
        demographics: SegmentDemographics::from_table(&net, &demo).map_err(runtime)?,
        net,
    })
}

fn initial_model(cfg: &RunConfig, fx: &Fixture) -> Result<GnnModel, CliError> {
    match &cfg.model.checkpoint {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(runtime)?;
            let m: GnnModel = serde_json::from_str(&text).map_err(runtime)?;
            let want = GnnConfig::for_network(&fx.net, m.config.hidden);
            if m.config.static_width != want.static_width || m.config.edge_width != want.edge_width {
                return Err(CliError::Runtime(format!(
                    "checkpoint {} does not match the network's attribute widths",
                    p.display()
                )));
            }
            Ok(m)
        }
        None => Ok(GnnModel::init(GnnConfig::for_network(&fx.net, cfg.model.hidden), cfg.seed)),
    }
}

fn write_manifest(cfg: &RunConfig, command: &str, outputs: Vec<String>) -> Result<(), CliError> {
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        parallel_build: Exec::parallel_available(),
        config: cfg.clone(),
        outputs,
    };
    write_json(&cfg.output.join("manifest.json"), &m).map_err(runtime)
}

#[derive(Serialize)]
struct IngestSummary {
    nodes: usize,
    directed_edges: usize,
    undirected_density: f64,
    directed_density: f64,
    regions: usize,
    sensors: Option<usize>,
    readings: Option<usize>,
    gaps: Option<usize>,
}

fn ingest(cfg: &RunConfig, write_outputs: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let fx = load_fixture(cfg)?;
    let net = &fx.net;
    let und = net.density(DensityMode::Undirected).map_err(runtime)?;
    let dir = net.density(DensityMode::Directed).map_err(runtime)?;
    let series = match &cfg.sensors {
        Some(p) => Some(ingest_sensor_csv(p, SensorCsvOptions::default()).map_err(runtime)?),
        None => None,
    };
    let summary = IngestSummary {
        nodes: net.node_count(),
        directed_edges: net.edge_count(),
        undirected_density: und,
        directed_density: dir,
        regions: fx.partition.region_count(),
        sensors: series.as_ref().map(Vec::len),
        readings: series.as_ref().map(|s| s.iter().map(|x| x.readings.len()).sum()),
        gaps: series.as_ref().map(|s| s.iter().map(|x| x.gap_count()).sum()),
    };
    let w = |e: std::io::Error| runtime(e);
    writeln!(out, "nodes {}", summary.nodes).map_err(w)?;
    writeln!(out, "edges {}", summary.directed_edges).map_err(w)?;
    writeln!(out, "regions {}", summary.regions).map_err(w)?;
    writeln!(out, "density {und:.4}").map_err(w)?;
    if let (Some(s), Some(r), Some(g)) = (summary.sensors, summary.readings, summary.gaps) {
        writeln!(out, "sensors {s} readings {r} gaps {g}").map_err(w)?;
    }
    if write_outputs {
        fs::create_dir_all(&cfg.output).map_err(w)?;
        write_json(&cfg.output.join("network.json"), &summary).map_err(runtime)?;
        write_manifest(cfg, "ingest", vec!["network.json".into()])?;
    }
    Ok(())
}

fn scenario<'a>(cfg: &RunConfig, fx: &'a Fixture) -> Scenario<'a> {
    Scenario {
        fixture: fx,
        config: cfg.scenario.clone(),
        federated: cfg.federated.clone(),
        weights: cfg.routing.weights.clone(),
        assign: cfg.routing.assign,
        seed: cfg.seed,
    }
}

fn simulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let fx = load_fixture(cfg)?;
    let model = initial_model(cfg, &fx)?;
    let report = run_scenario(&scenario(cfg, &fx), model, cfg.exec()).map_err(runtime)?;
    let files = report.write(&cfg.output, &fx.net, cfg.emit_csv).map_err(runtime)?;
    write_manifest(cfg, "simulate", files)?;
    let s = &report.summary;
    let w = |e: std::io::Error| runtime(e);
    writeln!(out, "steps {} rounds {} vehicles {}", s.steps, s.rounds_completed, s.vehicles).map_err(w)?;
    if let Some(t) = s.mean_travel_time_min {
        writeln!(out, "mean travel time {t:.3} min").map_err(w)?;
    }
    writeln!(out, "final gini {:.4} jain {:.4}", s.final_gini, s.final_jain).map_err(w)?;
    writeln!(out, "epsilon spent {:.4} bytes {}", s.epsilon_spent, s.total_bytes).map_err(w)?;
    if let Some(why) = &s.training_stopped {
        writeln!(out, "training stopped: {why}").map_err(w)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    rounds_completed: usize,
    final_loss: Option<f64>,
    epsilon_spent: f64,
    total_bytes: u64,
    training_stopped: Option<String>,
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let fx = load_fixture(cfg)?;
    let model = initial_model(cfg, &fx)?;
    let clients = observation_corpus(
        &fx,
        &cfg.scenario,
        cfg.federated.num_clients,
        cfg.train.corpus_steps,
        cfg.seed,
    )
    .map_err(runtime)?;
    let mut state = FederatedState::new(model, &cfg.federated).map_err(runtime)?;
    let (outcomes, stopped) =
        train_rounds(&mut state, &clients, &fx.net, &cfg.federated, cfg.seed, cfg.exec()).map_err(runtime)?;
    fs::create_dir_all(&cfg.output).map_err(runtime)?;
    let rounds: Vec<_> = outcomes.iter().map(|o| o.report.clone()).collect();
    let privacy: Vec<_> = outcomes.iter().map(|o| o.privacy.clone()).collect();
    let dir = &cfg.output;
    write_jsonl(&dir.join("rounds.jsonl"), &rounds).map_err(runtime)?;
    write_jsonl(&dir.join("privacy.jsonl"), &privacy).map_err(runtime)?;
    write_json(&dir.join("model.json"), &state.global).map_err(runtime)?;
    let summary = TrainSummary {
        rounds_completed: rounds.len(),
        final_loss: rounds.last().map(|r| r.mean_loss),
        epsilon_spent: state.accountant.spent(),
        total_bytes: state.ledger.total_bytes(),
        training_stopped: stopped.clone(),
    };
    write_json(&dir.join("summary.json"), &summary).map_err(runtime)?;
    write_manifest(
        cfg,
        "train",
        ["rounds.jsonl", "privacy.jsonl", "model.json", "summary.json"].map(String::from).to_vec(),
    )?;
    let w = |e: std::io::Error| runtime(e);
    for r in &rounds {
        writeln!(out, "round {} loss {:.6} epsilon {:.4}", r.round, r.mean_loss, r.epsilon_spent).map_err(w)?;
    }
    if let Some(why) = stopped {
        writeln!(out, "training stopped: {why}").map_err(w)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct RequestRow {
    vehicle_id: u64,
    origin: u32,
    destination: u32,
}

fn route(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let fx = load_fixture(cfg)?;
    let net = &fx.net;
    let state = match &cfg.routing.state {
        Some(p) => {
            let s: TrafficState = serde_json::from_str(&fs::read_to_string(p).map_err(runtime)?).map_err(runtime)?;
            if s.edges.len() != net.edge_count() {
                return Err(CliError::Runtime(format!(
                    "state has {} edges, network has {}",
                    s.edges.len(),
                    net.edge_count()
                )));
            }
            s
        }
        None => TrafficState::free_flow(net),
    };
    let predicted = match &cfg.model.checkpoint {
        Some(_) => predict_state(&initial_model(cfg, &fx)?, net, &state, None)
            .map_err(runtime)?
            .predictions,
        None => state.travel_times(),
    };
    let requests: Vec<VehicleRequest> = match &cfg.routing.requests {
        Some(p) => {
            let mut rdr = csv::Reader::from_path(p).map_err(runtime)?;
            rdr.deserialize::<RequestRow>()
                .map(|r| r.map(|r| VehicleRequest::new(r.vehicle_id, r.origin, r.destination)))
                .collect::<Result<_, _>>()
                .map_err(runtime)?
        }
        None => generate_demand(&cfg.scenario.demand, net, &fx.partition, state.time_step, cfg.seed, 0)
            .map_err(runtime)?,
    };
    let ctx = RoutingContext {
        net,
        partition: &fx.partition,
        demographics: &fx.demographics,
        state: &state,
        predicted: &predicted,
    };
    let result = assign_routes(&ctx, &requests, &cfg.routing.weights, &cfg.routing.assign).map_err(runtime)?;
    fs::create_dir_all(&cfg.output).map_err(runtime)?;
    let f = fs::File::create(cfg.output.join("assignments.csv")).map_err(runtime)?;
    write_assignments_csv(std::io::BufWriter::new(f), net, &result.assignments).map_err(runtime)?;
    write_manifest(cfg, "route", vec!["assignments.csv".into()])?;
    writeln!(
        out,
        "assigned {} unreachable {}",
        result.assignments.len(),
        result.unreachable.len()
    )
    .map_err(runtime)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(p).map_err(runtime)?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}

fn report(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let r = &cfg.report;
    let ours = match (&r.ours, &r.summary) {
        (Some(p), _) => read_json::<MetricRow>(p)?,
        (None, Some(p)) => MetricRow::from_summary("ours", &read_json::<ScenarioSummary>(p)?),
        (None, None) => return Err(CliError::Usage("report needs --summary or --ours".into())),
    };
    let baselines: Vec<MetricRow> = match &r.baselines {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let table = evaluate(&ours, &baselines).map_err(runtime)?;
    fs::create_dir_all(&cfg.output).map_err(runtime)?;
    write_json(&cfg.output.join("comparison.json"), &table).map_err(runtime)?;
    write_manifest(cfg, "report", vec!["comparison.json".into()])?;
    let w = |e: std::io::Error| runtime(e);
    let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:+.1}%"));
    writeln!(out, "{:<16} {:>10} {:>10} {:>10} {:>10}", "baseline", "time", "gini", "bytes", "epsilon").map_err(w)?;
    for row in &table.rows {
        writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>10} {:>10}",
            row.baseline,
            cell(row.travel_time_delta_pct),
            cell(row.gini_delta_pct),
            cell(row.bytes_reduction_pct.map(|v| -v)),
            cell(row.epsilon_delta_pct)
        )
        .map_err(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(r#"{"seed": 7}"#).unwrap();
        let p = &cfg.federated.privacy;
        assert_eq!((p.epsilon, p.delta, p.clip_norm), (1.0, 1e-5, 1.0));
        assert_eq!(cfg.federated.rounds, 10);
        assert_eq!(cfg.federated.num_clients, 6);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn config_errors() {
        let e = parse_config_str(r#"{"federated": {"privacy": {"epsilon": -1}}}"#).unwrap_err();
        assert!(matches!(e, ConfigError::RangeViolation(_)), "{e}");
        let e = parse_config_str(r#"{"federated": {"privacy": {"epsilonn": 2}}}"#).unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey(k) if k == "epsilonn"), "{e}");
        let e = parse_config_str(r#"{"epsilonn": 2}"#).unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey(k) if k == "epsilonn"), "{e}");
        let e = parse_config_str(r#"{"topology": "/nonexistent/t.csv"}"#).unwrap_err();
        assert!(matches!(e, ConfigError::MissingFile(_)), "{e}");
        let e = parse_config(Path::new("/nonexistent/c.json")).unwrap_err();
        assert!(matches!(e, ConfigError::MissingFile(_)), "{e}");
        assert!(matches!(parse_config_str("[1"), Err(ConfigError::Malformed(_))));
    }

    #[test]
    fn config_round_trips_through_manifest() {
        let cfg = RunConfig::default();
        let m = Manifest {
            command: "simulate".into(),
            version: "0".into(),
            seed: 0,
            parallel_build: true,
            config: cfg.clone(),
            outputs: vec![],
        };
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), cfg);
        let plain = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config_str(&plain).unwrap(), cfg);
    }

    #[test]
    fn exit_codes() {
        let mut o = Vec::new();
        let mut e = Vec::new();
        assert_eq!(run_with(["fedfair"], &mut o, &mut e), 1);
        assert!(String::from_utf8_lossy(&e).contains("Usage"));
        assert_eq!(run_with(["fedfair", "bogus"], &mut o, &mut e), 1);
        assert_eq!(run_with(["fedfair", "--help"], &mut o, &mut e), 0);
        assert_eq!(run_with(["fedfair", "simulate", "--epsilon", "-1"], &mut o, &mut e), 1);
        assert_eq!(run_with(["fedfair", "simulate", "--lambda", "2"], &mut o, &mut e), 1);
        assert_eq!(run_with(["fedfair", "report", "--output", "/nonexistent-dir-x"], &mut o, &mut e), 1);
    }
}
