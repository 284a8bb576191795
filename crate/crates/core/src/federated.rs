//! Federated rounds: client selection, broadcast, local training, private
//! aggregation, gradient compression and byte accounting.
//!
//! Clients privatize the pseudo-gradient `−Δθ/η` of their local run. In
//! update units that is a clip to `ηC` and Gaussian noise of std `ησC`. The
//! server averages the reconstructed client models, so a single noiseless,
//! uncompressed client reproduces its local SGD run bit for bit.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{local_train, GnnError, GnnModel, ModelGradient, Sample, TrainConfig, SPEED_SCALE_MPH};
use crate::network::{RegionPartition, RoadNetwork};
use crate::par::Exec;
use crate::privacy::{
    adapt_clip_norm, add_gaussian, calibrate_noise, clip_gradient, compose_budget,
    AdaptiveClipConfig, PrivacyAccountant, PrivacyError, PrivacyReport,
};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::{ParamSet, Tensor};

/// Per-tensor header bytes on the uplink (shape, range, bit width).
pub const TENSOR_HEADER_BYTES: u64 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum FederatedError {
    #[error("bit width {0} outside 1..=32")]
    InvalidBits(u32),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("cannot select {k} of {n} clients")]
    InvalidK { k: usize, n: usize },
    #[error("invalid federated config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
}

// ---------------------------------------------------------------------------
// Quantization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    #[default]
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BitSchedule {
    Fixed { bits: u32 },
    /// Per-round widths; the last entry repeats.
    Schedule { bits: Vec<u32> },
    /// `clamp(round(32 · var_t / var_first), 4, 16)` on the variance of the
    /// privatized client updates.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizationPolicy {
    pub schedule: BitSchedule,
    pub mode: RoundingMode,
}

impl Default for QuantizationPolicy {
    fn default() -> Self {
        Self {
            schedule: BitSchedule::Fixed { bits: 8 },
            mode: RoundingMode::Stochastic,
        }
    }
}

impl QuantizationPolicy {
    pub fn validate(&self) -> Result<(), FederatedError> {
        let check = |b: u32| {
            if (1..=32).contains(&b) {
                Ok(())
            } else {
                Err(FederatedError::InvalidBits(b))
            }
        };
        match &self.schedule {
            BitSchedule::Fixed { bits } => check(*bits),
            BitSchedule::Schedule { bits } if bits.is_empty() => Err(FederatedError::InvalidConfig(
                "empty bit schedule".into(),
            )),
            BitSchedule::Schedule { bits } => bits.iter().try_for_each(|&b| check(b)),
            BitSchedule::Adaptive => Ok(()),
        }
    }

    fn bits_for(&self, round: usize, variance: f64, first_variance: Option<f64>) -> u32 {
        match &self.schedule {
            BitSchedule::Fixed { bits } => *bits,
            BitSchedule::Schedule { bits } => bits[round.min(bits.len() - 1)],
            BitSchedule::Adaptive => adaptive_bits(variance, first_variance.unwrap_or(variance)),
        }
    }
}

/// `clamp(round(32 · var / var_first), 4, 16)`.
pub fn adaptive_bits(variance: f64, first_variance: f64) -> u32 {
    let ratio = if first_variance > 0.0 {
        variance / first_variance
    } else {
        1.0
    };
    (32.0 * ratio).round().clamp(4.0, 16.0) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub min: f64,
    pub max: f64,
    pub levels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Raw(Vec<Vec<f64>>),
    Quantized { bits: u32, tensors: Vec<QuantizedTensor> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedGradient {
    pub shapes: Vec<(String, Vec<usize>)>,
    pub payload: Payload,
}

fn max_level(bits: u32) -> u32 {
    ((1u64 << bits) - 1) as u32
}

/// Uniform quantization of each tensor over its own `[min, max]` into `2^b`
/// levels. Stochastic rounding is unbiased; `b = 32` sends raw values.
pub fn quantize(
    grad: &ModelGradient,
    bits: u32,
    mode: RoundingMode,
    seed: u64,
) -> Result<QuantizedGradient, FederatedError> {
    if !(1..=32).contains(&bits) {
        return Err(FederatedError::InvalidBits(bits));
    }
    let shapes = grad
        .params
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    if bits == 32 {
        return Ok(QuantizedGradient {
            shapes,
            payload: Payload::Raw(grad.params.tensors.iter().map(|t| t.data.clone()).collect()),
        });
    }
    let top = max_level(bits);
    let mut rng = rng_for(seed, &[stream::QUANTIZE]);
    let tensors = grad
        .params
        .tensors
        .iter()
        .map(|t| {
            let min = t.data.iter().copied().fold(f64::INFINITY, f64::min);
            let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (min, max) = if t.data.is_empty() { (0.0, 0.0) } else { (min, max) };
            let range = max - min;
            let levels = t
                .data
                .iter()
                .map(|&x| {
                    if range == 0.0 {
                        return 0;
                    }
                    let s = (x - min) / range * top as f64;
                    let lo = s.floor();
                    let up = match mode {
                        RoundingMode::Stochastic => rng.random::<f64>() < s - lo,
                        RoundingMode::Deterministic => s - lo >= 0.5,
                    };
                    (lo as u32 + up as u32).min(top)
                })
                .collect();
            QuantizedTensor { min, max, levels }
        })
        .collect();
    Ok(QuantizedGradient {
        shapes,
        payload: Payload::Quantized { bits, tensors },
    })
}

/// Level `k` maps back to `min + k · (max − min) / (2^b − 1)`.
pub fn dequantize(q: &QuantizedGradient) -> Result<ModelGradient, FederatedError> {
    let corrupt = |m: String| FederatedError::CorruptPayload(m);
    let values: Vec<Vec<f64>> = match &q.payload {
        Payload::Raw(data) => data.clone(),
        Payload::Quantized { bits, tensors } => {
            if !(1..32).contains(bits) {
                return Err(corrupt(format!("bit width {bits}")));
            }
            let top = max_level(*bits);
            tensors
                .iter()
                .map(|t| {
                    if !(t.min.is_finite() && t.max.is_finite() && t.min <= t.max) {
                        return Err(corrupt(format!("range [{}, {}]", t.min, t.max)));
                    }
                    let step = (t.max - t.min) / top as f64;
                    t.levels
                        .iter()
                        .map(|&k| {
                            if k > top {
                                Err(corrupt(format!("level {k} above {top}")))
                            } else if k == top {
                                Ok(t.max)
                            } else {
                                Ok(t.min + k as f64 * step)
                            }
                        })
                        .collect()
                })
                .collect::<Result<_, _>>()?
        }
    };
    if values.len() != q.shapes.len() {
        return Err(corrupt(format!(
            "{} tensors for {} shapes",
            values.len(),
            q.shapes.len()
        )));
    }
    let tensors = q
        .shapes
        .iter()
        .zip(values)
        .map(|((name, shape), data)| {
            if shape.iter().product::<usize>() != data.len() {
                return Err(corrupt(format!("tensor {name}: {} values for shape {shape:?}", data.len())));
            }
            Ok(Tensor {
                name: name.clone(),
                shape: shape.clone(),
                data,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(ModelGradient {
        params: ParamSet { tensors },
    })
}

// ---------------------------------------------------------------------------
// Client selection

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client: usize,
    pub contribution: f64,
    pub diversity: f64,
}

impl ClientScore {
    pub fn value(&self) -> f64 {
        self.contribution * self.diversity
    }
}

/// What the server knows about a client when selecting.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientProfile {
    pub id: usize,
    /// Norm of the client's last pseudo-gradient, if it has participated.
    pub last_update_norm: Option<f64>,
    pub summary: Vec<f64>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Greedy selection of `k` clients maximizing `Σ contribution · diversity`,
/// where diversity is measured against the mean summary of the clients
/// already picked. Ties go to the lowest id. Returns ids in pick order with
/// the score each had when picked.
pub fn score_and_select(clients: &[ClientProfile], k: usize) -> Result<Vec<ClientScore>, FederatedError> {
    let n = clients.len();
    if k == 0 || k > n {
        return Err(FederatedError::InvalidK { k, n });
    }
    let mut order: Vec<&ClientProfile> = clients.iter().collect();
    order.sort_by_key(|c| c.id);
    let mut taken = vec![false; n];
    let mut picked: Vec<ClientScore> = Vec::with_capacity(k);
    let mut centroid: Vec<f64> = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, ClientScore)> = None;
        for (i, c) in order.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let diversity = if picked.is_empty() {
                1.0
            } else {
                euclidean(&c.summary, &centroid)
            };
            let score = ClientScore {
                client: c.id,
                contribution: c.last_update_norm.unwrap_or(1.0),
                diversity,
            };
            if best.is_none_or(|(_, b)| score.value() > b.value()) {
                best = Some((i, score));
            }
        }
        let (i, score) = best.expect("k <= n leaves a candidate");
        taken[i] = true;
        picked.push(score);
        let chosen: Vec<&ClientProfile> = order.iter().zip(&taken).filter(|(_, &t)| t).map(|(c, _)| *c).collect();
        let width = chosen.iter().map(|c| c.summary.len()).max().unwrap_or(0);
        centroid = (0..width)
            .map(|j| chosen.iter().map(|c| c.summary.get(j).copied().unwrap_or(0.0)).sum::<f64>() / chosen.len() as f64)
            .collect();
    }
    Ok(picked)
}

/// Top-`k` ids for a fixed score table; ties go to the lowest id.
pub fn select_by_scores(scores: &[f64], k: usize) -> Result<Vec<usize>, FederatedError> {
    if k == 0 || k > scores.len() {
        return Err(FederatedError::InvalidK { k, n: scores.len() });
    }
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids.sort_unstable();
    Ok(ids)
}

// ---------------------------------------------------------------------------
// Communication ledger

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundBytes {
    pub uplink_payload: u64,
    pub uplink_headers: u64,
    pub downlink: u64,
}

impl RoundBytes {
    pub fn uplink(&self) -> u64 {
        self.uplink_payload + self.uplink_headers
    }
}

/// `uplink = K · (P·b/8 + 64 · tensors)`, `downlink = K · P · 4`.
pub fn ledger_bytes(params: u64, bits: u32, selected: u64, tensors: u64) -> RoundBytes {
    RoundBytes {
        uplink_payload: selected * (params * bits as u64).div_ceil(8),
        uplink_headers: selected * TENSOR_HEADER_BYTES * tensors,
        downlink: selected * params * 4,
    }
}

/// Fractional uplink payload saving of `ours` relative to `baseline`.
pub fn payload_reduction(ours: &RoundBytes, baseline: &RoundBytes) -> f64 {
    1.0 - ours.uplink_payload as f64 / baseline.uplink_payload as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CommunicationLedger {
    pub entries: Vec<LedgerEntry>,
    pub total_uplink: u64,
    pub total_downlink: u64,
}

impl CommunicationLedger {
    pub fn record(&mut self, entry: LedgerEntry) {
        self.total_uplink += entry.uplink_bytes;
        self.total_downlink += entry.downlink_bytes;
        self.entries.push(entry);
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_uplink + self.total_downlink
    }
}

// ---------------------------------------------------------------------------
// Configuration and state

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacySettings {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    /// Off means clipping only (σ = 0).
    pub noise: bool,
    /// Composed-ε ceiling; defaults to the composition of `epsilon` over the
    /// configured number of rounds.
    pub budget_epsilon: Option<f64>,
    pub adaptive_clip: Option<AdaptiveClipConfig>,
}

impl Default for PrivacySettings {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-5,
            clip_norm: 1.0,
            noise: true,
            budget_epsilon: None,
            adaptive_clip: None,
        }
    }
}

impl PrivacySettings {
    pub fn sigma(&self) -> Result<f64, PrivacyError> {
        if self.noise {
            calibrate_noise(self.epsilon, self.delta, self.clip_norm)
        } else {
            Ok(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederatedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local: TrainConfig,
    /// Fraction of clients selected per round.
    pub participation: f64,
    pub quantization: QuantizationPolicy,
    pub privacy: PrivacySettings,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            num_clients: 6,
            rounds: 10,
            local: TrainConfig::default(),
            participation: 1.0,
            quantization: QuantizationPolicy::default(),
            privacy: PrivacySettings::default(),
        }
    }
}

impl FederatedConfig {
    pub fn validate(&self) -> Result<(), FederatedError> {
        let bad = |m: String| Err(FederatedError::InvalidConfig(m));
        if self.num_clients == 0 {
            return bad("num_clients must be >= 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation {} outside (0, 1]", self.participation));
        }
        if !(self.local.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be > 0", self.local.learning_rate));
        }
        if !(self.privacy.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be > 0", self.privacy.clip_norm));
        }
        if let Some(a) = &self.privacy.adaptive_clip {
            a.validate()?;
        }
        self.privacy.sigma()?;
        self.quantization.validate()
    }

    pub fn selected_count(&self, available: usize) -> usize {
        ((self.participation * available as f64).round() as usize).clamp(1, available.max(1))
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Client {
    pub id: usize,
    pub samples: Vec<Sample>,
}

impl Client {
    /// Mean and standard deviation of observed normalized speeds.
    pub fn label_summary(&self) -> Vec<f64> {
        let ys: Vec<f64> = self
            .samples
            .iter()
            .flat_map(|s| s.targets.iter().flatten())
            .map(|y| y / SPEED_SCALE_MPH)
            .collect();
        if ys.is_empty() {
            return vec![0.0, 0.0];
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        vec![mean, var.sqrt()]
    }
}

/// Edges each client observes. With as many clients as regions, client `i`
/// owns region `i`. Extra clients share regions (`i mod K`) and deal that
/// region's edges round-robin; with fewer clients, client `i` owns every
/// region `r` with `r mod N = i`.
pub fn client_edge_scopes(net: &RoadNetwork, partition: &RegionPartition, clients: usize) -> Vec<Vec<usize>> {
    let k = partition.region_count();
    let mut scopes = vec![Vec::new(); clients];
    for (r, edges) in partition.edges_by_region(net).iter().enumerate() {
        let owners: Vec<usize> = (0..clients).filter(|i| i % k == r).collect();
        if owners.is_empty() {
            scopes[r % clients].extend(edges.iter().copied());
            continue;
        }
        for (j, &e) in edges.iter().enumerate() {
            scopes[owners[j % owners.len()]].push(e);
        }
    }
    for s in &mut scopes {
        s.sort_unstable();
    }
    scopes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub mean_loss: f64,
    pub travel_time_min: Option<f64>,
    pub gini: Option<f64>,
    pub jain: Option<f64>,
    pub epsilon_spent: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

/// Everything a round produced, beyond the report line.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub report: RoundReport,
    pub privacy: PrivacyReport,
    pub selected: Vec<usize>,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedState {
    pub global: GnnModel,
    pub accountant: PrivacyAccountant,
    pub ledger: CommunicationLedger,
    pub clip_norm: f64,
    pub last_update_norms: Vec<Option<f64>>,
    first_variance: Option<f64>,
}

impl FederatedState {
    pub fn new(global: GnnModel, cfg: &FederatedConfig) -> Result<Self, FederatedError> {
        cfg.validate()?;
        let p = &cfg.privacy;
        let budget = match p.budget_epsilon {
            Some(b) => b,
            None => compose_budget(p.epsilon, p.delta, cfg.rounds as u64)?,
        };
        Ok(Self {
            global,
            accountant: PrivacyAccountant::new(budget, p.delta)?,
            ledger: CommunicationLedger::default(),
            clip_norm: p.clip_norm,
            last_update_norms: vec![None; cfg.num_clients],
            first_variance: None,
        })
    }
}

fn variance(p: &ParamSet) -> f64 {
    let n = p.param_count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = p.iter().sum::<f64>() / n;
    p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

struct Upload {
    model: ParamSet,
    pseudo_grad_norm: f64,
    loss: f64,
}

/// One federated round. Selection, broadcast, local training, privatization
/// and compression happen first; the accountant is then charged, and only if
/// that succeeds is any state mutated.
pub fn run_round(
    state: &mut FederatedState,
    clients: &[Client],
    net: &RoadNetwork,
    cfg: &FederatedConfig,
    round: usize,
    seed: u64,
    exec: Exec,
) -> Result<RoundOutcome, FederatedError> {
    if clients.is_empty() {
        return Err(PrivacyError::EmptyClientSet.into());
    }
    if state.accountant.is_frozen() {
        state.accountant.charge(cfg.privacy.epsilon)?;
    }
    let profiles: Vec<ClientProfile> = clients
        .iter()
        .map(|c| ClientProfile {
            id: c.id,
            last_update_norm: state.last_update_norms.get(c.id).copied().flatten(),
            summary: c.label_summary(),
        })
        .collect();
    let k = cfg.selected_count(clients.len());
    let mut selected: Vec<usize> = score_and_select(&profiles, k)?.iter().map(|s| s.client).collect();
    selected.sort_unstable();
    let chosen: Vec<&Client> = selected
        .iter()
        .map(|id| clients.iter().find(|c| c.id == *id).expect("selected ids come from clients"))
        .collect();

    let lr = cfg.local.learning_rate;
    let sigma = cfg.privacy.sigma()?;
    let update_clip = state.clip_norm * lr;
    let global = &state.global;
    let uploads = exec.map(&chosen, |c| -> Result<Upload, FederatedError> {
        let out = local_train(
            global,
            net,
            &c.samples,
            &cfg.local,
            derive_seed(seed, &[round as u64, c.id as u64]),
            Exec::Sequential,
        )?;
        let norm = out.update.l2_norm();
        let mut local = out.model.params;
        if norm > update_clip {
            local = global.params.clone();
            local.add_assign(&clip_gradient(&out.update, update_clip).params);
        }
        add_gaussian(
            &mut local,
            sigma * update_clip,
            derive_seed(seed, &[stream::NOISE, round as u64, c.id as u64]),
        )?;
        Ok(Upload {
            model: local,
            pseudo_grad_norm: norm / lr,
            loss: out.final_loss,
        })
    });
    let uploads: Vec<Upload> = uploads.into_iter().collect::<Result<_, _>>()?;

    let deltas: Vec<ParamSet> = uploads.iter().map(|u| u.model.sub(&global.params)).collect();
    let round_variance = deltas.iter().map(variance).sum::<f64>() / deltas.len() as f64;
    let bits = cfg
        .quantization
        .bits_for(round, round_variance, state.first_variance);
    let received: Vec<ParamSet> = if bits == 32 {
        uploads.iter().map(|u| u.model.clone()).collect()
    } else {
        let decoded = exec.map_range(uploads.len(), |i| -> Result<ParamSet, FederatedError> {
            let q = quantize(
                &ModelGradient {
                    params: deltas[i].clone(),
                },
                bits,
                cfg.quantization.mode,
                derive_seed(seed, &[stream::QUANTIZE, round as u64, selected[i] as u64]),
            )?;
            let mut m = global.params.clone();
            m.add_assign(&dequantize(&q)?.params);
            Ok(m)
        });
        decoded.into_iter().collect::<Result<_, _>>()?
    };

    let epsilon_spent = state.accountant.charge(cfg.privacy.epsilon)?;

    let mut next = received[0].clone();
    for m in &received[1..] {
        next.add_assign(m);
    }
    if received.len() > 1 {
        next.scale(1.0 / received.len() as f64);
    }
    state.global.params = next;
    if state.first_variance.is_none() {
        state.first_variance = Some(round_variance);
    }
    let norms: Vec<f64> = uploads.iter().map(|u| u.pseudo_grad_norm).collect();
    for (id, n) in selected.iter().zip(&norms) {
        if let Some(slot) = state.last_update_norms.get_mut(*id) {
            *slot = Some(*n);
        }
    }
    let used_clip = state.clip_norm;
    if let Some(a) = &cfg.privacy.adaptive_clip {
        state.clip_norm = adapt_clip_norm(state.clip_norm, &norms, a)?;
    }
    let bytes = ledger_bytes(
        state.global.params.param_count() as u64,
        bits,
        selected.len() as u64,
        state.global.params.tensors.len() as u64,
    );
    state.ledger.record(LedgerEntry {
        round,
        uplink_bytes: bytes.uplink(),
        downlink_bytes: bytes.downlink,
        participants: selected.len(),
    });
    let mean_loss = uploads.iter().map(|u| u.loss).sum::<f64>() / uploads.len() as f64;
    Ok(RoundOutcome {
        report: RoundReport {
            round,
            mean_loss,
            travel_time_min: None,
            gini: None,
            jain: None,
            epsilon_spent,
            uplink_bytes: bytes.uplink(),
            downlink_bytes: bytes.downlink,
        },
        privacy: PrivacyReport {
            round,
            epsilon_spent,
            delta: cfg.privacy.delta,
            clip_norm: used_clip,
            sigma,
        },
        selected,
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{loss_and_gradient, GnnConfig};
    use crate::network::fixtures::desk_grid;
    use proptest::prelude::*;

    fn grad_of(values: Vec<Vec<f64>>) -> ModelGradient {
        ModelGradient {
            params: ParamSet {
                tensors: values
                    .into_iter()
                    .enumerate()
                    .map(|(i, data)| Tensor {
                        name: format!("t{i}"),
                        shape: vec![data.len()],
                        data,
                    })
                    .collect(),
            },
        }
    }

    #[test]
    fn raw_bits_round_trip_exactly() {
        let g = grad_of(vec![vec![0.1, -3.5, 1e-300], vec![7.0]]);
        let q = quantize(&g, 32, RoundingMode::Stochastic, 1).unwrap();
        assert_eq!(dequantize(&q).unwrap(), g);
    }

    #[test]
    fn constant_tensor_is_exact() {
        let g = grad_of(vec![vec![0.25; 9]]);
        for b in [1, 4, 8, 16] {
            assert_eq!(dequantize(&quantize(&g, b, RoundingMode::Stochastic, 2).unwrap()).unwrap(), g);
        }
    }

    #[test]
    fn endpoints_and_errors() {
        let g = grad_of(vec![vec![-1.0, 0.3, 2.0]]);
        let q = quantize(&g, 4, RoundingMode::Deterministic, 0).unwrap();
        let d = dequantize(&q).unwrap().params.flatten();
        assert_eq!((d[0], d[2]), (-1.0, 2.0));
        assert_eq!(quantize(&g, 0, RoundingMode::Stochastic, 0), Err(FederatedError::InvalidBits(0)));
        assert_eq!(quantize(&g, 33, RoundingMode::Stochastic, 0), Err(FederatedError::InvalidBits(33)));
        let mut bad = q.clone();
        if let Payload::Quantized { tensors, .. } = &mut bad.payload {
            tensors[0].levels[1] = 16;
        }
        assert!(matches!(dequantize(&bad), Err(FederatedError::CorruptPayload(_))));
        let mut short = q;
        short.shapes[0].1 = vec![4];
        assert!(matches!(dequantize(&short), Err(FederatedError::CorruptPayload(_))));
    }

    proptest! {
        #[test]
        fn round_trip_within_one_step(
            v in prop::collection::vec(-10.0f64..10.0, 1..40),
            bits in 1u32..17,
            seed in any::<u64>(),
        ) {
            let g = grad_of(vec![v.clone()]);
            let d = dequantize(&quantize(&g, bits, RoundingMode::Stochastic, seed).unwrap()).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let step = (hi - lo) / max_level(bits) as f64;
            for (a, b) in d.params.iter().zip(&v) {
                prop_assert!((a - b).abs() <= step * (1.0 + 1e-12));
            }
        }

        #[test]
        fn greedy_matches_exhaustive(scores in prop::collection::vec(0.0f64..5.0, 1..7), k in 1usize..4) {
            prop_assume!(k <= scores.len());
            prop_assert_eq!(select_by_scores(&scores, k).unwrap(), exhaustive(&scores, k));
        }
    }

    /// Best subset by summed score; ties go to the lexicographically smallest.
    fn exhaustive(scores: &[f64], k: usize) -> Vec<usize> {
        let n = scores.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let ids: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let total: f64 = ids.iter().map(|&i| scores[i]).sum();
            let better = match &best {
                None => true,
                Some((t, b)) => total > *t || (total == *t && ids < *b),
            };
            if better {
                best = Some((total, ids));
            }
        }
        best.unwrap().1
    }

    fn profile(id: usize, norm: Option<f64>, summary: Vec<f64>) -> ClientProfile {
        ClientProfile {
            id,
            last_update_norm: norm,
            summary,
        }
    }

    #[test]
    fn selection_examples() {
        let all: Vec<ClientProfile> = (0..4).map(|i| profile(i, None, vec![0.0])).collect();
        let ids = |s: Vec<ClientScore>| {
            let mut v: Vec<usize> = s.iter().map(|c| c.client).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(ids(score_and_select(&all, 4).unwrap()), vec![0, 1, 2, 3]);
        assert_eq!(ids(score_and_select(&all, 2).unwrap()), vec![0, 1]);
        assert!(matches!(score_and_select(&all, 5), Err(FederatedError::InvalidK { .. })));

        let table = [0.4, 3.0, 0.2, 2.5];
        let dominated: Vec<ClientProfile> = table
            .iter()
            .enumerate()
            .map(|(i, &s)| profile(i, Some(s), vec![i as f64]))
            .collect();
        let greedy = ids(score_and_select(&dominated, 2).unwrap());
        assert_eq!(greedy, vec![1, 3]);
        assert_eq!(greedy, exhaustive(&table, 2));
    }

    #[test]
    fn ledger_examples() {
        let full = ledger_bytes(1000, 32, 6, 1);
        assert_eq!(full.uplink_payload, 6 * 4000);
        let half = ledger_bytes(1000, 8, 3, 1);
        assert_eq!(payload_reduction(&half, &full), 0.875);
        assert_eq!(ledger_bytes(1000, 8, 1, 1).uplink(), 1064);

        let mut l = CommunicationLedger::default();
        for r in 0..3 {
            l.record(LedgerEntry {
                round: r,
                uplink_bytes: 10 + r as u64,
                downlink_bytes: 7,
                participants: 2,
            });
        }
        assert_eq!(l.total_uplink, l.entries.iter().map(|e| e.uplink_bytes).sum::<u64>());
        assert_eq!(l.total_downlink, 21);
    }

    #[test]
    fn adaptive_bits_rule() {
        assert_eq!(adaptive_bits(1.0, 1.0), 16);
        assert_eq!(adaptive_bits(0.25, 1.0), 8);
        assert_eq!(adaptive_bits(0.0, 1.0), 4);
    }

    #[test]
    fn scopes_cover_every_edge_once() {
        let f = desk_grid(3);
        for clients in [1, 2, 4, 6, 9] {
            let scopes = client_edge_scopes(&f.net, &f.partition, clients);
            let mut all: Vec<usize> = scopes.concat();
            all.sort_unstable();
            assert_eq!(all, (0..f.net.edge_count()).collect::<Vec<_>>());
            assert!(scopes.iter().all(|s| !s.is_empty()));
        }
    }

    fn toy_clients(net: &RoadNetwork, n: usize) -> Vec<Client> {
        let m = net.node_count();
        (0..n)
            .map(|id| Client {
                id,
                samples: (0..3)
                    .map(|s| Sample {
                        features: (0..m).map(|v| vec![0.5 + 0.01 * (v + s + id) as f64, 0.1]).collect(),
                        hidden: None,
                        targets: net
                            .edges()
                            .iter()
                            .enumerate()
                            .map(|(e, _)| (e % n == id).then_some(20.0 + (e + s) as f64))
                            .collect(),
                    })
                    .collect(),
            })
            .collect()
    }

    fn plain_config(clients: usize) -> FederatedConfig {
        FederatedConfig {
            num_clients: clients,
            rounds: 3,
            local: TrainConfig {
                epochs: 1,
                learning_rate: 0.01,
                batch_size: 100,
                shuffle: false,
            },
            participation: 1.0,
            quantization: QuantizationPolicy {
                schedule: BitSchedule::Fixed { bits: 32 },
                mode: RoundingMode::Stochastic,
            },
            privacy: PrivacySettings {
                noise: false,
                clip_norm: 1e6,
                ..PrivacySettings::default()
            },
        }
    }

    fn model_for(net: &RoadNetwork) -> GnnModel {
        let mut c = GnnConfig::for_network(net, 6);
        c.dropout = 0.0;
        GnnModel::init(c, 11)
    }

    #[test]
    fn single_noiseless_client_is_plain_sgd() {
        let f = desk_grid(1);
        let clients = toy_clients(&f.net, 1);
        let cfg = plain_config(1);
        let model = model_for(&f.net);
        let mut state = FederatedState::new(model.clone(), &cfg).unwrap();
        run_round(&mut state, &clients, &f.net, &cfg, 0, 5, Exec::Parallel).unwrap();

        let batch: Vec<&Sample> = clients[0].samples.iter().collect();
        let (_, g) = loss_and_gradient(&model, &f.net, &batch, None, Exec::Sequential).unwrap();
        let mut sgd = model.params.clone();
        sgd.axpy(-cfg.local.learning_rate, &g.params);
        assert_eq!(state.global.params, sgd);
    }

    #[test]
    fn two_clients_match_centralized_sgd() {
        let f = desk_grid(1);
        let clients = toy_clients(&f.net, 2);
        let cfg = plain_config(2);
        let model = model_for(&f.net);
        let mut state = FederatedState::new(model.clone(), &cfg).unwrap();
        run_round(&mut state, &clients, &f.net, &cfg, 0, 5, Exec::Parallel).unwrap();

        let mut mean = ParamSet::zeros_like(&model.params);
        for c in &clients {
            let batch: Vec<&Sample> = c.samples.iter().collect();
            let (_, g) = loss_and_gradient(&model, &f.net, &batch, None, Exec::Sequential).unwrap();
            mean.axpy(0.5, &g.params);
        }
        let mut central = model.params.clone();
        central.axpy(-cfg.local.learning_rate, &mean);
        for (a, b) in state.global.params.iter().zip(central.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rounds_are_deterministic_and_ledgered() {
        let f = desk_grid(2);
        let clients = toy_clients(&f.net, 3);
        let cfg = FederatedConfig {
            num_clients: 3,
            participation: 0.67,
            ..FederatedConfig::default()
        };
        let run = |exec| {
            let mut state = FederatedState::new(model_for(&f.net), &cfg).unwrap();
            let reports: Vec<RoundReport> = (0..3)
                .map(|r| run_round(&mut state, &clients, &f.net, &cfg, r, 9, exec).unwrap().report)
                .collect();
            (reports, state)
        };
        let (a, sa) = run(Exec::Parallel);
        let (b, sb) = run(Exec::Sequential);
        assert_eq!(a, b);
        assert_eq!(sa.global, sb.global);
        assert_eq!(sa.ledger.entries.len(), 3);
        assert_eq!(sa.ledger.total_uplink, a.iter().map(|r| r.uplink_bytes).sum::<u64>());
        assert!(sa.ledger.entries.iter().all(|e| e.participants == 2));
        assert!(a.windows(2).all(|w| w[1].epsilon_spent > w[0].epsilon_spent));
    }

    #[test]
    fn exhausted_budget_aborts_without_mutation() {
        let f = desk_grid(2);
        let clients = toy_clients(&f.net, 2);
        let mut cfg = plain_config(2);
        cfg.privacy.budget_epsilon = Some(0.1);
        let mut state = FederatedState::new(model_for(&f.net), &cfg).unwrap();
        let before = state.global.clone();
        let err = run_round(&mut state, &clients, &f.net, &cfg, 0, 1, Exec::Parallel).unwrap_err();
        assert!(matches!(err, FederatedError::Privacy(PrivacyError::BudgetExhausted { .. })));
        assert_eq!(state.global, before);
        assert!(state.ledger.entries.is_empty());
        assert!(state.accountant.is_frozen());
    }
}
