//! Attention message-passing network with a GRU temporal state and a
//! travel-time readout per edge.
//!
//! One layer computes, for every node `v` with in-neighbors `u`:
//!
//! ```text
//! m_uv  = W_msg [h_u ; h_v ; e_uv]
//! α_uv  = softmax_u LeakyReLU(aᵀ [h_u ; h_v])
//! h'_v  = LayerNorm(ReLU(W_self h_v + W_neigh Σ_u α_uv m_uv))
//! ```
//!
//! After the last layer each node state passes through a GRU cell together
//! with the node's previous hidden state, and each edge `u → v` is read out
//! as `free_flow · (1 + softplus(wᵀ [g_u ; g_v] + b))`.

mod backprop;
mod train;

pub use backprop::{evaluate_loss, loss_and_gradient, BatchLoss};
pub use train::{local_train, TrainConfig, TrainOutcome};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{RoadNetwork, TrafficState};
use crate::rng::{rng_for, stream, Rng};
use crate::tensor::{ParamSet, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LN_EPS: f64 = 1e-5;
/// Speeds are divided by this before entering the loss.
pub const SPEED_SCALE_MPH: f64 = 80.0;

#[derive(Debug, Error, PartialEq)]
pub enum GnnError {
    #[error("{what}: expected width {expected}, found {found}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("node has no neighbors")]
    NoNeighbors,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Attention,
    /// Uniform weights over neighbors (GraphSAGE-style mean).
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    /// Width of the observed per-node features `x_v`.
    pub obs_width: usize,
    /// Width of the static per-node attributes `e_v`.
    pub static_width: usize,
    /// Width of the static per-edge attributes `e_uv`.
    pub edge_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub aggregator: Aggregator,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            obs_width: OBS_FEATURES,
            static_width: 1,
            edge_width: 2,
            hidden: 64,
            layers: 3,
            dropout: 0.2,
            aggregator: Aggregator::Attention,
        }
    }
}

impl GnnConfig {
    pub fn input_width(&self) -> usize {
        self.obs_width + self.static_width
    }

    /// Width of the node states entering layer `l`.
    pub fn layer_width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_width()
        } else {
            self.hidden
        }
    }

    /// Config matching a network's attribute widths.
    pub fn for_network(net: &RoadNetwork, hidden: usize) -> Self {
        Self {
            static_width: net.node_attr_width(),
            edge_width: net.edge_attr_width(),
            hidden,
            ..Self::default()
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let mut out = Vec::new();
        for l in 0..self.layers {
            let w = self.layer_width(l);
            out.push((format!("layer{l}.w_msg"), vec![d, 2 * w + self.edge_width]));
            out.push((format!("layer{l}.w_self"), vec![d, w]));
            out.push((format!("layer{l}.w_neigh"), vec![d, d]));
            out.push((format!("layer{l}.att"), vec![2 * w]));
        }
        for gate in ["z", "r", "h"] {
            out.push((format!("gru.w_{gate}"), vec![d, d]));
            out.push((format!("gru.u_{gate}"), vec![d, d]));
            out.push((format!("gru.b_{gate}"), vec![d]));
        }
        out.push(("readout.w".into(), vec![2 * d]));
        out.push(("readout.b".into(), vec![1]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

// Tensor slots within the parameter tree.
const PER_LAYER: usize = 4;
const MSG: usize = 0;
const SELF: usize = 1;
const NEIGH: usize = 2;
const ATT: usize = 3;

#[derive(Debug, Clone, Copy)]
pub(crate) struct GruSlots {
    pub w: [usize; 3],
    pub u: [usize; 3],
    pub b: [usize; 3],
}

pub(crate) fn layer_slot(l: usize, which: usize) -> usize {
    l * PER_LAYER + which
}

pub(crate) fn gru_slots(layers: usize) -> GruSlots {
    let base = layers * PER_LAYER;
    GruSlots {
        w: [base, base + 3, base + 6],
        u: [base + 1, base + 4, base + 7],
        b: [base + 2, base + 5, base + 8],
    }
}

pub(crate) fn readout_slots(layers: usize) -> (usize, usize) {
    let base = layers * PER_LAYER + 9;
    (base, base + 1)
}

/// Model parameters plus the configuration that shapes them. Serializes to
/// a JSON checkpoint whose tensor list doubles as the shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnModel {
    pub config: GnnConfig,
    pub params: ParamSet,
}

/// Gradient (or update) with the same shape tree as the model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGradient {
    pub params: ParamSet,
}

impl ModelGradient {
    pub fn zeros_like(model: &GnnModel) -> Self {
        Self {
            params: ParamSet::zeros_like(&model.params),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.params.l2_norm()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn tensor_count(&self) -> usize {
        self.params.tensors.len()
    }
}

impl GnnModel {
    /// Uniform `±1/√fan_in` initialization.
    pub fn init(config: GnnConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[stream::INIT]);
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let fan_in = *shape.last().unwrap();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut t = Tensor::zeros(name, shape);
                t.data
                    .iter_mut()
                    .for_each(|x| *x = rng.random_range(-bound..bound));
                t
            })
            .collect();
        Self {
            config,
            params: ParamSet { tensors },
        }
    }

    pub fn zeros(config: GnnConfig) -> Self {
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| Tensor::zeros(name, shape))
            .collect();
        Self {
            config,
            params: ParamSet { tensors },
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub(crate) fn t(&self, slot: usize) -> &Tensor {
        &self.params.tensors[slot]
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.tensors.iter().find(|t| t.name == name)
    }

    pub fn apply_update(&mut self, update: &ModelGradient) {
        self.params.add_assign(&update.params);
    }

    /// `W_msg [h_u ; h_v ; e_uv]` for layer `l`.
    pub fn message(
        &self,
        l: usize,
        h_u: &[f64],
        h_v: &[f64],
        e_uv: &[f64],
    ) -> Result<Vec<f64>, GnnError> {
        let w = self.config.layer_width(l);
        check("h_u", w, h_u.len())?;
        check("h_v", w, h_v.len())?;
        check("e_uv", self.config.edge_width, e_uv.len())?;
        let c: Vec<f64> = [h_u, h_v, e_uv].concat();
        Ok(self.t(layer_slot(l, MSG)).matvec(&c))
    }

    /// Raw attention score `LeakyReLU(aᵀ [h_u ; h_v])`.
    pub(crate) fn attention_score(&self, l: usize, h_u: &[f64], h_v: &[f64]) -> (f64, f64) {
        let a = &self.t(layer_slot(l, ATT)).data;
        let w = h_u.len();
        let s: f64 = a[..w].iter().zip(h_u).map(|(x, y)| x * y).sum::<f64>()
            + a[w..].iter().zip(h_v).map(|(x, y)| x * y).sum::<f64>();
        (s, leaky_relu(s))
    }

    /// Normalized attention of `center` over `neighbors`.
    pub fn attention_weights(
        &self,
        l: usize,
        center: &[f64],
        neighbors: &[&[f64]],
    ) -> Result<Vec<f64>, GnnError> {
        if neighbors.is_empty() {
            return Err(GnnError::NoNeighbors);
        }
        let w = self.config.layer_width(l);
        check("center", w, center.len())?;
        for n in neighbors {
            check("neighbor", w, n.len())?;
        }
        if self.config.aggregator == Aggregator::Mean {
            return Ok(vec![1.0 / neighbors.len() as f64; neighbors.len()]);
        }
        let scores: Vec<f64> = neighbors
            .iter()
            .map(|h_u| self.attention_score(l, h_u, center).1)
            .collect();
        Ok(softmax(&scores))
    }

    /// `LayerNorm(ReLU(W_self h_v + W_neigh m_v))`.
    pub fn update_node(&self, l: usize, h_v: &[f64], m_v: &[f64]) -> Result<Vec<f64>, GnnError> {
        check("h_v", self.config.layer_width(l), h_v.len())?;
        check("m_v", self.config.hidden, m_v.len())?;
        let mut p = self.t(layer_slot(l, SELF)).matvec(h_v);
        self.t(layer_slot(l, NEIGH)).matvec_add(m_v, &mut p);
        p.iter_mut().for_each(|x| *x = x.max(0.0));
        Ok(layer_norm(&p).0)
    }

    /// One GRU step on `(h_prev, input)`.
    pub fn gru_step(&self, h_prev: &[f64], input: &[f64]) -> Result<Vec<f64>, GnnError> {
        let d = self.config.hidden;
        check("h_prev", d, h_prev.len())?;
        check("gru input", d, input.len())?;
        Ok(self.gru_forward(h_prev, input).out)
    }

    pub(crate) fn gru_forward(&self, h: &[f64], x: &[f64]) -> GruCache {
        let s = gru_slots(self.config.layers);
        let gate = |i: usize, hin: &[f64]| {
            let mut a = self.t(s.w[i]).matvec(x);
            self.t(s.u[i]).matvec_add(hin, &mut a);
            for (ai, b) in a.iter_mut().zip(&self.t(s.b[i]).data) {
                *ai += b;
            }
            a
        };
        let z: Vec<f64> = gate(0, h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(1, h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let hh: Vec<f64> = gate(2, &rh).into_iter().map(f64::tanh).collect();
        let out = (0..h.len())
            .map(|i| (1.0 - z[i]) * h[i] + z[i] * hh[i])
            .collect();
        GruCache { z, r, rh, hh, out }
    }

    /// Readout pre-activation `wᵀ [g_u ; g_v] + b`.
    pub(crate) fn readout_logit(&self, g_u: &[f64], g_v: &[f64]) -> f64 {
        let (w, b) = readout_slots(self.config.layers);
        let w = &self.t(w).data;
        let d = g_u.len();
        w[..d].iter().zip(g_u).map(|(a, x)| a * x).sum::<f64>()
            + w[d..].iter().zip(g_v).map(|(a, x)| a * x).sum::<f64>()
            + self.t(b).data[0]
    }
}

pub(crate) struct GruCache {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub rh: Vec<f64>,
    pub hh: Vec<f64>,
    pub out: Vec<f64>,
}

fn check(what: &'static str, expected: usize, found: usize) -> Result<(), GnnError> {
    if expected == found {
        Ok(())
    } else {
        Err(GnnError::WidthMismatch {
            what,
            expected,
            found,
        })
    }
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-vector normalization without affine terms. Returns the output and
/// `1/√(var + ε)`.
pub fn layer_norm(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv).collect(), inv)
}

/// `h⁽⁰⁾_v = [x_v ; e_v]`.
pub fn init_embeddings(
    config: &GnnConfig,
    obs: &[f64],
    static_attrs: &[f64],
) -> Result<Vec<f64>, GnnError> {
    check("observed features", config.obs_width, obs.len())?;
    check("static features", config.static_width, static_attrs.len())?;
    Ok([obs, static_attrs].concat())
}

/// `Σ_u α_u m_u`.
pub fn aggregate(messages: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>, GnnError> {
    if messages.len() != weights.len() {
        return Err(GnnError::LengthMismatch(messages.len(), weights.len()));
    }
    let Some(first) = messages.first() else {
        return Ok(Vec::new());
    };
    let mut out = vec![0.0; first.len()];
    for (m, &a) in messages.iter().zip(weights) {
        check("message", out.len(), m.len())?;
        for (o, x) in out.iter_mut().zip(m) {
            *o += a * x;
        }
    }
    Ok(out)
}

/// Number of observed per-node features built by [`node_features`].
pub const OBS_FEATURES: usize = 2;

/// Observed node features: mean normalized speed and mean utilization over
/// the node's incident edges.
pub fn node_features(net: &RoadNetwork, state: &TrafficState) -> Vec<Vec<f64>> {
    (0..net.node_count())
        .map(|v| {
            let incident: Vec<usize> = net
                .out_edges(v)
                .iter()
                .chain(net.in_edges(v))
                .copied()
                .collect();
            if incident.is_empty() {
                return vec![0.0; OBS_FEATURES];
            }
            let n = incident.len() as f64;
            let speed = incident
                .iter()
                .map(|&e| state.edges[e].speed / SPEED_SCALE_MPH)
                .sum::<f64>()
                / n;
            let util = incident
                .iter()
                .map(|&e| state.edges[e].flow / net.edges()[e].capacity)
                .sum::<f64>()
                / n;
            vec![speed, util]
        })
        .collect()
}

/// One graph snapshot: observed node features, the GRU state carried into
/// it, and (for training) observed per-edge speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<Vec<f64>>,
    /// `None` means a zero initial hidden state.
    pub hidden: Option<Vec<Vec<f64>>>,
    /// Observed speed in mph per edge; `None` for unobserved edges.
    pub targets: Vec<Option<f64>>,
}

impl Sample {
    pub fn observed(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Predicted minutes per edge, never below free-flow time.
    pub predictions: Vec<f64>,
    /// Post-GRU node states, carried into the next step.
    pub hidden: Vec<Vec<f64>>,
}

/// Dropout masks are drawn from this stream when training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutSeed(pub u64);

impl DropoutSeed {
    pub(crate) fn rng(self) -> Rng {
        rng_for(self.0, &[stream::DROPOUT])
    }
}

/// Inference pass (dropout off) or seeded training pass.
pub fn forward(
    model: &GnnModel,
    net: &RoadNetwork,
    features: &[Vec<f64>],
    hidden: Option<&[Vec<f64>]>,
    dropout: Option<DropoutSeed>,
) -> Result<ForwardOutput, GnnError> {
    let cache = backprop::forward_cached(model, net, features, hidden, dropout)?;
    Ok(ForwardOutput {
        predictions: cache.predictions.clone(),
        hidden: cache.gru.iter().map(|g| g.out.clone()).collect(),
    })
}

/// Predicts edge travel times from a traffic state.
pub fn predict_state(
    model: &GnnModel,
    net: &RoadNetwork,
    state: &TrafficState,
    hidden: Option<&[Vec<f64>]>,
) -> Result<ForwardOutput, GnnError> {
    forward(model, net, &node_features(net, state), hidden, None)
}
