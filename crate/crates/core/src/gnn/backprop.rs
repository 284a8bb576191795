//! Cached forward pass and reverse-mode gradients.

use rand::Rng as _;

use super::{
    gru_slots, layer_norm, layer_slot, readout_slots, sigmoid, softmax, softplus, Aggregator,
    DropoutSeed, GnnError, GnnModel, GruCache, ModelGradient, Sample, ATT, LEAKY_SLOPE, MSG,
    NEIGH, SELF, SPEED_SCALE_MPH,
};
use crate::network::RoadNetwork;
use crate::par::Exec;
use crate::rng::derive_seed;
use crate::tensor::ParamSet;

pub(crate) struct LayerCache {
    h_in: Vec<Vec<f64>>,
    /// Raw attention scores and normalized weights, per edge.
    score: Vec<f64>,
    alpha: Vec<f64>,
    msg: Vec<Vec<f64>>,
    agg: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    normed: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    mask: Option<Vec<Vec<f64>>>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    gnn_out: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
    pub gru: Vec<GruCache>,
    logits: Vec<f64>,
    pub predictions: Vec<f64>,
}

fn width_err(what: &'static str, expected: usize, found: usize) -> GnnError {
    GnnError::WidthMismatch {
        what,
        expected,
        found,
    }
}

pub(crate) fn forward_cached(
    model: &GnnModel,
    net: &RoadNetwork,
    features: &[Vec<f64>],
    hidden: Option<&[Vec<f64>]>,
    dropout: Option<DropoutSeed>,
) -> Result<ForwardCache, GnnError> {
    let cfg = &model.config;
    let n = net.node_count();
    let d = cfg.hidden;
    if features.len() != n {
        return Err(GnnError::LengthMismatch(features.len(), n));
    }
    if net.edge_attr_width() != cfg.edge_width {
        return Err(width_err("edge attributes", cfg.edge_width, net.edge_attr_width()));
    }
    let mut h: Vec<Vec<f64>> = features
        .iter()
        .zip(net.nodes())
        .map(|(x, node)| super::init_embeddings(cfg, x, &node.attrs))
        .collect::<Result<_, _>>()?;
    let h_prev: Vec<Vec<f64>> = match hidden {
        Some(hs) => {
            if hs.len() != n {
                return Err(GnnError::LengthMismatch(hs.len(), n));
            }
            if let Some(bad) = hs.iter().find(|v| v.len() != d) {
                return Err(width_err("hidden state", d, bad.len()));
            }
            hs.to_vec()
        }
        None => vec![vec![0.0; d]; n],
    };
    let mut rng = dropout.filter(|_| cfg.dropout > 0.0).map(DropoutSeed::rng);
    let keep_scale = 1.0 / (1.0 - cfg.dropout);
    let m_edges = net.edge_count();
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut score = vec![0.0; m_edges];
        let mut alpha = vec![0.0; m_edges];
        let mut msg = vec![Vec::new(); m_edges];
        for e in 0..m_edges {
            let (u, v) = net.endpoints(e);
            msg[e] = model.message(l, &h[u], &h[v], &net.edges()[e].attrs)?;
            if cfg.aggregator == Aggregator::Attention {
                score[e] = model.attention_score(l, &h[u], &h[v]).0;
            }
        }
        let mut agg = vec![vec![0.0; d]; n];
        for v in 0..n {
            let ins = net.in_edges(v);
            if ins.is_empty() {
                continue;
            }
            let weights = match cfg.aggregator {
                Aggregator::Mean => vec![1.0 / ins.len() as f64; ins.len()],
                Aggregator::Attention => {
                    let s: Vec<f64> = ins.iter().map(|&e| super::leaky_relu(score[e])).collect();
                    softmax(&s)
                }
            };
            for (&e, &a) in ins.iter().zip(&weights) {
                alpha[e] = a;
                for (o, x) in agg[v].iter_mut().zip(&msg[e]) {
                    *o += a * x;
                }
            }
        }
        let mut pre = Vec::with_capacity(n);
        let mut normed = Vec::with_capacity(n);
        let mut inv_std = Vec::with_capacity(n);
        for v in 0..n {
            let mut p = model.t(layer_slot(l, SELF)).matvec(&h[v]);
            model.t(layer_slot(l, NEIGH)).matvec_add(&agg[v], &mut p);
            let r: Vec<f64> = p.iter().map(|x| x.max(0.0)).collect();
            let (y, inv) = layer_norm(&r);
            pre.push(p);
            normed.push(y);
            inv_std.push(inv);
        }
        let mask = rng.as_mut().map(|rng| {
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            if rng.random::<f64>() < cfg.dropout {
                                0.0
                            } else {
                                keep_scale
                            }
                        })
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>()
        });
        let out: Vec<Vec<f64>> = match &mask {
            Some(mask) => normed
                .iter()
                .zip(mask)
                .map(|(y, m)| y.iter().zip(m).map(|(a, b)| a * b).collect())
                .collect(),
            None => normed.clone(),
        };
        let h_in = std::mem::replace(&mut h, out);
        layers.push(LayerCache {
            h_in,
            score,
            alpha,
            msg,
            agg,
            pre,
            normed,
            inv_std,
            mask,
        });
    }
    let gru: Vec<GruCache> = (0..n).map(|v| model.gru_forward(&h_prev[v], &h[v])).collect();
    let mut logits = Vec::with_capacity(m_edges);
    let mut predictions = Vec::with_capacity(m_edges);
    for (e, edge) in net.edges().iter().enumerate() {
        let (u, v) = net.endpoints(e);
        let q = model.readout_logit(&gru[u].out, &gru[v].out);
        logits.push(q);
        predictions.push((edge.free_flow_time * (1.0 + softplus(q))).max(edge.free_flow_time));
    }
    Ok(ForwardCache {
        layers,
        gnn_out: h,
        h_prev,
        gru,
        logits,
        predictions,
    })
}

/// Predicted speed in mph from a predicted travel time.
pub(crate) fn predicted_speed(length_miles: f64, minutes: f64) -> f64 {
    60.0 * length_miles / minutes
}

fn gru_backward(
    model: &GnnModel,
    c: &GruCache,
    h: &[f64],
    x: &[f64],
    dout: &[f64],
    g: &mut ParamSet,
) -> Vec<f64> {
    let s = gru_slots(model.config.layers);
    let d = h.len();
    let mut dx = vec![0.0; d];
    let mut da_h = vec![0.0; d];
    let mut da_z = vec![0.0; d];
    for i in 0..d {
        let dz = dout[i] * (c.hh[i] - h[i]);
        let dhh = dout[i] * c.z[i];
        da_h[i] = dhh * (1.0 - c.hh[i] * c.hh[i]);
        da_z[i] = dz * c.z[i] * (1.0 - c.z[i]);
    }
    g.tensors[s.w[2]].outer_add(&da_h, x);
    g.tensors[s.u[2]].outer_add(&da_h, &c.rh);
    add(&mut g.tensors[s.b[2]].data, &da_h);
    model.t(s.w[2]).matvec_t_add(&da_h, &mut dx);
    let mut drh = vec![0.0; d];
    model.t(s.u[2]).matvec_t_add(&da_h, &mut drh);
    let da_r: Vec<f64> = (0..d)
        .map(|i| drh[i] * h[i] * c.r[i] * (1.0 - c.r[i]))
        .collect();
    for (k, da) in [(0usize, &da_z), (1, &da_r)] {
        g.tensors[s.w[k]].outer_add(da, x);
        g.tensors[s.u[k]].outer_add(da, h);
        add(&mut g.tensors[s.b[k]].data, da);
        model.t(s.w[k]).matvec_t_add(da, &mut dx);
    }
    dx
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of `Σ_e dpred_e · prediction_e` with respect to all parameters.
pub(crate) fn backward(
    model: &GnnModel,
    net: &RoadNetwork,
    cache: &ForwardCache,
    dpred: &[f64],
) -> ParamSet {
    let cfg = &model.config;
    let n = net.node_count();
    let d = cfg.hidden;
    let mut g = ParamSet::zeros_like(&model.params);

    let (rw, rb) = readout_slots(cfg.layers);
    let mut dg = vec![vec![0.0; d]; n];
    for (e, edge) in net.edges().iter().enumerate() {
        if dpred[e] == 0.0 {
            continue;
        }
        let (u, v) = net.endpoints(e);
        let dq = dpred[e] * edge.free_flow_time * sigmoid(cache.logits[e]);
        g.tensors[rb].data[0] += dq;
        let (gu, gv) = (&cache.gru[u].out, &cache.gru[v].out);
        let w = &model.t(rw).data;
        for i in 0..d {
            g.tensors[rw].data[i] += dq * gu[i];
            g.tensors[rw].data[d + i] += dq * gv[i];
            dg[u][i] += dq * w[i];
            dg[v][i] += dq * w[d + i];
        }
    }

    let mut dh: Vec<Vec<f64>> = (0..n)
        .map(|v| {
            if dg[v].iter().all(|&x| x == 0.0) {
                return vec![0.0; d];
            }
            gru_backward(model, &cache.gru[v], &cache.h_prev[v], &cache.gnn_out[v], &dg[v], &mut g)
        })
        .collect();

    for l in (0..cfg.layers).rev() {
        let lc = &cache.layers[l];
        let w = cfg.layer_width(l);
        let need_input_grad = l > 0;
        let mut dh_in = vec![vec![0.0; w]; n];
        let att = &model.t(layer_slot(l, ATT)).data;
        for v in 0..n {
            let mut dy = dh[v].clone();
            if let Some(mask) = &lc.mask {
                for (a, m) in dy.iter_mut().zip(&mask[v]) {
                    *a *= m;
                }
            }
            let y = &lc.normed[v];
            let mean_dy = dy.iter().sum::<f64>() / d as f64;
            let mean_dyy = dot(&dy, y) / d as f64;
            let dp: Vec<f64> = (0..d)
                .map(|i| {
                    if lc.pre[v][i] > 0.0 {
                        lc.inv_std[v] * (dy[i] - mean_dy - y[i] * mean_dyy)
                    } else {
                        0.0
                    }
                })
                .collect();
            if dp.iter().all(|&x| x == 0.0) {
                continue;
            }
            g.tensors[layer_slot(l, SELF)].outer_add(&dp, &lc.h_in[v]);
            if need_input_grad {
                model.t(layer_slot(l, SELF)).matvec_t_add(&dp, &mut dh_in[v]);
            }
            g.tensors[layer_slot(l, NEIGH)].outer_add(&dp, &lc.agg[v]);
            let ins = net.in_edges(v);
            if ins.is_empty() {
                continue;
            }
            let mut dm_agg = vec![0.0; d];
            model.t(layer_slot(l, NEIGH)).matvec_t_add(&dp, &mut dm_agg);

            let dalpha: Vec<f64> = ins.iter().map(|&e| dot(&dm_agg, &lc.msg[e])).collect();
            let weighted: f64 = ins.iter().zip(&dalpha).map(|(&e, da)| lc.alpha[e] * da).sum();
            for (k, &e) in ins.iter().enumerate() {
                let u = net.endpoints(e).0;
                let a = lc.alpha[e];
                let dm: Vec<f64> = dm_agg.iter().map(|x| a * x).collect();
                let c: Vec<f64> =
                    [lc.h_in[u].as_slice(), &lc.h_in[v], &net.edges()[e].attrs].concat();
                g.tensors[layer_slot(l, MSG)].outer_add(&dm, &c);
                if need_input_grad {
                    let mut dc = vec![0.0; c.len()];
                    model.t(layer_slot(l, MSG)).matvec_t_add(&dm, &mut dc);
                    add(&mut dh_in[u], &dc[..w]);
                    add(&mut dh_in[v], &dc[w..2 * w]);
                }
                if cfg.aggregator == Aggregator::Attention {
                    let slope = if lc.score[e] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                    let ds = a * (dalpha[k] - weighted) * slope;
                    if ds == 0.0 {
                        continue;
                    }
                    let ga = &mut g.tensors[layer_slot(l, ATT)].data;
                    for i in 0..w {
                        ga[i] += ds * lc.h_in[u][i];
                        ga[w + i] += ds * lc.h_in[v][i];
                    }
                    if need_input_grad {
                        for i in 0..w {
                            dh_in[u][i] += ds * att[i];
                            dh_in[v][i] += ds * att[w + i];
                        }
                    }
                }
            }
        }
        dh = dh_in;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    /// Mean squared error on normalized speed.
    pub loss: f64,
    pub observed: usize,
}

/// Per-sample sum of squared normalized-speed residuals and its gradient.
fn sample_sse(
    model: &GnnModel,
    net: &RoadNetwork,
    sample: &Sample,
    dropout: Option<DropoutSeed>,
) -> Result<(f64, ParamSet), GnnError> {
    if sample.targets.len() != net.edge_count() {
        return Err(GnnError::LengthMismatch(sample.targets.len(), net.edge_count()));
    }
    let cache = forward_cached(model, net, &sample.features, sample.hidden.as_deref(), dropout)?;
    let mut sse = 0.0;
    let mut dpred = vec![0.0; net.edge_count()];
    for (e, target) in sample.targets.iter().enumerate() {
        let Some(y) = target else { continue };
        let w = cache.predictions[e];
        let p = predicted_speed(net.edges()[e].length_miles, w);
        let res = (p - y) / SPEED_SCALE_MPH;
        sse += res * res;
        // d(res²)/dw = 2 res / scale · dp/dw, with dp/dw = −p / w.
        dpred[e] = 2.0 * res / SPEED_SCALE_MPH * (-p / w);
    }
    Ok((sse, backward(model, net, &cache, &dpred)))
}

/// Mean squared error over every observed edge in the batch, and its
/// analytic gradient. Per-sample dropout streams derive from `dropout`.
pub fn loss_and_gradient(
    model: &GnnModel,
    net: &RoadNetwork,
    batch: &[&Sample],
    dropout: Option<DropoutSeed>,
    exec: Exec,
) -> Result<(BatchLoss, ModelGradient), GnnError> {
    if batch.is_empty() {
        return Err(GnnError::EmptyBatch);
    }
    let observed: usize = batch.iter().map(|s| s.observed()).sum();
    let parts = exec.map_range(batch.len(), |i| {
        let seed = dropout.map(|s| DropoutSeed(derive_seed(s.0, &[i as u64])));
        sample_sse(model, net, batch[i], seed)
    });
    let mut grad = ParamSet::zeros_like(&model.params);
    let mut sse = 0.0;
    for part in parts {
        let (s, g) = part?;
        sse += s;
        grad.add_assign(&g);
    }
    if observed == 0 {
        return Ok((BatchLoss { loss: 0.0, observed }, ModelGradient { params: grad }));
    }
    let scale = 1.0 / observed as f64;
    grad.scale(scale);
    Ok((
        BatchLoss {
            loss: sse * scale,
            observed,
        },
        ModelGradient { params: grad },
    ))
}

/// Loss only (no gradient), dropout off.
pub fn evaluate_loss(
    model: &GnnModel,
    net: &RoadNetwork,
    samples: &[Sample],
) -> Result<BatchLoss, GnnError> {
    let mut sse = 0.0;
    let mut observed = 0;
    for s in samples {
        let out = super::forward(model, net, &s.features, s.hidden.as_deref(), None)?;
        for (e, t) in s.targets.iter().enumerate() {
            if let Some(y) = t {
                let p = predicted_speed(net.edges()[e].length_miles, out.predictions[e]);
                sse += ((p - y) / SPEED_SCALE_MPH).powi(2);
                observed += 1;
            }
        }
    }
    Ok(BatchLoss {
        loss: if observed == 0 { 0.0 } else { sse / observed as f64 },
        observed,
    })
}
