//! Gaussian-mechanism machinery: noise calibration, clipping, noisy
//! aggregation, adaptive clipping and composition accounting.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::ModelGradient;
use crate::par::Exec;
use crate::rng::{rng_for, stream};
use crate::tensor::ParamSet;

/// Slack allowed on the clipped norm before [`add_noise`] refuses input.
pub const CLIP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameters: {0}")]
    InvalidPrivacyParams(String),
    #[error("gradient norm {norm} exceeds clip norm {clip}")]
    NotClipped { norm: f64, clip: f64 },
    #[error("privacy budget exhausted: charge would reach {would_spend:.4} > budget {budget:.4}")]
    BudgetExhausted { would_spend: f64, budget: f64 },
    #[error("no client gradients to aggregate")]
    EmptyClientSet,
    #[error("no gradient norms supplied")]
    EmptyNorms,
    #[error("invalid adaptive clipping config: {0}")]
    InvalidAdaptiveConfig(String),
}

fn invalid(msg: impl Into<String>) -> PrivacyError {
    PrivacyError::InvalidPrivacyParams(msg.into())
}

/// `σ = √(2 ln(1.25/δ)) · C / ε`.
pub fn calibrate_noise(epsilon: f64, delta: f64, clip_norm: f64) -> Result<f64, PrivacyError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(clip_norm >= 0.0 && clip_norm.is_finite()) {
        return Err(invalid(format!("clip norm must be >= 0, got {clip_norm}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * clip_norm / epsilon)
}

/// Composed loss after `rounds` participations at per-round `epsilon`:
/// `√(2T ln(1/δ)) ε + T ε (e^ε − 1)`.
pub fn compose_budget(epsilon: f64, delta: f64, rounds: u64) -> Result<f64, PrivacyError> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    let t = rounds as f64;
    Ok((2.0 * t * (1.0 / delta).ln()).sqrt() * epsilon + t * epsilon * epsilon.exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

impl PrivacyParams {
    /// Parameters with `σ` derived from `(ε, δ, C)`.
    pub fn calibrated(epsilon: f64, delta: f64, clip_norm: f64) -> Result<Self, PrivacyError> {
        Ok(Self {
            epsilon,
            delta,
            clip_norm,
            noise_multiplier: calibrate_noise(epsilon, delta, clip_norm)?,
        })
    }

    /// Noise disabled; clipping still applies.
    pub fn noiseless(epsilon: f64, delta: f64, clip_norm: f64) -> Self {
        Self {
            epsilon,
            delta,
            clip_norm,
            noise_multiplier: 0.0,
        }
    }

    /// Per-coordinate noise standard deviation `σ·C`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }

    /// The Gaussian mechanism's analysis assumes ε < 1; larger values are
    /// accepted but flagged.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.epsilon >= 1.0 {
            w.push(format!(
                "epsilon = {} >= 1: the Gaussian-mechanism calibration is outside its usual validity range",
                self.epsilon
            ));
        }
        w
    }
}

/// `∇ / max(1, ‖∇‖₂ / C)`.
pub fn clip_gradient(grad: &ModelGradient, clip_norm: f64) -> ModelGradient {
    let factor = (grad.l2_norm() / clip_norm).max(1.0);
    let mut out = grad.clone();
    if factor > 1.0 {
        out.params.iter_mut().for_each(|x| *x /= factor);
    }
    out
}

/// Adds i.i.d. `N(0, (σC)²)` noise to every coordinate of an already-clipped
/// gradient.
pub fn add_noise(
    grad: &ModelGradient,
    sigma: f64,
    clip_norm: f64,
    seed: u64,
) -> Result<ModelGradient, PrivacyError> {
    let norm = grad.l2_norm();
    if norm > clip_norm + CLIP_TOLERANCE {
        return Err(PrivacyError::NotClipped {
            norm,
            clip: clip_norm,
        });
    }
    let mut out = grad.clone();
    add_gaussian(&mut out.params, sigma * clip_norm, seed)?;
    Ok(out)
}

/// Adds i.i.d. `N(0, std²)` to every coordinate; `std = 0` leaves the bits
/// untouched.
pub fn add_gaussian(params: &mut ParamSet, std: f64, seed: u64) -> Result<(), PrivacyError> {
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
    let mut rng = rng_for(seed, &[stream::NOISE]);
    params
        .iter_mut()
        .for_each(|x| *x += normal.sample(&mut rng));
    Ok(())
}

/// Clip then noise one client's contribution.
pub fn privatize(
    grad: &ModelGradient,
    params: &PrivacyParams,
    seed: u64,
) -> Result<ModelGradient, PrivacyError> {
    let clipped = clip_gradient(grad, params.clip_norm);
    add_noise(&clipped, params.noise_multiplier, params.clip_norm, seed)
}

/// Composition bookkeeping with a hard ceiling. Charges are totally ordered;
/// once a charge would exceed the ceiling the accountant freezes and rejects
/// everything after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccountant {
    pub budget_epsilon: f64,
    pub delta: f64,
    pub per_round_epsilon: Vec<f64>,
    spent: f64,
    frozen: bool,
}

impl PrivacyAccountant {
    pub fn new(budget_epsilon: f64, delta: f64) -> Result<Self, PrivacyError> {
        if !(budget_epsilon >= 0.0) {
            return Err(invalid(format!("budget must be >= 0, got {budget_epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0,1), got {delta}")));
        }
        Ok(Self {
            budget_epsilon,
            delta,
            per_round_epsilon: Vec::new(),
            spent: 0.0,
            frozen: false,
        })
    }

    pub fn rounds(&self) -> u64 {
        self.per_round_epsilon.len() as u64
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Composed spend for a list of per-round charges. Heterogeneous charges
    /// are composed at their maximum.
    fn composed(per_round: &[f64], delta: f64) -> Result<f64, PrivacyError> {
        let eps = per_round.iter().copied().fold(0.0, f64::max);
        compose_budget(eps, delta, per_round.len() as u64)
    }

    /// Recomputes the composed spend from the charge history.
    pub fn recompute(&self) -> Result<f64, PrivacyError> {
        Self::composed(&self.per_round_epsilon, self.delta)
    }

    /// Would charging `round_epsilon` now stay within budget?
    pub fn would_allow(&self, round_epsilon: f64) -> Result<bool, PrivacyError> {
        if self.frozen {
            return Ok(false);
        }
        let mut next = self.per_round_epsilon.clone();
        next.push(round_epsilon);
        Ok(Self::composed(&next, self.delta)? <= self.budget_epsilon)
    }

    /// Charges one round. On rejection the history and spend are unchanged
    /// and the accountant freezes.
    pub fn charge(&mut self, round_epsilon: f64) -> Result<f64, PrivacyError> {
        let mut next = self.per_round_epsilon.clone();
        next.push(round_epsilon);
        let would_spend = Self::composed(&next, self.delta)?;
        if self.frozen || would_spend > self.budget_epsilon {
            self.frozen = true;
            return Err(PrivacyError::BudgetExhausted {
                would_spend,
                budget: self.budget_epsilon,
            });
        }
        self.per_round_epsilon = next;
        self.spent = would_spend;
        Ok(would_spend)
    }
}

/// Clip and noise every client gradient, then average. The accountant is
/// charged once, before anything else; a rejected charge aborts the call.
pub fn aggregate_private(
    grads: &[ModelGradient],
    params: &PrivacyParams,
    acct: &mut PrivacyAccountant,
    seed: u64,
    exec: Exec,
) -> Result<ModelGradient, PrivacyError> {
    if grads.is_empty() {
        return Err(PrivacyError::EmptyClientSet);
    }
    acct.charge(params.epsilon)?;
    let noised = exec.map_range(grads.len(), |i| {
        privatize(&grads[i], params, crate::rng::derive_seed(seed, &[i as u64]))
    });
    let noised: Vec<ModelGradient> = noised.into_iter().collect::<Result<_, _>>()?;
    Ok(mean_gradient(&noised))
}

/// Uniform mean, summed in input order.
pub fn mean_gradient(grads: &[ModelGradient]) -> ModelGradient {
    let mut sum = grads[0].clone();
    for g in &grads[1..] {
        sum.params.add_assign(&g.params);
    }
    let n = grads.len() as f64;
    sum.params.iter_mut().for_each(|x| *x /= n);
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveClipConfig {
    /// Weight on the previous clip norm.
    pub alpha: f64,
    pub quantile: f64,
}

impl AdaptiveClipConfig {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PrivacyError::InvalidAdaptiveConfig(format!(
                "alpha {} outside [0,1]",
                self.alpha
            )));
        }
        if !(0.5..=0.9).contains(&self.quantile) {
            return Err(PrivacyError::InvalidAdaptiveConfig(format!(
                "quantile {} outside [0.5,0.9]",
                self.quantile
            )));
        }
        Ok(())
    }
}

/// Lower order statistic at `ceil(q·n) − 1` (0-indexed).
pub fn lower_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    Some(v[idx])
}

/// `C_{t+1} = α C_t + (1 − α) quantile(norms, q)`.
pub fn adapt_clip_norm(
    clip_norm: f64,
    norms: &[f64],
    cfg: &AdaptiveClipConfig,
) -> Result<f64, PrivacyError> {
    cfg.validate()?;
    let q = lower_quantile(norms, cfg.quantile).ok_or(PrivacyError::EmptyNorms)?;
    Ok(cfg.alpha * clip_norm + (1.0 - cfg.alpha) * q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub round: usize,
    pub epsilon_spent: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub sigma: f64,
}
