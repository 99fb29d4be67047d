//! Predictive cache budgeting.
//!
//! The number of dynamic voxels is modelled as `σ·exp(μ·(k − anchor))` for
//! steps after the anchor. `σ` is measured once at the anchor; the remaining
//! tokens after subtracting the predicted change (in token units) are cached.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcscError {
    #[error("anchor step {anchor} leaves fewer than 2 full steps (steps={steps}, rho_a={rho_a})")]
    AnchorTooEarly { anchor: usize, steps: usize, rho_a: f64 },
    #[error("step {step} precedes the anchor step {anchor}")]
    BeforeAnchor { step: usize, anchor: usize },
    #[error("gamma_up must be positive and finite, got {0}")]
    InvalidGammaUp(f64),
    #[error("total token count must be at least 1")]
    NoTokens,
}

impl PcscError {
    pub fn class(&self) -> &'static str {
        match self {
            PcscError::AnchorTooEarly { .. } => "AnchorTooEarly",
            PcscError::BeforeAnchor { .. } => "BeforeAnchor",
            PcscError::InvalidGammaUp(_) => "InvalidGammaUp",
            PcscError::NoTokens => "NoTokens",
        }
    }
}

/// `⌈n·ρ⌉`, tolerant of the representation error in `ρ` (so `10·0.3` is 3).
pub fn ceil_steps(n: usize, rho: f64) -> usize {
    let x = n as f64 * rho;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Round half up, used for every real-to-count conversion of budgets.
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Inputs to calibration that do not depend on the measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcscParams {
    pub steps: usize,
    pub rho_a: f64,
    pub mu: f64,
    pub gamma_up: f64,
    pub total_tokens: usize,
}

impl PcscParams {
    pub fn anchor_step(&self) -> Result<usize, PcscError> {
        let anchor = ceil_steps(self.steps, self.rho_a);
        if anchor < 2 {
            return Err(PcscError::AnchorTooEarly { anchor, steps: self.steps, rho_a: self.rho_a });
        }
        Ok(anchor)
    }

    /// Shape of the prediction, `exp(μ·(k − anchor))` for `k = anchor..=steps`.
    /// Multiply by `σ` once it is known.
    pub fn decay_curve(&self) -> Result<Vec<f64>, PcscError> {
        let anchor = self.anchor_step()?;
        Ok((anchor..=self.steps.max(anchor)).map(|k| (self.mu * (k - anchor) as f64).exp()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcscCalibration {
    pub sigma: f64,
    pub mu: f64,
    pub anchor_step: usize,
    pub gamma_up: f64,
    pub total_tokens: usize,
}

pub fn calibrate(delta_s_at_anchor: u64, params: &PcscParams) -> Result<PcscCalibration, PcscError> {
    let anchor_step = params.anchor_step()?;
    if !(params.gamma_up.is_finite() && params.gamma_up > 0.0) {
        return Err(PcscError::InvalidGammaUp(params.gamma_up));
    }
    if params.total_tokens == 0 {
        return Err(PcscError::NoTokens);
    }
    Ok(PcscCalibration {
        sigma: delta_s_at_anchor as f64,
        mu: params.mu,
        anchor_step,
        gamma_up: params.gamma_up,
        total_tokens: params.total_tokens,
    })
}

impl PcscCalibration {
    /// Predicted dynamic voxels `Δŝ` at step `k`.
    pub fn predict_dynamic_voxels(&self, k: usize) -> Result<f64, PcscError> {
        if k < self.anchor_step {
            return Err(PcscError::BeforeAnchor { step: k, anchor: self.anchor_step });
        }
        Ok(self.sigma * (self.mu * (k - self.anchor_step) as f64).exp())
    }

    /// Number of tokens to cache at step `k`.
    pub fn cache_quota(&self, k: usize) -> Result<usize, PcscError> {
        let predicted = self.predict_dynamic_voxels(k)?;
        Ok(quota_from_prediction(predicted, self.gamma_up, self.total_tokens))
    }
}

/// `clamp(round(total − Δŝ/γ_up), 0, total)`.
pub fn quota_from_prediction(predicted: f64, gamma_up: f64, total_tokens: usize) -> usize {
    let raw = round_half_up(total_tokens as f64 - predicted / gamma_up);
    raw.clamp(0.0, total_tokens as f64) as usize
}
