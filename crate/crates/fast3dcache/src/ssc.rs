//! Stability scoring and cache/active token selection.
//!
//! Low scores mark tokens whose velocity is small and slowly varying; those
//! are the ones reused from the cache.

use crate::grid::{GridError, VelocityField};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SscError {
    #[error("cannot normalize an empty score vector")]
    Empty,
    #[error("omega must lie in [0, 1], got {0}")]
    OmegaOutOfRange(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl SscError {
    pub fn class(&self) -> &'static str {
        match self {
            SscError::Empty => "EmptyInput",
            SscError::OmegaOutOfRange(_) => "OmegaOutOfRange",
            SscError::LengthMismatch(..) => "LengthMismatch",
            SscError::Grid(e) => e.class(),
        }
    }
}

/// Per-token L2 norm over channels for one batch element.
pub fn velocity_magnitude(v: &VelocityField, batch: usize) -> Vec<f64> {
    let dims = v.dims();
    let data = v.values.data();
    let mut out = vec![0.0f64; dims.tokens()];
    for c in 0..dims.channels {
        let start = dims.offset(batch, c, 0);
        for (acc, x) in out.iter_mut().zip(&data[start..start + dims.tokens()]) {
            let x = *x as f64;
            *acc += x * x;
        }
    }
    out.iter_mut().for_each(|s| *s = s.sqrt());
    out
}

/// Per-token `‖v_now − v_prev‖₂`, the error of reusing the older velocity.
pub fn acceleration(v_now: &VelocityField, v_prev: &VelocityField, batch: usize) -> Result<Vec<f64>, SscError> {
    let dims = v_now.dims();
    if dims != v_prev.dims() {
        return Err(GridError::DimMismatch { left: dims, right: v_prev.dims() }.into());
    }
    let (a, b) = (v_now.values.data(), v_prev.values.data());
    let mut out = vec![0.0f64; dims.tokens()];
    for c in 0..dims.channels {
        let start = dims.offset(batch, c, 0);
        let end = start + dims.tokens();
        for (acc, (x, y)) in out.iter_mut().zip(a[start..end].iter().zip(&b[start..end])) {
            let d = *x as f64 - *y as f64;
            *acc += d * d;
        }
    }
    out.iter_mut().for_each(|s| *s = s.sqrt());
    Ok(out)
}

/// Min-max normalization to `[0, 1]`; a constant vector maps to all zeros.
pub fn minmax_normalize(x: &[f64]) -> Result<Vec<f64>, SscError> {
    if x.is_empty() {
        return Err(SscError::Empty);
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; x.len()]);
    }
    let span = hi - lo;
    Ok(x.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect())
}

/// `C_i = ω·norm(A_i) + (1−ω)·norm(V_i)`.
pub fn cacheability_score(magnitude: &[f64], accel: &[f64], omega: f64) -> Result<Vec<f64>, SscError> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(SscError::OmegaOutOfRange(omega));
    }
    if magnitude.len() != accel.len() {
        return Err(SscError::LengthMismatch(magnitude.len(), accel.len()));
    }
    let nv = minmax_normalize(magnitude)?;
    let na = minmax_normalize(accel)?;
    Ok(na.iter().zip(&nv).map(|(a, v)| omega * a + (1.0 - omega) * v).collect())
}

/// Scores for one batch element from the two most recent stored fields.
pub fn stability_scores(
    v_cache: &VelocityField,
    v_prev_cache: &VelocityField,
    batch: usize,
    omega: f64,
) -> Result<Vec<f64>, SscError> {
    let v = velocity_magnitude(v_cache, batch);
    let a = acceleration(v_cache, v_prev_cache, batch)?;
    cacheability_score(&v, &a, omega)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePartition {
    /// Ascending token indices recomputed this step.
    pub active: Vec<usize>,
    /// Ascending token indices reused from the cache.
    pub cached: Vec<usize>,
    pub quota_used: usize,
    /// Set when the consecutive-cache limit emptied a non-zero quota.
    pub forced_refresh: bool,
}

impl CachePartition {
    pub fn all_active(tokens: usize) -> Self {
        CachePartition { active: (0..tokens).collect(), cached: Vec::new(), quota_used: 0, forced_refresh: false }
    }
}

/// Token order from most to least cacheable: ascending score, ties by index.
pub fn stability_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    order
}

/// Cache the `quota` lowest-scoring tokens.
///
/// `tau = 0` disables the consecutive-cache limit; otherwise the cached set
/// is emptied once `consecutive_cached ≥ tau`.
pub fn select_partition(scores: &[f64], quota: usize, consecutive_cached: u32, tau: u32) -> CachePartition {
    let n = scores.len();
    let quota = quota.min(n);
    if quota == 0 {
        return CachePartition::all_active(n);
    }
    if tau > 0 && consecutive_cached >= tau {
        return CachePartition { forced_refresh: true, ..CachePartition::all_active(n) };
    }
    let order = stability_order(scores);
    let mut is_cached = vec![false; n];
    for &i in &order[..quota] {
        is_cached[i] = true;
    }
    let (cached, active): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_cached[i]);
    CachePartition { active, cached, quota_used: quota, forced_refresh: false }
}
