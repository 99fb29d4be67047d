//! Three-phase accelerated Euler sampler.
//!
//! Phase 1 evaluates every token. At the anchor step the change in decoded
//! occupancy calibrates the predictive budget used through Phase 2. Phase 3
//! runs after guidance switches off and caches a fixed ratio, with periodic
//! full correction steps.

use std::fmt;
use std::str::FromStr;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flops::{flops_step, BlockDims};
use crate::grid::{dynamic_voxel_count, DecoderSpec, Dims, GridError, LatentGrid, OccupancyDecoder, OccupancyGrid, VelocityField};
use crate::pcsc::{calibrate, ceil_steps, round_half_up, PcscCalibration, PcscError, PcscParams};
use crate::ssc::{select_partition, stability_scores, CachePartition, SscError};

/// Steps a fixed-ratio policy always evaluates in full, since scoring needs
/// two velocity fields.
pub const FIXED_POLICY_WARMUP_STEPS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("rho_a must lie in (0, 1), got {0}")]
    RhoAOutOfRange(f64),
    #[error("rho_cfg_off must satisfy rho_a < rho_cfg_off < 1, got rho_a={rho_a} rho_cfg_off={rho_cfg_off}")]
    RhoOrder { rho_a: f64, rho_cfg_off: f64 },
    #[error("omega must lie in [0, 1], got {0}")]
    OmegaOutOfRange(f64),
    #[error("xi must lie in (0, 1], got {0}")]
    XiOutOfRange(f64),
    #[error("eta must be at least 1, got {0}")]
    EtaOutOfRange(f64),
    #[error("cfg interval must satisfy 0 <= t_lo <= t_hi <= 1, got [{0}, {1}]")]
    CfgInterval(f64, f64),
    #[error("fixed active ratio must lie in [0, 1], got {0}")]
    FixedRatio(f64),
    #[error("cfg_scale must be finite, got {0}")]
    CfgScale(f64),
    #[error("mu must be finite, got {0}")]
    Mu(f64),
    #[error(transparent)]
    Pcsc(#[from] PcscError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl ConfigError {
    pub fn class(&self) -> &'static str {
        match self {
            ConfigError::NoSteps => "NoSteps",
            ConfigError::RhoAOutOfRange(_) => "RhoAOutOfRange",
            ConfigError::RhoOrder { .. } => "RhoOrder",
            ConfigError::OmegaOutOfRange(_) => "OmegaOutOfRange",
            ConfigError::XiOutOfRange(_) => "XiOutOfRange",
            ConfigError::EtaOutOfRange(_) => "EtaOutOfRange",
            ConfigError::CfgInterval(..) => "CfgInterval",
            ConfigError::FixedRatio(_) => "FixedRatio",
            ConfigError::CfgScale(_) => "CfgScale",
            ConfigError::Mu(_) => "Mu",
            ConfigError::Pcsc(e) => e.class(),
            ConfigError::Grid(e) => e.class(),
        }
    }
}

/// Failure reported by a velocity oracle.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{class}: {message}")]
pub struct OracleError {
    pub class: &'static str,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pcsc(#[from] PcscError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Ssc(#[from] SscError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("oracle returned {found} values, expected {expected}")]
    OracleOutputLength { expected: usize, found: usize },
    #[error("state became non-finite at step {0}")]
    NonFinite(usize),
}

impl PipelineError {
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::Config(e) => e.class(),
            PipelineError::Pcsc(e) => e.class(),
            PipelineError::Grid(e) => e.class(),
            PipelineError::Ssc(e) => e.class(),
            PipelineError::Oracle(e) => e.class,
            PipelineError::OracleOutputLength { .. } => "OracleOutputLength",
            PipelineError::NonFinite(_) => "NonFinite",
        }
    }
}

/// How cache budgets are chosen before the guidance cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachePolicy {
    /// Anchor-calibrated log-linear prediction.
    Predictive,
    /// Evaluate a fixed fraction of tokens from step 3 until the guidance
    /// cutoff; the calibrated phase split is not used.
    Fixed { active_ratio: f64 },
    /// Never cache; plain Euler sampling.
    Disabled,
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CachePolicy::Predictive => write!(f, "pcsc"),
            CachePolicy::Fixed { active_ratio } => write!(f, "fixed:{active_ratio}"),
            CachePolicy::Disabled => write!(f, "full"),
        }
    }
}

impl FromStr for CachePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pcsc" => Ok(CachePolicy::Predictive),
            "full" | "none" => Ok(CachePolicy::Disabled),
            _ => {
                let ratio = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| format!("unknown policy '{s}' (expected pcsc, full, or fixed:<ratio>)"))?;
                let active_ratio: f64 = ratio.parse().map_err(|_| format!("bad fixed ratio '{ratio}'"))?;
                Ok(CachePolicy::Fixed { active_ratio })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub rho_a: f64,
    pub rho_cfg_off: f64,
    pub mu: f64,
    pub omega: f64,
    /// Consecutive cached steps before a forced full step; 0 disables.
    pub tau: u32,
    pub xi: f64,
    /// Period of full correction steps after the guidance cutoff; 0 disables.
    pub f_corr: u32,
    pub eta: f64,
    pub cfg_interval: (f64, f64),
    pub cfg_scale: f64,
    /// Volumetric ratio between decoded occupancy and the token grid.
    pub gamma_up: f64,
    /// FLOPs multiplier for guided steps.
    pub cfg_flops_factor: u32,
    pub policy: CachePolicy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 25,
            rho_a: 0.2,
            rho_cfg_off: 0.75,
            mu: -0.07,
            omega: 0.7,
            tau: 3,
            xi: 0.7,
            f_corr: 3,
            eta: 3.0,
            cfg_interval: (0.5, 1.0),
            cfg_scale: 3.0,
            gamma_up: 8.0,
            cfg_flops_factor: 2,
            policy: CachePolicy::Predictive,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps == 0 {
            return Err(ConfigError::NoSteps);
        }
        if !(self.rho_a > 0.0 && self.rho_a < 1.0) {
            return Err(ConfigError::RhoAOutOfRange(self.rho_a));
        }
        if !(self.rho_a < self.rho_cfg_off && self.rho_cfg_off < 1.0) {
            return Err(ConfigError::RhoOrder { rho_a: self.rho_a, rho_cfg_off: self.rho_cfg_off });
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(ConfigError::OmegaOutOfRange(self.omega));
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(ConfigError::XiOutOfRange(self.xi));
        }
        if !(self.eta >= 1.0 && self.eta.is_finite()) {
            return Err(ConfigError::EtaOutOfRange(self.eta));
        }
        let (lo, hi) = self.cfg_interval;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(ConfigError::CfgInterval(lo, hi));
        }
        if !self.cfg_scale.is_finite() {
            return Err(ConfigError::CfgScale(self.cfg_scale));
        }
        if !self.mu.is_finite() {
            return Err(ConfigError::Mu(self.mu));
        }
        if let CachePolicy::Fixed { active_ratio } = self.policy {
            if !(0.0..=1.0).contains(&active_ratio) {
                return Err(ConfigError::FixedRatio(active_ratio));
            }
        }
        crate::grid::upsample_factor(self.gamma_up)?;
        self.pcsc_params(1).anchor_step()?;
        Ok(())
    }

    pub fn anchor_step(&self) -> usize {
        ceil_steps(self.steps, self.rho_a)
    }

    /// First step of the guidance-free refinement phase.
    pub fn refine_start(&self) -> usize {
        ceil_steps(self.steps, self.rho_cfg_off)
    }

    pub fn pcsc_params(&self, total_tokens: usize) -> PcscParams {
        PcscParams { steps: self.steps, rho_a: self.rho_a, mu: self.mu, gamma_up: self.gamma_up, total_tokens }
    }
}

/// Continuous times `t_1..t_N`, descending from 1.
pub fn build_time_schedule(steps: usize, eta: f64) -> Vec<f64> {
    (1..=steps).map(|k| shift_time(1.0 - (k - 1) as f64 / steps as f64, eta)).collect()
}

/// `η·t / (1 + (η−1)·t)`.
pub fn shift_time(t: f64, eta: f64) -> f64 {
    eta * t / (1.0 + (eta - 1.0) * t)
}

/// Time schedule plus the implicit terminal time `t_{N+1} = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    pub times: Vec<f64>,
}

impl TimeSchedule {
    pub fn new(steps: usize, eta: f64) -> Self {
        TimeSchedule { times: build_time_schedule(steps, eta) }
    }

    pub fn t(&self, k: usize) -> f64 {
        self.times[k - 1]
    }

    pub fn t_prev(&self, k: usize) -> f64 {
        self.times.get(k).copied().unwrap_or(0.0)
    }

    /// A step is guided when its whole interval `[t_prev, t]` lies inside the
    /// guidance window.
    pub fn is_guided(&self, k: usize, interval: (f64, f64)) -> bool {
        self.t_prev(k) >= interval.0 && self.t(k) <= interval.1
    }

    /// First step after which guidance stays off.
    pub fn cfg_off_step(&self, interval: (f64, f64)) -> Option<usize> {
        (1..=self.times.len()).find(|&k| self.t_prev(k) < interval.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FullSampling,
    DynamicCaching,
    CfgFreeRefinement,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::FullSampling => 1,
            Phase::DynamicCaching => 2,
            Phase::CfgFreeRefinement => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::FullSampling => "full_sampling",
            Phase::DynamicCaching => "dynamic_caching",
            Phase::CfgFreeRefinement => "cfg_free_refinement",
        }
    }
}

pub fn phase_of(k: usize, config: &SamplerConfig) -> Phase {
    if k <= config.anchor_step() {
        Phase::FullSampling
    } else if k >= config.refine_start() {
        Phase::CfgFreeRefinement
    } else {
        Phase::DynamicCaching
    }
}

/// Number of tokens to cache at step `k` before the consecutive-cache limit
/// is applied. `calibration` is only consulted by the predictive policy in
/// Phase 2.
pub fn budget_for_step(
    k: usize,
    config: &SamplerConfig,
    calibration: Option<&PcscCalibration>,
    total_tokens: usize,
) -> Result<usize, PcscError> {
    if config.policy == CachePolicy::Disabled {
        return Ok(0);
    }
    match phase_of(k, config) {
        Phase::CfgFreeRefinement => {
            let k_refine = k - config.refine_start();
            if config.f_corr > 0 && (k_refine + 1).is_multiple_of(config.f_corr as usize) {
                Ok(0)
            } else {
                Ok((round_half_up(total_tokens as f64 * config.xi) as usize).min(total_tokens))
            }
        }
        phase => match config.policy {
            CachePolicy::Fixed { active_ratio } => {
                if k <= FIXED_POLICY_WARMUP_STEPS {
                    Ok(0)
                } else {
                    let active = (round_half_up(total_tokens as f64 * active_ratio) as usize).min(total_tokens);
                    Ok(total_tokens - active)
                }
            }
            _ if phase == Phase::FullSampling => Ok(0),
            _ => {
                let cal = calibration.ok_or(PcscError::BeforeAnchor { step: k, anchor: config.anchor_step() })?;
                cal.cache_quota(k)
            }
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    Conditional,
    Unconditional,
    /// Guidance is off for this step.
    Unguided,
}

/// One request to the velocity model.
#[derive(Debug, Clone, Copy)]
pub struct OracleQuery<'a> {
    pub state: &'a LatentGrid,
    pub step: usize,
    pub t: f64,
    pub guidance: Guidance,
    /// Ascending active token indices, one list per batch element.
    pub active: &'a [Vec<usize>],
}

impl OracleQuery<'_> {
    /// Number of values the oracle must return.
    pub fn output_len(&self) -> usize {
        self.active.iter().map(Vec::len).sum::<usize>() * self.state.dims().channels
    }
}

/// Source of velocity predictions.
///
/// Returns values for active tokens only, batch-major then in the order of
/// `query.active`, channels innermost.
pub trait VelocityOracle: Sync {
    fn dims(&self) -> Dims;
    fn velocity(&self, query: &OracleQuery<'_>) -> Result<Vec<f32>, OracleError>;
}

impl<T: VelocityOracle + ?Sized> VelocityOracle for &T {
    fn dims(&self) -> Dims {
        (**self).dims()
    }

    fn velocity(&self, query: &OracleQuery<'_>) -> Result<Vec<f32>, OracleError> {
        (**self).velocity(query)
    }
}

/// Guided combination `v_u + s·(v_c − v_u)`.
pub fn combine_guidance(cond: &[f32], uncond: &[f32], scale: f64) -> Vec<f32> {
    let s = scale as f32;
    cond.iter().zip(uncond).map(|(c, u)| u + s * (c - u)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub t_prev: f64,
    pub phase: Phase,
    pub guided: bool,
    /// Requested cache budget summed over the batch.
    pub quota: usize,
    pub cached: usize,
    pub active: usize,
    pub forced_refresh: bool,
    pub flops: u128,
    /// Occupancy change over this step, when tracking is enabled.
    pub delta_s: Option<u64>,
    #[serde(skip)]
    pub partitions: Vec<CachePartition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepRecord>,
    pub total_flops: u128,
    /// Cost of the same schedule with every token evaluated.
    pub full_flops: u128,
    pub flops_reduction: f64,
    /// Token evaluations requested from the oracle (guided steps count once).
    pub oracle_token_evaluations: u64,
    /// Occupancy comparisons made by the caching policy.
    pub policy_measurements: u32,
    pub calibration: Vec<PcscCalibration>,
}

/// Velocity caches carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCaches {
    pub v_cache: VelocityField,
    pub v_prev_cache: VelocityField,
    pub consecutive_cached: u32,
}

impl StepCaches {
    pub fn new(dims: Dims) -> Result<Self, GridError> {
        Ok(StepCaches {
            v_cache: VelocityField::zeros(dims)?,
            v_prev_cache: VelocityField::zeros(dims)?,
            consecutive_cached: 0,
        })
    }
}

/// Inputs to [`step`] that do not change within a step.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub k: usize,
    pub t: f64,
    pub t_prev: f64,
    pub guided: bool,
    pub cfg_scale: f64,
    pub omega: f64,
    pub tau: u32,
    /// Cache budget per batch element.
    pub budgets: &'a [usize],
}

/// Advance `state` by one Euler step, reusing cached velocities where the
/// budget allows. Returns the partition used for each batch element.
pub fn step<O: VelocityOracle + ?Sized>(
    state: &mut LatentGrid,
    inputs: &StepInputs<'_>,
    oracle: &O,
    caches: &mut StepCaches,
) -> Result<Vec<CachePartition>, PipelineError> {
    let dims = state.dims();
    if caches.v_cache.dims() != dims {
        return Err(GridError::DimMismatch { left: dims, right: caches.v_cache.dims() }.into());
    }
    let np = dims.tokens();

    let mut partitions = Vec::with_capacity(dims.batch);
    for b in 0..dims.batch {
        let budget = inputs.budgets[b].min(np);
        let blocked = inputs.tau > 0 && caches.consecutive_cached >= inputs.tau;
        let partition = if budget == 0 || blocked {
            select_partition(&vec![0.0; np], budget, caches.consecutive_cached, inputs.tau)
        } else {
            let scores = stability_scores(&caches.v_cache, &caches.v_prev_cache, b, inputs.omega)?;
            select_partition(&scores, budget, caches.consecutive_cached, inputs.tau)
        };
        partitions.push(partition);
    }
    let active: Vec<Vec<usize>> = partitions.iter().map(|p| p.active.clone()).collect();

    let fresh = evaluate(state, inputs.k, inputs.t, inputs.guided, inputs.cfg_scale, &active, oracle)?;

    let mut v_t = caches.v_cache.clone();
    v_t.step_index = inputs.k;
    let c = dims.channels;
    let data = v_t.values.data_mut();
    let mut row = 0;
    for (b, tokens) in active.iter().enumerate() {
        for &tok in tokens {
            for ch in 0..c {
                data[dims.offset(b, ch, tok)] = fresh[row * c + ch];
            }
            row += 1;
        }
    }

    let dt = (inputs.t - inputs.t_prev) as f32;
    for (s, v) in state.data_mut().iter_mut().zip(v_t.values.data()) {
        *s -= dt * v;
    }
    if !state.is_finite() {
        return Err(PipelineError::NonFinite(inputs.k));
    }

    caches.v_prev_cache = std::mem::replace(&mut caches.v_cache, v_t);
    if partitions.iter().any(|p| !p.cached.is_empty()) {
        caches.consecutive_cached += 1;
    } else {
        caches.consecutive_cached = 0;
    }
    Ok(partitions)
}

fn evaluate<O: VelocityOracle + ?Sized>(
    state: &LatentGrid,
    k: usize,
    t: f64,
    guided: bool,
    cfg_scale: f64,
    active: &[Vec<usize>],
    oracle: &O,
) -> Result<Vec<f32>, PipelineError> {
    let query = |guidance| OracleQuery { state, step: k, t, guidance, active };
    let call = |q: OracleQuery<'_>| -> Result<Vec<f32>, PipelineError> {
        let out = oracle.velocity(&q)?;
        if out.len() != q.output_len() {
            return Err(PipelineError::OracleOutputLength { expected: q.output_len(), found: out.len() });
        }
        Ok(out)
    };
    if guided {
        let cond = call(query(Guidance::Conditional))?;
        let uncond = call(query(Guidance::Unconditional))?;
        Ok(combine_guidance(&cond, &uncond, cfg_scale))
    } else {
        call(query(Guidance::Unguided))
    }
}

/// Configured sampler.
pub struct Sampler<'d> {
    pub config: SamplerConfig,
    /// Transformer dimensions for cost accounting; `tokens` and `batch` are
    /// set per step.
    pub model: BlockDims,
    policy_decoder: Box<dyn OccupancyDecoder + 'd>,
    report_decoder: Option<Box<dyn OccupancyDecoder + 'd>>,
}

impl<'d> Sampler<'d> {
    pub fn new(config: SamplerConfig) -> Self {
        Sampler {
            config,
            model: BlockDims::default(),
            policy_decoder: Box::new(DecoderSpec::new(config.gamma_up)),
            report_decoder: Some(Box::new(DecoderSpec::new(config.gamma_up))),
        }
    }

    pub fn with_model(mut self, model: BlockDims) -> Self {
        self.model = model;
        self
    }

    /// Decoder used for the anchor measurement.
    pub fn with_decoder(mut self, decoder: impl OccupancyDecoder + 'd) -> Self {
        self.policy_decoder = Box::new(decoder);
        self
    }

    /// Decoder used to report per-step occupancy change; `None` turns
    /// reporting off.
    pub fn with_report_decoder(mut self, decoder: Option<Box<dyn OccupancyDecoder + 'd>>) -> Self {
        self.report_decoder = decoder;
        self
    }

    pub fn run<O: VelocityOracle + ?Sized>(
        &self,
        oracle: &O,
        noise: &LatentGrid,
    ) -> Result<(LatentGrid, RunReport), PipelineError> {
        let cfg = &self.config;
        cfg.validate()?;
        let dims = noise.dims();
        if oracle.dims() != dims {
            return Err(GridError::DimMismatch { left: dims, right: oracle.dims() }.into());
        }
        let np = dims.tokens();
        let schedule = TimeSchedule::new(cfg.steps, cfg.eta);
        let anchor = cfg.anchor_step();
        let params = cfg.pcsc_params(np);
        let element_model = BlockDims { batch: 1, ..self.model };

        let mut state = noise.clone();
        let mut caches = StepCaches::new(dims)?;
        let mut calibration: Vec<PcscCalibration> = Vec::new();
        let mut anchor_prev: Vec<OccupancyGrid> = Vec::new();
        let mut policy_measurements = 0u32;
        let mut report_prev = match &self.report_decoder {
            Some(d) => Some(decode_all(d.as_ref(), &state)?),
            None => None,
        };
        let mut records = Vec::with_capacity(cfg.steps);
        let (mut total_flops, mut full_flops, mut evaluations) = (0u128, 0u128, 0u64);

        for k in 1..=cfg.steps {
            let predictive = cfg.policy == CachePolicy::Predictive;
            if predictive && k == anchor {
                anchor_prev = decode_all(self.policy_decoder.as_ref(), &state)?;
            }
            let budgets = (0..dims.batch)
                .map(|b| budget_for_step(k, cfg, calibration.get(b), np))
                .collect::<Result<Vec<_>, _>>()?;
            let inputs = StepInputs {
                k,
                t: schedule.t(k),
                t_prev: schedule.t_prev(k),
                guided: schedule.is_guided(k, cfg.cfg_interval),
                cfg_scale: cfg.cfg_scale,
                omega: cfg.omega,
                tau: cfg.tau,
                budgets: &budgets,
            };
            let partitions = step(&mut state, &inputs, oracle, &mut caches)?;

            if predictive && k == anchor {
                let next = decode_all(self.policy_decoder.as_ref(), &state)?;
                for (prev, next) in anchor_prev.iter().zip(&next) {
                    let delta = dynamic_voxel_count(prev, next)?;
                    policy_measurements += 1;
                    calibration.push(calibrate(delta, &params)?);
                }
            }
            let delta_s = match (&self.report_decoder, report_prev.as_mut()) {
                (Some(d), Some(prev)) => {
                    let next = decode_all(d.as_ref(), &state)?;
                    let mut total = 0;
                    for (p, n) in prev.iter().zip(&next) {
                        total += dynamic_voxel_count(p, n)?;
                    }
                    *prev = next;
                    Some(total)
                }
                _ => None,
            };

            let factor = if inputs.guided { cfg.cfg_flops_factor } else { 1 };
            let active: usize = partitions.iter().map(|p| p.active.len()).sum();
            let flops: u128 = partitions.iter().map(|p| flops_step(&element_model, p.active.len() as u64, factor)).sum();
            total_flops += flops;
            full_flops += dims.batch as u128 * flops_step(&element_model, np as u64, factor);
            evaluations += active as u64;

            let record = StepRecord {
                step: k,
                t: inputs.t,
                t_prev: inputs.t_prev,
                phase: phase_of(k, cfg),
                guided: inputs.guided,
                quota: budgets.iter().sum(),
                cached: dims.batch * np - active,
                active,
                forced_refresh: partitions.iter().any(|p| p.forced_refresh),
                flops,
                delta_s,
                partitions,
            };
            debug!(
                "step {k} t={:.4} phase={} quota={} active={} delta_s={:?}",
                record.t,
                record.phase.number(),
                record.quota,
                record.active,
                record.delta_s
            );
            records.push(record);
        }

        let flops_reduction = if full_flops == 0 { 0.0 } else { 1.0 - total_flops as f64 / full_flops as f64 };
        Ok((
            state,
            RunReport {
                steps: records,
                total_flops,
                full_flops,
                flops_reduction,
                oracle_token_evaluations: evaluations,
                policy_measurements,
                calibration,
            },
        ))
    }
}

fn decode_all(decoder: &dyn OccupancyDecoder, grid: &LatentGrid) -> Result<Vec<OccupancyGrid>, GridError> {
    (0..grid.dims().batch).map(|b| decoder.decode(grid, b)).collect()
}

/// Run with the default decoder and model dimensions.
pub fn run<O: VelocityOracle + ?Sized>(
    config: &SamplerConfig,
    oracle: &O,
    noise: &LatentGrid,
) -> Result<(LatentGrid, RunReport), PipelineError> {
    Sampler::new(*config).run(oracle, noise)
}

/// Consistency checks on a finished run; returns one message per violation.
pub fn check_invariants(report: &RunReport, config: &SamplerConfig, dims: Dims) -> Vec<String> {
    let mut bad = Vec::new();
    let slots = dims.batch * dims.tokens();
    if report.steps.len() != config.steps {
        bad.push(format!("{} step records for {} steps", report.steps.len(), config.steps));
    }
    let mut run = 0u32;
    let mut evaluations = 0u64;
    let mut last_t = f64::INFINITY;
    for r in &report.steps {
        if r.active + r.cached != slots {
            bad.push(format!("step {}: active {} + cached {} != {}", r.step, r.active, r.cached, slots));
        }
        for p in &r.partitions {
            let mut seen = vec![false; dims.tokens()];
            for &i in p.active.iter().chain(&p.cached) {
                if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                    bad.push(format!("step {}: token {} repeated or out of range", r.step, i));
                }
            }
            if seen.iter().any(|s| !s) {
                bad.push(format!("step {}: partition does not cover every token", r.step));
            }
        }
        if r.phase != phase_of(r.step, config) {
            bad.push(format!("step {}: phase {:?} disagrees with schedule", r.step, r.phase));
        }
        if r.t >= last_t || r.t_prev >= r.t {
            bad.push(format!("step {}: times not strictly decreasing", r.step));
        }
        last_t = r.t;
        run = if r.cached > 0 { run + 1 } else { 0 };
        if config.tau > 0 && run > config.tau {
            bad.push(format!("step {}: {} consecutive cached steps exceed tau {}", r.step, run, config.tau));
        }
        if r.phase == Phase::CfgFreeRefinement && config.f_corr > 0 {
            let k_refine = r.step - config.refine_start();
            if (k_refine + 1).is_multiple_of(config.f_corr as usize) && r.cached > 0 {
                bad.push(format!("step {}: correction step cached {} tokens", r.step, r.cached));
            }
        }
        evaluations += r.active as u64;
    }
    if evaluations != report.oracle_token_evaluations {
        bad.push(format!("evaluations {} != recorded {}", evaluations, report.oracle_token_evaluations));
    }
    if report.total_flops != report.steps.iter().map(|r| r.flops).sum::<u128>() {
        bad.push("total FLOPs differ from the per-step sum".into());
    }
    if report.total_flops > report.full_flops || !(0.0..=1.0).contains(&report.flops_reduction) {
        bad.push(format!("FLOPs reduction {} outside [0, 1]", report.flops_reduction));
    }
    bad
}

/// One row of the predicted budget curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub t: f64,
    pub phase: Phase,
    pub guided: bool,
    /// `σ·exp(μ·(k − anchor))` from the anchor onward.
    pub predicted_dynamic_voxels: Option<f64>,
    /// Predictive quota implied by the curve; 0 before the anchor.
    pub pcsc_quota: usize,
    /// Budget the sampler would request at this step.
    pub budget: usize,
}

/// Budget curve for a given anchor measurement, without running a sampler.
pub fn pcsc_curve(config: &SamplerConfig, sigma: u64, total_tokens: usize) -> Result<Vec<CurveRow>, ConfigError> {
    config.validate()?;
    let cal = calibrate(sigma, &config.pcsc_params(total_tokens))?;
    let schedule = TimeSchedule::new(config.steps, config.eta);
    (1..=config.steps)
        .map(|k| {
            let predicted = (k >= cal.anchor_step).then(|| cal.predict_dynamic_voxels(k)).transpose()?;
            let pcsc_quota = if k >= cal.anchor_step { cal.cache_quota(k)? } else { 0 };
            Ok(CurveRow {
                step: k,
                t: schedule.t(k),
                phase: phase_of(k, config),
                guided: schedule.is_guided(k, config.cfg_interval),
                predicted_dynamic_voxels: predicted,
                pcsc_quota,
                budget: budget_for_step(k, config, Some(&cal), total_tokens)?,
            })
        })
        .collect()
}
