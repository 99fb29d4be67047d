//! Synthetic velocity oracles, a plain reference sampler, trace files, and
//! quality metrics.
//!
//! The synthetic field moves each token along the straight path from noise
//! `y1` to a procedural target `y0`. Channel 0 of the target encodes a shape
//! (positive inside). Tokens whose noise sign disagrees with the target flip
//! occupancy exactly once; their flip steps are placed so that flips are
//! frequent and uniform through the full-sampling steps, then thin out
//! log-linearly until guidance switches off. A decaying perturbation `ε(t)·g`
//! near the shape boundary adds early volatility that vanishes by the
//! caching phase.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Dims, GridError, LatentGrid, OccupancyDecoder, OccupancyGrid};
use crate::pipeline::{
    shift_time, CachePolicy, Guidance, OracleError, OracleQuery, PipelineError, RunReport,
    Sampler, SamplerConfig, VelocityOracle,
};
use crate::pcsc::ceil_steps;
use crate::flops::BlockDims;

/// Target shape in normalized coordinates `[-1, 1]³`, ordered `(x, y, z)`
/// with `x` along width and `z` along depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extent: [f64; 3] },
    Union { parts: Vec<ShapeSpec> },
    /// Union of `primitives` spheres and boxes drawn from the field seed.
    Random { primitives: usize },
}

impl Default for ShapeSpec {
    fn default() -> Self {
        ShapeSpec::Union {
            parts: vec![
                ShapeSpec::Sphere { center: [0.0, 0.0, -0.1], radius: 0.55 },
                ShapeSpec::Box { center: [0.3, -0.2, 0.4], half_extent: [0.3, 0.45, 0.25] },
            ],
        }
    }
}

impl ShapeSpec {
    /// Replace `Random` with concrete primitives.
    pub fn resolve(&self, rng: &mut ChaCha8Rng) -> ShapeSpec {
        match self {
            ShapeSpec::Random { primitives } => {
                let pos = Uniform::new(-0.5, 0.5).expect("valid range");
                let size = Uniform::new(0.2, 0.5).expect("valid range");
                let parts = (0..(*primitives).max(1))
                    .map(|i| {
                        let center = [pos.sample(rng), pos.sample(rng), pos.sample(rng)];
                        if i % 2 == 0 {
                            ShapeSpec::Sphere { center, radius: size.sample(rng) }
                        } else {
                            ShapeSpec::Box { center, half_extent: [size.sample(rng), size.sample(rng), size.sample(rng)] }
                        }
                    })
                    .collect();
                ShapeSpec::Union { parts }
            }
            ShapeSpec::Union { parts } => ShapeSpec::Union { parts: parts.iter().map(|p| p.resolve(rng)).collect() },
            other => other.clone(),
        }
    }

    /// Signed distance, negative inside.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match self {
            ShapeSpec::Sphere { center, radius } => {
                let d: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d.sqrt() - radius
            }
            ShapeSpec::Box { center, half_extent } => {
                (0..3).map(|i| (p[i] - center[i]).abs() - half_extent[i]).fold(f64::NEG_INFINITY, f64::max)
            }
            ShapeSpec::Union { parts } => parts.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min),
            ShapeSpec::Random { .. } => panic!("resolve random shapes before evaluating them"),
        }
    }
}

/// Sampler clock the flip steps are laid out against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldClock {
    pub steps: usize,
    pub eta: f64,
    /// Flips are uniform per step before this step index.
    pub settle_start: usize,
    /// No scheduled flips after this many steps.
    pub settle_end: usize,
}

impl FieldClock {
    pub fn for_config(config: &SamplerConfig) -> Self {
        let settle_start = ceil_steps(config.steps, config.rho_a);
        let settle_end = ceil_steps(config.steps, config.rho_cfg_off).saturating_sub(1).max(settle_start);
        FieldClock { steps: config.steps, eta: config.eta, settle_start, settle_end }
    }

    /// Continuous time at fractional step position `u` (0 at the first step).
    pub fn time_at(&self, u: f64) -> f64 {
        shift_time(1.0 - u / self.steps as f64, self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFieldSpec {
    pub seed: u64,
    pub shape: ShapeSpec,
    pub clock: FieldClock,
    /// Per-step decay rate of the flip density after `settle_start`.
    pub settle_decay: f64,
    /// `ε(t) = A·e^{−κx}(1 − κx) + A₂·e^{−κ₂x}` with `x = 1 − t`.
    pub transient_amplitude: f64,
    pub transient_rate: f64,
    pub tail_amplitude: f64,
    pub tail_rate: f64,
    /// Multiplier on `ε` once guidance is off.
    pub unguided_factor: f64,
    /// Width of the boundary band where the perturbation acts.
    pub band_width: f64,
    /// Perturbation scale on the occupancy channel relative to the others.
    pub occupancy_coupling: f64,
    /// Scale of the conditional/unconditional split.
    pub cfg_offset: f64,
    /// Guidance scale the split is built for; the guided combination then
    /// equals the unperturbed velocity.
    pub cfg_scale: f64,
}

impl SyntheticFieldSpec {
    pub fn for_config(config: &SamplerConfig, seed: u64) -> Self {
        SyntheticFieldSpec {
            seed,
            shape: ShapeSpec::default(),
            clock: FieldClock::for_config(config),
            settle_decay: 0.15,
            transient_amplitude: 100.0,
            transient_rate: 100.0,
            tail_amplitude: 1.0,
            tail_rate: 4.0,
            unguided_factor: 0.1,
            band_width: 0.3,
            occupancy_coupling: 0.5,
            cfg_offset: 0.05,
            cfg_scale: config.cfg_scale,
        }
    }

    /// Perturbation amplitude at time `t`.
    pub fn epsilon(&self, t: f64, guided: bool) -> f64 {
        let x = 1.0 - t;
        let kx = self.transient_rate * x;
        let e = self.transient_amplitude * (-kx).exp() * (1.0 - kx) + self.tail_amplitude * (-self.tail_rate * x).exp();
        if guided {
            e
        } else {
            e * self.unguided_factor
        }
    }
}

/// Standard normal noise for `dims`; the same draws a [`SyntheticField`]
/// with this seed starts from.
pub fn gaussian_noise(dims: Dims, seed: u64) -> Result<LatentGrid, GridError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    LatentGrid::from_vec(dims, data)
}

/// Deterministic velocity oracle built from a [`SyntheticFieldSpec`].
#[derive(Debug, Clone)]
pub struct SyntheticField {
    spec: SyntheticFieldSpec,
    dims: Dims,
    noise: Vec<f64>,
    base: Vec<f64>,
    bump: Vec<f64>,
    split: Vec<f64>,
}

/// Flip position (in steps) of the `q`-th quantile of flipping tokens.
fn flip_position(q: f64, clock: &FieldClock, decay: f64) -> f64 {
    let plateau = clock.settle_start as f64;
    let span = (clock.settle_end.max(clock.settle_start) - clock.settle_start) as f64;
    let tail = if decay > 0.0 { (1.0 - (-decay * span).exp()) / decay } else { span };
    let total = plateau + tail;
    let m = q * total;
    if m < plateau {
        m
    } else if decay > 0.0 {
        let r = ((m - plateau) * decay).min(tail * decay * (1.0 - 1e-9));
        plateau - (1.0 - r).ln() / decay
    } else {
        m
    }
}

impl SyntheticField {
    pub fn new(spec: SyntheticFieldSpec, dims: Dims) -> Result<Self, GridError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let len = dims.len();
        let draw = |rng: &mut ChaCha8Rng, scale: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..len)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale(i)
                })
                .collect()
        };
        let noise = draw(&mut rng, &|_| 1.0);
        let shape = spec.shape.resolve(&mut rng);

        let np = dims.tokens();
        let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        let sdf: Vec<f64> = (0..np)
            .map(|tok| {
                let (d, h, w) = dims.token_coords(tok);
                shape.sdf([coord(w, dims.width), coord(h, dims.height), coord(d, dims.depth)])
            })
            .collect();
        let band: Vec<f64> = sdf.iter().map(|s| (-(s / spec.band_width).powi(2)).exp()).collect();
        let coupling = |i: usize| if (i / np).is_multiple_of(dims.channels) { spec.occupancy_coupling } else { 1.0 };
        let bump = draw(&mut rng, &|i| band[i % np] * coupling(i));
        let split = draw(&mut rng, &|_| 1.0);

        let mut target = vec![0.0; len];
        for b in 0..dims.batch {
            for c in 1..dims.channels {
                for tok in 0..np {
                    let (d, h, w) = dims.token_coords(tok);
                    let (x, y, z) = (coord(w, dims.width), coord(h, dims.height), coord(d, dims.depth));
                    let cf = c as f64;
                    target[dims.offset(b, c, tok)] = (2.0 * cf * x + cf * y + z).sin();
                }
            }
            let y1 = |tok: usize| noise[dims.offset(b, 0, tok)];
            let sign = |tok: usize| if sdf[tok] < 0.0 { 1.0 } else { -1.0 };
            let mut flipping: Vec<usize> = (0..np).filter(|&tok| (y1(tok) > 0.0) != (sign(tok) > 0.0)).collect();
            flipping.sort_by(|&i, &j| y1(i).abs().total_cmp(&y1(j).abs()).then(i.cmp(&j)));
            let n = flipping.len();
            for (rank, &tok) in flipping.iter().enumerate() {
                let q = (rank as f64 + 0.5) / n as f64;
                let t_star = spec.clock.time_at(flip_position(q, &spec.clock, spec.settle_decay));
                target[dims.offset(b, 0, tok)] = sign(tok) * y1(tok).abs() * t_star / (1.0 - t_star);
            }
            for tok in 0..np {
                if (y1(tok) > 0.0) == (sign(tok) > 0.0) {
                    target[dims.offset(b, 0, tok)] = sign(tok) * (0.5 + 1.5 * (3.0 * sdf[tok].abs()).tanh());
                }
            }
        }
        let base = noise.iter().zip(&target).map(|(n, t)| n - t).collect();
        Ok(SyntheticField { spec, dims, noise, base, bump, split })
    }

    pub fn spec(&self) -> &SyntheticFieldSpec {
        &self.spec
    }

    /// Starting state `y1`.
    pub fn initial_noise(&self) -> LatentGrid {
        LatentGrid::from_vec(self.dims, self.noise.iter().map(|v| *v as f32).collect()).expect("dims validated")
    }

    /// Target `y0` the unperturbed flow ends at.
    pub fn target(&self) -> LatentGrid {
        let data = self.noise.iter().zip(&self.base).map(|(n, b)| (n - b) as f32).collect();
        LatentGrid::from_vec(self.dims, data).expect("dims validated")
    }

    /// Spatial pattern `g` scaled by `ε(t)`.
    pub fn perturbation(&self) -> &[f64] {
        &self.bump
    }

    /// Unperturbed velocity `y1 − y0`.
    pub fn base_velocity(&self) -> &[f64] {
        &self.base
    }

    fn value(&self, offset: usize, t: f64, guidance: Guidance) -> f32 {
        let guided = guidance != Guidance::Unguided;
        let mut v = self.base[offset] + self.spec.epsilon(t, guided) * self.bump[offset];
        let du = self.spec.cfg_offset * self.split[offset];
        match guidance {
            Guidance::Unconditional => v -= du,
            Guidance::Conditional => v += du / self.spec.cfg_scale - du,
            Guidance::Unguided => {}
        }
        v as f32
    }
}

impl VelocityOracle for SyntheticField {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn velocity(&self, query: &OracleQuery<'_>) -> Result<Vec<f32>, OracleError> {
        let dims = self.dims;
        let mut out = Vec::with_capacity(query.output_len());
        for (b, tokens) in query.active.iter().enumerate() {
            for &tok in tokens {
                for c in 0..dims.channels {
                    out.push(self.value(dims.offset(b, c, tok), query.t, query.guidance));
                }
            }
        }
        Ok(out)
    }
}

/// Plain Euler sampler evaluating every token at every step.
///
/// Deliberately shares no step code with [`crate::pipeline`]; only the
/// arithmetic order matches.
pub fn run_full_oracle<O: VelocityOracle + ?Sized>(
    config: &SamplerConfig,
    oracle: &O,
    noise: &LatentGrid,
) -> Result<LatentGrid, PipelineError> {
    let dims = noise.dims();
    let (n, c, np) = (config.steps, dims.channels, dims.tokens());
    let all: Vec<Vec<usize>> = vec![(0..np).collect(); dims.batch];
    let time = |k: usize| -> f64 {
        if k > n {
            0.0
        } else {
            let u = 1.0 - (k - 1) as f64 / n as f64;
            config.eta * u / (1.0 + (config.eta - 1.0) * u)
        }
    };
    let mut s = noise.clone();
    for k in 1..=n {
        let (t, t_next) = (time(k), time(k + 1));
        let guided = t_next >= config.cfg_interval.0 && t <= config.cfg_interval.1;
        let ask = |g: Guidance, state: &LatentGrid| {
            oracle.velocity(&OracleQuery { state, step: k, t, guidance: g, active: &all })
        };
        let tokens = if guided {
            let vc = ask(Guidance::Conditional, &s)?;
            let vu = ask(Guidance::Unconditional, &s)?;
            let scale = config.cfg_scale as f32;
            vc.iter().zip(&vu).map(|(a, b)| b + scale * (a - b)).collect::<Vec<f32>>()
        } else {
            ask(Guidance::Unguided, &s)?
        };
        let dt = (t - t_next) as f32;
        let data = s.data_mut();
        for b in 0..dims.batch {
            for tok in 0..np {
                for ch in 0..c {
                    let i = (b * c + ch) * np + tok;
                    data[i] -= dt * tokens[(b * np + tok) * c + ch];
                }
            }
        }
    }
    Ok(s)
}

pub const TRACE_MAGIC: [u8; 4] = *b"F3DC";
pub const TRACE_VERSION: u16 = 1;
/// Magic, version, six `u32` dims, one flag byte.
pub const TRACE_HEADER_LEN: usize = 4 + 2 + 6 * 4 + 1;
const FLAG_CFG_PAIRS: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("trace truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trace has {extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("trace body has {found} values, expected {expected}")]
    BodyLength { expected: usize, found: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl TraceError {
    pub fn class(&self) -> &'static str {
        match self {
            TraceError::Io(_) => "Io",
            TraceError::BadMagic(_) => "BadMagic",
            TraceError::VersionMismatch { .. } => "VersionMismatch",
            TraceError::Truncated { .. } => "Truncated",
            TraceError::TrailingBytes { .. } => "TrailingBytes",
            TraceError::ChecksumMismatch { .. } => "ChecksumMismatch",
            TraceError::BodyLength { .. } => "BodyLength",
            TraceError::Grid(e) => e.class(),
        }
    }
}

impl From<std::io::Error> for TraceError {
    fn from(e: std::io::Error) -> Self {
        TraceError::Io(e.to_string())
    }
}

/// Recorded velocities of a full sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub steps: usize,
    pub dims: Dims,
    pub has_cfg_pairs: bool,
    /// Step-major tensors in grid layout; two per step when paired
    /// (conditional, then unconditional).
    pub body: Vec<f32>,
}

/// First 8 bytes of SHA-256, little-endian.
pub fn trace_checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl TraceFile {
    pub fn tensors_per_step(&self) -> usize {
        if self.has_cfg_pairs {
            2
        } else {
            1
        }
    }

    pub fn expected_body_len(steps: usize, dims: Dims, has_cfg_pairs: bool) -> usize {
        steps * if has_cfg_pairs { 2 } else { 1 } * dims.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, TraceError> {
        let expected = Self::expected_body_len(self.steps, self.dims, self.has_cfg_pairs);
        if self.body.len() != expected {
            return Err(TraceError::BodyLength { expected, found: self.body.len() });
        }
        let mut out = Vec::with_capacity(TRACE_HEADER_LEN + expected * 4 + 8);
        out.extend_from_slice(&TRACE_MAGIC);
        out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        let d = self.dims;
        for v in [self.steps, d.batch, d.channels, d.depth, d.height, d.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(if self.has_cfg_pairs { FLAG_CFG_PAIRS } else { 0 });
        for v in &self.body {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = trace_checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TraceError> {
        if bytes.len() < TRACE_HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != TRACE_MAGIC {
                return Err(TraceError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
            }
            return Err(TraceError::Truncated { expected: TRACE_HEADER_LEN + 8, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != TRACE_MAGIC {
            return Err(TraceError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TRACE_VERSION {
            return Err(TraceError::VersionMismatch { found: version, expected: TRACE_VERSION });
        }
        let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
        let steps = field(0);
        let dims = Dims::new(field(1), field(2), field(3), field(4), field(5));
        dims.validate()?;
        let has_cfg_pairs = bytes[TRACE_HEADER_LEN - 1] & FLAG_CFG_PAIRS != 0;
        let values = Self::expected_body_len(steps, dims, has_cfg_pairs);
        let expected = TRACE_HEADER_LEN + values * 4 + 8;
        if bytes.len() < expected {
            return Err(TraceError::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(TraceError::TrailingBytes { extra: bytes.len() - expected });
        }
        let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().expect("8 bytes"));
        let computed = trace_checksum(&bytes[..expected - 8]);
        if stored != computed {
            return Err(TraceError::ChecksumMismatch { stored, computed });
        }
        let body = bytes[TRACE_HEADER_LEN..expected - 8]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(TraceFile { steps, dims, has_cfg_pairs, body })
    }

    /// Write atomically: the target either keeps its old contents or holds
    /// the complete new file.
    pub fn write(&self, path: &Path) -> Result<(), TraceError> {
        write_atomic(path, &self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TraceError> {
        Self::decode(&fs::read(path)?)
    }

    fn tensor(&self, step: usize, slot: usize) -> &[f32] {
        let len = self.dims.len();
        let start = ((step - 1) * self.tensors_per_step() + slot) * len;
        &self.body[start..start + len]
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Oracle wrapper that keeps every full-grid answer.
struct Recorder<'a, O: ?Sized> {
    inner: &'a O,
    seen: Mutex<BTreeMap<(usize, u8), Vec<f32>>>,
}

fn guidance_slot(g: Guidance) -> u8 {
    match g {
        Guidance::Conditional => 0,
        Guidance::Unconditional => 1,
        Guidance::Unguided => 2,
    }
}

impl<O: VelocityOracle + ?Sized> VelocityOracle for Recorder<'_, O> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    fn velocity(&self, query: &OracleQuery<'_>) -> Result<Vec<f32>, OracleError> {
        let out = self.inner.velocity(query)?;
        let dims = self.inner.dims();
        let np = dims.tokens();
        let mut grid = vec![0.0f32; dims.len()];
        for (b, tokens) in query.active.iter().enumerate() {
            if tokens.len() != np {
                return Err(OracleError { class: "PartialRecording", message: "recording needs full steps".into() });
            }
            for tok in 0..np {
                for c in 0..dims.channels {
                    grid[dims.offset(b, c, tok)] = out[(b * np + tok) * dims.channels + c];
                }
            }
        }
        self.seen.lock().expect("recorder lock").insert((query.step, guidance_slot(query.guidance)), grid);
        Ok(out)
    }
}

/// Run full sampling against `oracle`, capturing every velocity tensor.
/// Returns the trace and the final state of that run.
pub fn record_trace<O: VelocityOracle + ?Sized>(
    config: &SamplerConfig,
    oracle: &O,
    noise: &LatentGrid,
) -> Result<(TraceFile, LatentGrid), PipelineError> {
    let recorder = Recorder { inner: oracle, seen: Mutex::new(BTreeMap::new()) };
    let final_state = run_full_oracle(config, &recorder, noise)?;
    let seen = recorder.seen.into_inner().expect("recorder lock");
    let has_cfg_pairs = seen.keys().any(|(_, slot)| *slot == 0);
    let mut body = Vec::with_capacity(TraceFile::expected_body_len(config.steps, noise.dims(), has_cfg_pairs));
    for k in 1..=config.steps {
        match (seen.get(&(k, 0)), seen.get(&(k, 1)), seen.get(&(k, 2))) {
            (Some(c), Some(u), _) => {
                body.extend_from_slice(c);
                body.extend_from_slice(u);
            }
            (_, _, Some(v)) => {
                body.extend_from_slice(v);
                if has_cfg_pairs {
                    body.extend_from_slice(v);
                }
            }
            _ => {
                return Err(OracleError { class: "MissingStep", message: format!("no velocity recorded for step {k}") }
                    .into())
            }
        }
    }
    Ok((TraceFile { steps: config.steps, dims: noise.dims(), has_cfg_pairs, body }, final_state))
}

/// Serves recorded velocities for any active subset.
#[derive(Debug, Clone)]
pub struct TraceOracle {
    trace: TraceFile,
}

impl TraceOracle {
    pub fn new(trace: TraceFile) -> Self {
        TraceOracle { trace }
    }

    pub fn open(path: &Path) -> Result<Self, TraceError> {
        Ok(TraceOracle::new(TraceFile::read(path)?))
    }

    pub fn trace(&self) -> &TraceFile {
        &self.trace
    }
}

impl VelocityOracle for TraceOracle {
    fn dims(&self) -> Dims {
        self.trace.dims
    }

    fn velocity(&self, query: &OracleQuery<'_>) -> Result<Vec<f32>, OracleError> {
        if query.step == 0 || query.step > self.trace.steps {
            return Err(OracleError {
                class: "StepOutOfRange",
                message: format!("step {} outside recorded 1..={}", query.step, self.trace.steps),
            });
        }
        let slot = if self.trace.has_cfg_pairs && query.guidance == Guidance::Unconditional { 1 } else { 0 };
        let tensor = self.trace.tensor(query.step, slot);
        let dims = self.trace.dims;
        let mut out = Vec::with_capacity(query.output_len());
        for (b, tokens) in query.active.iter().enumerate() {
            for &tok in tokens {
                for c in 0..dims.channels {
                    out.push(tensor[dims.offset(b, c, tok)]);
                }
            }
        }
        Ok(out)
    }
}

/// `‖a − b‖₂ / ‖b‖₂`, accumulated in `f64`.
pub fn relative_l2(a: &LatentGrid, b: &LatentGrid) -> Result<f64, GridError> {
    if a.dims() != b.dims() {
        return Err(GridError::DimMismatch { left: a.dims(), right: b.dims() });
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x as f64, *y as f64);
        num += (x - y) * (x - y);
        den += y * y;
    }
    Ok(if num == 0.0 { 0.0 } else { (num / den).sqrt() })
}

/// Intersection over union summed across the batch; two empty grids give 1.
pub fn occupancy_iou(a: &[OccupancyGrid], b: &[OccupancyGrid]) -> Result<f64, GridError> {
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a.iter().zip(b) {
        if x.resolution() != y.resolution() {
            return Err(GridError::ResolutionMismatch { left: x.resolution(), right: y.resolution() });
        }
        for (p, q) in x.bits().iter().zip(y.bits()) {
            inter += (*p && *q) as u64;
            union += (*p || *q) as u64;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub relative_l2: f64,
    pub iou: f64,
}

pub fn compare(result: &LatentGrid, reference: &LatentGrid, decoder: &dyn OccupancyDecoder) -> Result<Quality, GridError> {
    let decode = |g: &LatentGrid| (0..g.dims().batch).map(|b| decoder.decode(g, b)).collect::<Result<Vec<_>, _>>();
    Ok(Quality { relative_l2: relative_l2(result, reference)?, iou: occupancy_iou(&decode(result)?, &decode(reference)?)? })
}

/// Least-squares line through `(x, ln y)` for positive `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn log_linear_fit(points: &[(f64, f64)]) -> Option<LogLinearFit> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, y)| *y > 0.0).map(|(x, y)| (*x, y.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LogLinearFit { slope, intercept: my - slope * mx, r_squared, points: pts.len() })
}

/// Fit of per-step occupancy change over the caching phase of a report.
pub fn caching_phase_fit(report: &RunReport, config: &SamplerConfig) -> Option<LogLinearFit> {
    let (start, end) = (config.anchor_step() + 1, config.refine_start());
    let pts: Vec<(f64, f64)> = report
        .steps
        .iter()
        .filter(|r| r.step >= start && r.step < end)
        .filter_map(|r| r.delta_s.map(|d| (r.step as f64, d as f64)))
        .collect();
    log_linear_fit(&pts)
}

/// Reference and accelerated runs of one synthetic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub full: RunReport,
    pub cached: RunReport,
    pub quality: Quality,
    /// Reduction of the accelerated run relative to the full run.
    pub flops_reduction: f64,
}

/// Run `config`'s policy and a full run on `oracle` and compare final states.
pub fn compare_runs<O: VelocityOracle + ?Sized>(
    config: &SamplerConfig,
    model: BlockDims,
    oracle: &O,
    noise: &LatentGrid,
) -> Result<Comparison, PipelineError> {
    let full_cfg = SamplerConfig { policy: CachePolicy::Disabled, ..*config };
    let (full_state, full) = Sampler::new(full_cfg).with_model(model).run(oracle, noise)?;
    let (state, cached) = Sampler::new(*config).with_model(model).run(oracle, noise)?;
    let decoder = crate::grid::DecoderSpec::new(config.gamma_up);
    let quality = compare(&state, &full_state, &decoder)?;
    let flops_reduction = 1.0 - cached.total_flops as f64 / full.total_flops as f64;
    Ok(Comparison { full, cached, quality, flops_reduction })
}
