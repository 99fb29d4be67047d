//! Dense latent grids, their token view, and binary occupancy decoding.
//!
//! Layout is row-major `B×C×D×H×W` with width innermost. Spatial tokens are
//! linearized depth-major: token `i = d·H·W + h·W + w`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must all be at least 1, got {0:?}")]
    ZeroDim(Dims),
    #[error("data length {found} does not match dims {dims:?} (expected {expected})")]
    LengthMismatch { dims: Dims, expected: usize, found: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: Dims, right: Dims },
    #[error("channel {channel} out of range for {channels} channels")]
    InvalidChannel { channel: usize, channels: usize },
    #[error("batch index {batch} out of range for batch size {batch_size}")]
    InvalidBatch { batch: usize, batch_size: usize },
    #[error("gamma_up {0} has no positive integer cube root")]
    NonCubicUpsample(f64),
    #[error("occupancy resolution mismatch: {left:?} vs {right:?}")]
    ResolutionMismatch { left: [usize; 3], right: [usize; 3] },
}

impl GridError {
    pub fn class(&self) -> &'static str {
        match self {
            GridError::ZeroDim(_) => "ZeroDim",
            GridError::LengthMismatch { .. } => "LengthMismatch",
            GridError::DimMismatch { .. } => "DimMismatch",
            GridError::InvalidChannel { .. } => "InvalidChannel",
            GridError::InvalidBatch { .. } => "InvalidBatch",
            GridError::NonCubicUpsample(_) => "NonCubicUpsample",
            GridError::ResolutionMismatch { .. } => "ResolutionMismatch",
        }
    }
}

/// Shape of a latent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(batch: usize, channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Dims { batch, channels, depth, height, width }
    }

    /// Single-sample cube `1×C×n×n×n`.
    pub fn cube(channels: usize, n: usize) -> Self {
        Dims::new(1, channels, n, n, n)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if [self.batch, self.channels, self.depth, self.height, self.width].contains(&0) {
            return Err(GridError::ZeroDim(*self));
        }
        Ok(())
    }

    /// Spatial token count `D·H·W`.
    pub fn tokens(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.height + h) * self.width + w
    }

    /// Inverse of [`Dims::token_index`].
    pub fn token_coords(&self, token: usize) -> (usize, usize, usize) {
        let w = token % self.width;
        let h = (token / self.width) % self.height;
        let d = token / (self.width * self.height);
        (d, h, w)
    }

    /// Flat offset of `(batch, channel, token)` in grid layout.
    pub fn offset(&self, batch: usize, channel: usize, token: usize) -> usize {
        (batch * self.channels + channel) * self.tokens() + token
    }
}

/// Dense real-valued state `S_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    dims: Dims,
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn zeros(dims: Dims) -> Result<Self, GridError> {
        dims.validate()?;
        Ok(LatentGrid { dims, data: vec![0.0; dims.len()] })
    }

    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self, GridError> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(GridError::LengthMismatch { dims, expected: dims.len(), found: data.len() });
        }
        Ok(LatentGrid { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, batch: usize, channel: usize, token: usize) -> f32 {
        self.data[self.dims.offset(batch, channel, token)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel vector of one token.
    pub fn token(&self, batch: usize, token: usize) -> Vec<f32> {
        (0..self.dims.channels).map(|c| self.get(batch, c, token)).collect()
    }
}

/// Velocity prediction `v_t` for one sampler step, laid out like [`LatentGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub values: LatentGrid,
    /// Step that produced the freshest values in this field; 0 for the initial empty cache.
    pub step_index: usize,
}

impl VelocityField {
    pub fn zeros(dims: Dims) -> Result<Self, GridError> {
        Ok(VelocityField { values: LatentGrid::zeros(dims)?, step_index: 0 })
    }

    pub fn dims(&self) -> Dims {
        self.values.dims()
    }
}

/// Tokens of a grid as `B × N_p × C`, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenView {
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl TokenView {
    pub fn token_count(&self) -> usize {
        self.dims.tokens()
    }

    pub fn token(&self, batch: usize, token: usize) -> &[f32] {
        let c = self.dims.channels;
        let start = (batch * self.dims.tokens() + token) * c;
        &self.data[start..start + c]
    }
}

pub fn flatten_tokens(grid: &LatentGrid) -> TokenView {
    let dims = grid.dims;
    let (n, c) = (dims.tokens(), dims.channels);
    let mut data = vec![0.0; dims.len()];
    for b in 0..dims.batch {
        for ch in 0..c {
            let src = &grid.data[dims.offset(b, ch, 0)..dims.offset(b, ch, 0) + n];
            for (i, v) in src.iter().enumerate() {
                data[(b * n + i) * c + ch] = *v;
            }
        }
    }
    TokenView { dims, data }
}

pub fn unflatten_tokens(view: &TokenView) -> Result<LatentGrid, GridError> {
    let dims = view.dims;
    let mut grid = LatentGrid::zeros(dims)?;
    if view.data.len() != dims.len() {
        return Err(GridError::LengthMismatch { dims, expected: dims.len(), found: view.data.len() });
    }
    let (n, c) = (dims.tokens(), dims.channels);
    for b in 0..dims.batch {
        for i in 0..n {
            for ch in 0..c {
                grid.data[dims.offset(b, ch, i)] = view.data[(b * n + i) * c + ch];
            }
        }
    }
    Ok(grid)
}

/// Binary occupancy of one batch element at decoded resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    resolution: [usize; 3],
    bits: Vec<bool>,
}

impl OccupancyGrid {
    pub fn from_bits(resolution: [usize; 3], bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), resolution.iter().product::<usize>(), "bit count must match resolution");
        OccupancyGrid { resolution, bits }
    }

    /// Resolution per axis (depth, height, width).
    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        let [_, h, w] = self.resolution;
        self.bits[(i * h + j) * w + k]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Per-axis upsample factor for a volumetric ratio, i.e. its integer cube root.
pub fn upsample_factor(gamma_up: f64) -> Result<usize, GridError> {
    if !(gamma_up.is_finite() && gamma_up >= 1.0) {
        return Err(GridError::NonCubicUpsample(gamma_up));
    }
    let f = gamma_up.cbrt().round() as usize;
    if f >= 1 && (f * f * f) as f64 == gamma_up {
        Ok(f)
    } else {
        Err(GridError::NonCubicUpsample(gamma_up))
    }
}

/// Turns one batch element of a latent grid into an occupancy grid.
pub trait OccupancyDecoder: Send + Sync {
    fn decode(&self, grid: &LatentGrid, batch: usize) -> Result<OccupancyGrid, GridError>;
}

/// Surrogate decoder: threshold one channel and replicate each cell into a
/// `f×f×f` block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub channel: usize,
    pub gamma_up: f64,
    pub threshold: f32,
}

impl DecoderSpec {
    pub fn new(gamma_up: f64) -> Self {
        DecoderSpec { channel: 0, gamma_up, threshold: 0.0 }
    }
}

impl OccupancyDecoder for DecoderSpec {
    fn decode(&self, grid: &LatentGrid, batch: usize) -> Result<OccupancyGrid, GridError> {
        decode_occupancy(grid, batch, self)
    }
}

pub fn decode_occupancy(grid: &LatentGrid, batch: usize, spec: &DecoderSpec) -> Result<OccupancyGrid, GridError> {
    let dims = grid.dims();
    if spec.channel >= dims.channels {
        return Err(GridError::InvalidChannel { channel: spec.channel, channels: dims.channels });
    }
    if batch >= dims.batch {
        return Err(GridError::InvalidBatch { batch, batch_size: dims.batch });
    }
    let f = upsample_factor(spec.gamma_up)?;
    let res = [dims.depth * f, dims.height * f, dims.width * f];
    let base = dims.offset(batch, spec.channel, 0);
    let mut bits = Vec::with_capacity(res.iter().product());
    for i in 0..res[0] {
        for j in 0..res[1] {
            for k in 0..res[2] {
                let v = grid.data[base + dims.token_index(i / f, j / f, k / f)];
                bits.push(v > spec.threshold);
            }
        }
    }
    Ok(OccupancyGrid { resolution: res, bits })
}

/// Number of cells that differ between two occupancies (`Δs`).
pub fn dynamic_voxel_count(prev: &OccupancyGrid, next: &OccupancyGrid) -> Result<u64, GridError> {
    if prev.resolution != next.resolution {
        return Err(GridError::ResolutionMismatch { left: prev.resolution, right: next.resolution });
    }
    Ok(prev.bits.iter().zip(&next.bits).filter(|(a, b)| a != b).count() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_index_depth_major() {
        let dims = Dims::cube(1, 2);
        assert_eq!(dims.token_index(1, 0, 1), 5);
        assert_eq!(dims.token_coords(5), (1, 0, 1));
    }

    #[test]
    fn single_cell_identity() {
        let g = LatentGrid::from_vec(Dims::cube(1, 1), vec![2.5]).unwrap();
        let v = flatten_tokens(&g);
        assert_eq!(v.data, vec![2.5]);
    }

    #[test]
    fn upsample_factor_requires_cube() {
        assert_eq!(upsample_factor(8.0).unwrap(), 2);
        assert_eq!(upsample_factor(64.0).unwrap(), 4);
        assert_eq!(upsample_factor(1.0).unwrap(), 1);
        assert!(upsample_factor(10.0).is_err());
        assert!(upsample_factor(0.0).is_err());
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(LatentGrid::zeros(Dims::new(1, 0, 2, 2, 2)).is_err());
    }
}
