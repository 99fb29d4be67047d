#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use fast3dcache::grid::{DecoderSpec, Dims, GridError, LatentGrid, OccupancyDecoder, OccupancyGrid};
use fast3dcache::pipeline::{OracleError, OracleQuery, VelocityOracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Time-independent velocity, identical for every guidance mode.
pub struct ConstantOracle {
    pub dims: Dims,
    pub values: Vec<f32>,
}

impl ConstantOracle {
    pub fn random(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConstantOracle { dims, values: (0..dims.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect() }
    }

    pub fn zero(dims: Dims) -> Self {
        ConstantOracle { dims, values: vec![0.0; dims.len()] }
    }
}

impl VelocityOracle for ConstantOracle {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn velocity(&self, q: &OracleQuery<'_>) -> Result<Vec<f32>, OracleError> {
        let mut out = Vec::with_capacity(q.output_len());
        for (b, toks) in q.active.iter().enumerate() {
            for &tok in toks {
                for c in 0..self.dims.channels {
                    out.push(self.values[self.dims.offset(b, c, tok)]);
                }
            }
        }
        Ok(out)
    }
}

/// Decoder that counts how often it is asked to decode.
pub struct CountingDecoder<'a> {
    pub inner: DecoderSpec,
    pub calls: &'a AtomicUsize,
}

impl OccupancyDecoder for CountingDecoder<'_> {
    fn decode(&self, grid: &LatentGrid, batch: usize) -> Result<OccupancyGrid, GridError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.decode(grid, batch)
    }
}

/// Longest run of consecutive steps with a non-empty cached set.
pub fn longest_cached_run(cached: impl IntoIterator<Item = usize>) -> u32 {
    let (mut run, mut best) = (0u32, 0u32);
    for c in cached {
        run = if c > 0 { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}
