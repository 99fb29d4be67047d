//! Token caching for iterative flow-matching samplers over dense 3D latent
//! grids.
//!
//! - [`grid`]: latent grids, token linearization, occupancy decoding, and the
//!   dynamic-voxel count.
//! - [`pcsc`]: anchor-calibrated log-linear prediction of occupancy change and
//!   the cache quota it implies.
//! - [`ssc`]: per-token stability scores and cache/active partitioning.
//! - [`pipeline`]: the three-phase Euler sampler.
//! - [`flops`]: closed-form transformer block cost.
//! - [`simkit`]: synthetic oracles, a plain reference sampler, traces, and
//!   metrics.
//! - [`cli`]: the `fast3d` command line.

pub mod cli;
pub mod flops;
pub mod grid;
pub mod pcsc;
pub mod pipeline;
pub mod simkit;
pub mod ssc;

pub use grid::{Dims, LatentGrid};
pub use pipeline::{run, CachePolicy, RunReport, Sampler, SamplerConfig, VelocityOracle};
