//! Plug in your own velocity model. The sampler only asks for the active
//! tokens, so the oracle sees exactly the work caching saves.

use std::sync::atomic::{AtomicU64, Ordering};

use fast3dcache::grid::Dims;
use fast3dcache::pipeline::{run, CachePolicy, OracleError, OracleQuery, SamplerConfig, VelocityOracle};
use fast3dcache::simkit::gaussian_noise;

/// Pulls every value toward a slowly rotating target; counts token queries.
struct Swirl {
    dims: Dims,
    queried: AtomicU64,
}

impl VelocityOracle for Swirl {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn velocity(&self, q: &OracleQuery<'_>) -> Result<Vec<f32>, OracleError> {
        let d = self.dims;
        let mut out = Vec::with_capacity(q.output_len());
        for (b, tokens) in q.active.iter().enumerate() {
            self.queried.fetch_add(tokens.len() as u64, Ordering::Relaxed);
            for &tok in tokens {
                let (z, y, x) = d.token_coords(tok);
                for c in 0..d.channels {
                    let target = ((x + 2 * y + 3 * z + c) as f64 * 0.3 + q.t).sin() as f32;
                    out.push(q.state.get(b, c, tok) - target);
                }
            }
        }
        Ok(out)
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = Dims::cube(4, 8);
    let noise = gaussian_noise(dims, 42)?;
    for policy in [CachePolicy::Disabled, CachePolicy::Predictive] {
        let oracle = Swirl { dims, queried: AtomicU64::new(0) };
        let config = SamplerConfig { policy, ..SamplerConfig::default() };
        let (_, report) = run(&config, &oracle, &noise)?;
        println!(
            "{policy}: {} token queries over {} guided steps, FLOPs reduction {:.1}%",
            oracle.queried.load(Ordering::Relaxed),
            report.steps.iter().filter(|r| r.guided).count(),
            100.0 * report.flops_reduction
        );
    }
    Ok(())
}
