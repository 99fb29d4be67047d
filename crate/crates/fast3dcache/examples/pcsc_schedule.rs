//! Print the cache budget the predictive schedule implies for a given
//! anchor measurement, without running a sampler.
//!
//! cargo run --example pcsc_schedule -- 1500

use fast3dcache::pipeline::{pcsc_curve, SamplerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sigma: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let config = SamplerConfig::default();
    println!("anchor step {}, refinement from step {}", config.anchor_step(), config.refine_start());
    println!("{:>4} {:>7} {:>20} {:>10} {:>7}", "step", "t", "phase", "predicted", "budget");
    for row in pcsc_curve(&config, sigma, 4096)? {
        let predicted = row.predicted_dynamic_voxels.map(|p| format!("{p:.1}")).unwrap_or_else(|| "-".into());
        println!("{:>4} {:>7.4} {:>20} {:>10} {:>7}", row.step, row.t, row.phase.name(), predicted, row.budget);
    }
    Ok(())
}
