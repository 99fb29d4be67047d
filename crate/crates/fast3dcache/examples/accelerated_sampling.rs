//! Run the cached sampler and a full reference on the synthetic field and
//! compare cost and final-state error.
//!
//! cargo run --release --example accelerated_sampling -- 3

use fast3dcache::flops::BlockDims;
use fast3dcache::grid::Dims;
use fast3dcache::pipeline::SamplerConfig;
use fast3dcache::simkit::{compare_runs, SyntheticField, SyntheticFieldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let config = SamplerConfig::default();
    let field = SyntheticField::new(SyntheticFieldSpec::for_config(&config, seed), Dims::cube(8, 16))?;
    let cmp = compare_runs(&config, BlockDims::default(), &field, &field.initial_noise())?;

    println!("step phase  quota active delta_s");
    for r in &cmp.cached.steps {
        let ds = r.delta_s.map(|d| d.to_string()).unwrap_or_default();
        println!("{:>4} {:>5} {:>6} {:>6} {:>7}", r.step, r.phase.number(), r.quota, r.active, ds);
    }
    println!("anchor measurement {:?}", cmp.cached.calibration.first().map(|c| c.sigma));
    println!("FLOPs reduction {:.1}%", 100.0 * cmp.flops_reduction);
    println!("relative L2 {:.4}, occupancy IoU {:.4}", cmp.quality.relative_l2, cmp.quality.iou);
    Ok(())
}
