//! Record every velocity of a full run to disk, then drive the cached
//! sampler from the file instead of the live field.

use fast3dcache::grid::Dims;
use fast3dcache::pipeline::{run, CachePolicy, SamplerConfig};
use fast3dcache::simkit::{record_trace, relative_l2, SyntheticField, SyntheticFieldSpec, TraceOracle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = SamplerConfig::default();
    let field = SyntheticField::new(SyntheticFieldSpec::for_config(&config, 1), Dims::cube(4, 8))?;
    let noise = field.initial_noise();

    let (trace, reference) = record_trace(&config, &field, &noise)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.f3dc");
    trace.write(&path)?;
    println!("wrote {} bytes to {}", std::fs::metadata(&path)?.len(), path.display());

    let replay = TraceOracle::open(&path)?;
    let full_cfg = SamplerConfig { policy: CachePolicy::Disabled, ..config };
    let (full, _) = run(&full_cfg, &replay, &noise)?;
    println!("full replay identical to recording: {}", full == reference);

    let (cached, report) = run(&config, &replay, &noise)?;
    println!(
        "cached replay: {:.1}% fewer FLOPs, relative L2 {:.4}",
        100.0 * report.flops_reduction,
        relative_l2(&cached, &reference)?
    );
    Ok(())
}
