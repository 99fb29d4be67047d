//! Vary one setting at a time from the defaults and tabulate cost against
//! error, in parallel.
//!
//! cargo run --release --example ablation_sweep

use fast3dcache::flops::BlockDims;
use fast3dcache::grid::Dims;
use fast3dcache::pipeline::{CachePolicy, SamplerConfig};
use fast3dcache::simkit::{compare_runs, SyntheticField, SyntheticFieldSpec};
use rayon::prelude::*;

fn main() {
    let base = SamplerConfig::default();
    let cells: Vec<(&str, SamplerConfig)> = vec![
        ("defaults", base),
        ("tau=0", SamplerConfig { tau: 0, ..base }),
        ("omega=0", SamplerConfig { omega: 0.0, ..base }),
        ("omega=1", SamplerConfig { omega: 1.0, ..base }),
        ("f_corr=0", SamplerConfig { f_corr: 0, ..base }),
        ("xi=0.9", SamplerConfig { xi: 0.9, ..base }),
        ("fixed:0.25", SamplerConfig { policy: CachePolicy::Fixed { active_ratio: 0.25 }, ..base }),
    ];
    let rows: Vec<_> = cells
        .par_iter()
        .map(|(label, cfg)| {
            let field = SyntheticField::new(SyntheticFieldSpec::for_config(cfg, 0), Dims::cube(8, 16)).expect("dims");
            let cmp = compare_runs(cfg, BlockDims::default(), &field, &field.initial_noise()).expect("run");
            (*label, cmp.flops_reduction, cmp.quality.relative_l2, cmp.quality.iou)
        })
        .collect();
    println!("{:<12} {:>9} {:>9} {:>7}", "config", "reduction", "rel L2", "IoU");
    for (label, red, err, iou) in rows {
        println!("{label:<12} {:>8.1}% {err:>9.5} {iou:>7.4}", 100.0 * red);
    }
}
