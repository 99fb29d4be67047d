//! Per-component cost of one transformer block and of a 25-step run with a
//! made-up cache schedule.

use fast3dcache::flops::{flops_run, BlockDims, FlopsReport, StepCost};

fn main() {
    let dims = BlockDims::default();
    let report = FlopsReport::new(&dims);
    println!("modulation      {:>16}", report.modulation);
    println!("layernorm (x{})  {:>16}", report.layernorms_per_block, report.layernorm);
    println!("self-attention  {:>16}", report.self_attention);
    println!("cross-attention {:>16}", report.cross_attention);
    println!("mlp             {:>16}", report.mlp);
    println!("block           {:>16}", report.block);

    // Guided for 18 steps; from step 6 only a fifth of the tokens are active.
    let steps: Vec<StepCost> = (1..=25u64)
        .map(|k| StepCost {
            active_tokens: if k <= 5 { dims.tokens } else { dims.tokens / 5 },
            guidance_factor: if k <= 18 { 2 } else { 1 },
        })
        .collect();
    let full: Vec<StepCost> = steps.iter().map(|s| StepCost { active_tokens: dims.tokens, ..*s }).collect();
    let (cached, reference) = (flops_run(&dims, &steps), flops_run(&dims, &full));
    println!("run {cached} of {reference} ({:.1}% saved)", 100.0 * (1.0 - cached as f64 / reference as f64));
}
