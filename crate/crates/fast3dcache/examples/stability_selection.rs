//! Score tokens from two stored velocity fields and pick which to cache.

use fast3dcache::grid::{Dims, LatentGrid, VelocityField};
use fast3dcache::ssc::{select_partition, stability_scores};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Eight tokens, two channels. Later tokens move faster and change more.
    let dims = Dims::new(1, 2, 1, 2, 4);
    let now: Vec<f32> = (0..16).map(|i| (i % 8) as f32 * 0.5).collect();
    let prev: Vec<f32> = now.iter().enumerate().map(|(i, v)| v - (i % 8) as f32 * 0.1).collect();
    let v_cache = VelocityField { values: LatentGrid::from_vec(dims, now)?, step_index: 7 };
    let v_prev = VelocityField { values: LatentGrid::from_vec(dims, prev)?, step_index: 6 };

    let scores = stability_scores(&v_cache, &v_prev, 0, 0.7)?;
    for (i, s) in scores.iter().enumerate() {
        println!("token {i}: score {s:.3}");
    }

    let partition = select_partition(&scores, 5, 0, 3);
    println!("cached {:?}", partition.cached);
    println!("active {:?}", partition.active);

    // After three cached steps in a row the limit forces a full step.
    let forced = select_partition(&scores, 5, 3, 3);
    println!("forced refresh: {} (cached {:?})", forced.forced_refresh, forced.cached);
    Ok(())
}
