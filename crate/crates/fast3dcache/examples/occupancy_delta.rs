//! Decode two latent grids to occupancy and count the voxels that changed.
//!
//! cargo run --example occupancy_delta

use fast3dcache::grid::{decode_occupancy, dynamic_voxel_count, DecoderSpec, Dims, LatentGrid};
use fast3dcache::simkit::gaussian_noise;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = Dims::cube(4, 8);
    let before = gaussian_noise(dims, 0)?;

    // Nudge every value a little toward zero so some signs flip.
    let after = LatentGrid::from_vec(dims, before.data().iter().map(|v| v * 0.9 - 0.05).collect())?;

    let spec = DecoderSpec::new(8.0);
    let a = decode_occupancy(&before, 0, &spec)?;
    let b = decode_occupancy(&after, 0, &spec)?;
    println!("decoded resolution {:?}", a.resolution());
    println!("occupied before {} after {}", a.count_ones(), b.count_ones());
    println!("dynamic voxels {}", dynamic_voxel_count(&a, &b)?);
    Ok(())
}
