//! Fit 27 anchors to a mix of box shapes and show the objective trace.
//!
//! cargo run --example anchors

use detpipe::dataio::BoundingBox;
use detpipe::planner::{optimize_anchors, DEFAULT_ANCHOR_SWEEPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> detpipe::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // per-axis edges from {4, 8, 16}, small ones over-represented
    let mut edge = || [4.0, 4.0, 4.0, 8.0, 16.0, 16.0][rng.random_range(0..6)];
    let boxes: Vec<BoundingBox> = (0..200).map(|_| BoundingBox::new([0.0; 3], [edge(), edge(), edge()], 0)).collect();

    let plan = optimize_anchors(&boxes, DEFAULT_ANCHOR_SWEEPS, 0)?;
    for (axis, sizes) in ["x", "y", "z"].iter().zip(plan.sizes_per_axis) {
        println!("{axis}: {:.2} {:.2} {:.2}", sizes[0], sizes[1], sizes[2]);
    }
    println!("objective trace {:?}", plan.objective_trace.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("{} anchors", plan.anchors.len());
    Ok(())
}
