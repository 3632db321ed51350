//! Merge overlapping patch predictions of two models into final boxes.
//!
//! cargo run --example consolidate

use std::collections::BTreeMap;

use detpipe::boxcluster::{consolidate_case, tile_patches, ConsolidateParams, ModelStream};
use detpipe::dataio::BoundingBox;

fn main() -> detpipe::Result<()> {
    let grid = tile_patches([64, 32, 32], [32, 32, 32], 0.5)?;
    println!("{} patches", grid.len());

    let object = BoundingBox::new([26.0, 10.0, 10.0], [36.0, 20.0, 20.0], 0);
    let streams: Vec<ModelStream> = (0..2)
        .map(|model| {
            let mut patches = BTreeMap::new();
            for p in 0..grid.len() {
                let (lo, hi) = grid.bounds(p);
                if let Some(b) = object.clipped(lo, hi) {
                    let shift = 0.5 * f64::from(model);
                    patches.insert(p, vec![b.translated([shift, 0.0, 0.0]).with_score(0.85 + 0.05 * f64::from(model))]);
                }
            }
            ModelStream { model, tta: 0, patches }
        })
        .collect();

    let merged = consolidate_case(&streams, &grid, &ConsolidateParams::default())?;
    for b in &merged {
        println!("{:?}..{:?} score {:.3}", b.min, b.max, b.score_or_zero());
    }
    Ok(())
}
