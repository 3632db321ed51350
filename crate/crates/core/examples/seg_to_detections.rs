//! Label map to boxes, and softmax to detections with both baseline modes.
//!
//! cargo run --example seg_to_detections

use std::collections::BTreeSet;

use detpipe::dataio::Volume;
use detpipe::seg2det::{
    components_to_objects, connected_components_3d, instances_from_softmax, Aggregation, SegPostParams, SoftmaxVolume,
};

fn main() -> detpipe::Result<()> {
    let spacing = [1.0, 1.0, 1.0];
    let mut mask = Volume::filled([24, 24, 24], spacing, false);
    let mut fg = vec![0.05f32; 24 * 24 * 24];
    for (lo, edge, p) in [(2, 6, 0.9f32), (11, 8, 0.45), (21, 2, 0.9)] {
        for z in lo..lo + edge {
            for y in lo..lo + edge {
                for x in lo..lo + edge {
                    mask.set(x, y, z, true);
                    fg[mask.index(x, y, z)] = p;
                }
            }
        }
    }

    let cs = connected_components_3d(&mask, 0)?;
    let objects = components_to_objects(&cs, spacing, 3.0, &BTreeSet::new());
    println!("{} components, {} kept after the 3 mm filter", cs.components.len(), objects.len());

    let softmax = SoftmaxVolume {
        dims: [24; 3],
        spacing_mm: spacing,
        channels: vec![fg.iter().map(|v| 1.0 - v).collect(), fg],
    };
    let basic = instances_from_softmax(&softmax, &SegPostParams::basic())?;
    let plus = SegPostParams {
        softmax_threshold: 0.4,
        min_voxels: 10,
        aggregation: Aggregation::Mean,
    };
    let tuned = instances_from_softmax(&softmax, &plus)?;
    println!("argmax: {} detections, threshold 0.4: {} detections", basic.len(), tuned.len());
    for b in &tuned {
        println!("  {:?}..{:?} score {:.2}", b.min, b.max, b.score_or_zero());
    }
    Ok(())
}
