//! Assign anchors to ground-truth boxes with adaptive thresholds.
//!
//! cargo run --example atss_matching

use detpipe::dataio::BoundingBox;
use detpipe::matching::{atss_match, coverage_report, AnchorGrid, MatchParams};
use detpipe::planner::AnchorPlan;

fn main() -> detpipe::Result<()> {
    let plan = AnchorPlan::from_sizes([[4.0, 8.0, 16.0]; 3], 4);
    let grid = AnchorGrid::from_plan(&plan, [64, 64, 64], 2)?;
    println!("{} anchors on {} levels", grid.len(), grid.level_strides.len());

    let gt = vec![
        BoundingBox::new([10.0, 10.0, 10.0], [18.0, 18.0, 18.0], 0),
        BoundingBox::new([30.0, 20.0, 40.0], [50.0, 36.0, 52.0], 1),
        // smaller than the anchor spacing: no anchor center falls inside
        BoundingBox::new([5.2, 5.2, 5.2], [5.8, 5.8, 5.8], 0),
    ];
    let matches = atss_match(&gt, &grid, &MatchParams::default());
    for (g, m) in gt.iter().zip(&matches) {
        println!(
            "box {:?}..{:?}: {} candidates, threshold {:.3}, {} positives",
            g.min,
            g.max,
            m.candidates.len(),
            m.threshold,
            m.positives.len()
        );
    }
    let cov = coverage_report(&gt, &matches);
    println!("coverage per class {:?}", cov.per_class);
    Ok(())
}
