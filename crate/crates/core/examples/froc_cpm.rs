//! Score detections with mAP, FROC and CPM.
//!
//! cargo run --example froc_cpm

use std::collections::BTreeMap;

use detpipe::dataio::BoundingBox;
use detpipe::metrics::{cpm, evaluate, Criterion, DEFAULT_IOU_THRESHOLD};

fn cube(x: f64, score: Option<f64>) -> BoundingBox {
    let b = BoundingBox::new([x, 0.0, 0.0], [x + 6.0, 6.0, 6.0], 0);
    match score {
        Some(s) => b.with_score(s),
        None => b,
    }
}

fn main() -> detpipe::Result<()> {
    let gt = BTreeMap::from([
        ("scan_a".to_string(), vec![cube(0.0, None), cube(20.0, None)]),
        ("scan_b".to_string(), vec![cube(40.0, None)]),
    ]);
    let preds = BTreeMap::from([
        ("scan_a".to_string(), vec![cube(0.5, Some(0.95)), cube(60.0, Some(0.7)), cube(20.0, Some(0.4))]),
        ("scan_b".to_string(), vec![cube(80.0, Some(0.9)), cube(41.0, Some(0.6))]),
    ]);

    let report = evaluate(&preds, &gt, 1, DEFAULT_IOU_THRESHOLD, Criterion::Iou);
    println!("mAP@0.1 {:.4}", report.map.unwrap_or(0.0));
    if let Some(froc) = &report.froc {
        for s in &froc.sensitivities_at {
            println!("  {:>6} FP/scan: sensitivity {:.3}", s.fp_per_scan, s.sensitivity);
        }
    }
    println!("CPM {:.4}", report.cpm.unwrap_or(0.0));

    let reference = [0.812, 0.885, 0.927, 0.950, 0.969, 0.979, 0.985];
    println!("CPM of a reference sensitivity row: {:.3}", cpm(&reference)?);
    Ok(())
}
