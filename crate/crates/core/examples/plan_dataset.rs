//! Fingerprint a synthetic dataset and derive its pipeline plan.
//!
//! cargo run --example plan_dataset

use detpipe::fingerprint::{case_fingerprint, dataset_fingerprint};
use detpipe::planner::{build_plan, TrainBox, DEFAULT_VOXEL_BUDGET};
use detpipe::synth::{generate_synthetic_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cfg = SynthConfig {
        num_cases: 8,
        dims: [96, 96, 48],
        spacing_mm: [0.8, 0.8, 2.5],
        object_edge_range: [(6, 20), (6, 20), (3, 8)],
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg, dir.path())?;

    let stats = ds.cases.iter().map(|c| case_fingerprint(&ds, c)).collect::<detpipe::Result<Vec<_>>>()?;
    let fp = dataset_fingerprint(&stats, ds.num_classes())?;
    println!("median shape {:?}, anisotropy {:.2}", fp.median_shape, fp.anisotropy_ratio);

    let train: Vec<TrainBox> = ds
        .cases
        .iter()
        .flat_map(|c| c.objects.iter().map(|b| TrainBox { bbox: b.clone(), spacing_mm: c.image.spacing_mm }))
        .collect();
    let plan = build_plan(&fp, &train, DEFAULT_VOXEL_BUDGET, 0)?;
    let t = &plan.topology;
    println!("target spacing {:?} mm", t.target_spacing_mm);
    println!("patch {:?}, pools {:?}, batch {}", t.patch_size, t.num_pool_per_axis, t.batch_size);
    println!("anchor sizes per axis {:?}", plan.anchors.sizes_per_axis);
    println!("low-res model triggered: {}", plan.lowres_triggered);
    Ok(())
}
