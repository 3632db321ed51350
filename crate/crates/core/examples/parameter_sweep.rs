//! Tune test-time parameters on simulated validation predictions.
//!
//! cargo run --example parameter_sweep

use std::collections::BTreeMap;

use detpipe::boxcluster::{tile_patches, ModelStream, RawCasePredictions};
use detpipe::empirical::{default_grids, EmpiricalParams, ModelChoice, ValidationSet};
use detpipe::synth::{oracle_predict_patches, synthesize_case, OracleNoise, SynthConfig};

fn main() -> detpipe::Result<()> {
    let cfg = SynthConfig { num_cases: 6, dims: [48; 3], ..SynthConfig::default() };
    let grid = tile_patches(cfg.dims, [32; 3], 0.5)?;
    let mut val = ValidationSet { num_classes: 1, ..ValidationSet::default() };
    let mut raw = Vec::new();
    for i in 0..cfg.num_cases {
        let (_, _, _, objects) = synthesize_case(&cfg, i)?;
        let id = format!("case_{i}");
        let streams = (0..2)
            .map(|tta| ModelStream {
                model: 0,
                tta,
                patches: oracle_predict_patches(&objects, &grid, &OracleNoise::noisy(), 1, (i * 2) as u64 + u64::from(tta)),
            })
            .collect();
        raw.push(RawCasePredictions { case_id: id.clone(), grid: grid.clone(), streams });
        val.gt.insert(id, objects);
    }
    val.predictions = BTreeMap::from([(ModelChoice::Fullres, raw)]);

    let report = val.sweep(&EmpiricalParams::default(), &default_grids(false))?;
    for step in &report.steps {
        println!("{:<12} -> {}", step.parameter, step.chosen);
    }
    println!("mAP trace {:?}", report.objective_trace.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    Ok(())
}
