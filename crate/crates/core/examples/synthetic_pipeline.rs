//! Every stage end to end on a generated dataset, as the CLI's `all` does.
//!
//! cargo run --example synthetic_pipeline

use detpipe::dataio::read_json_artifact;
use detpipe::metrics::MetricsReport;
use detpipe::pipeline::{run_stage, RunConfig, Stage, METRICS_JSON};
use detpipe::synth::{generate_synthetic_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let dataset = dir.path().join("dataset");
    generate_synthetic_dataset(&SynthConfig { seed: 4, ..SynthConfig::default() }, &dataset)?;

    let mut cfg = RunConfig::new(&dataset, dir.path().join("work"));
    cfg.folds = 4;
    run_stage(&cfg, Stage::All)?;

    let report: MetricsReport = read_json_artifact(cfg.workdir.join(METRICS_JSON))?;
    println!(
        "{} test cases, {} objects, {} predictions ({} true positives)",
        report.num_cases, report.num_gt, report.num_pred, report.num_tp
    );
    println!("mAP@0.1 {:.4}, CPM {:.4}", report.map.unwrap_or(0.0), report.cpm.unwrap_or(0.0));
    Ok(())
}
