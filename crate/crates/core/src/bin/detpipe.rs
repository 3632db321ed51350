use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use detpipe::error::EXIT_INTERNAL;
use detpipe::metrics::Criterion;
use detpipe::pipeline::{run_stage, BaselineMode, RunConfig, Stage};
use detpipe::planner::DEFAULT_VOXEL_BUDGET;
use detpipe::synth::{generate_synthetic_dataset, OracleNoise, SynthConfig};

#[derive(Parser)]
#[command(name = "detpipe", version, about = "Planning, consolidation and evaluation for 3D object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract per-case statistics and write fingerprint.json
    Fingerprint(Common),
    /// Derive topology, anchors and low-res trigger; writes plan.json
    Plan(Common),
    /// Turn label maps into ground-truth boxes under <workdir>/boxes
    ConvertLabels(Common),
    /// Segmentation baseline from softmax volumes
    Baseline(Common),
    /// Oracle per-patch predictions standing in for trained models
    Simulate(Common),
    /// Merge patch predictions into per-case detections
    Consolidate(Common),
    /// Sequentially tune test-time parameters on validation cases
    Sweep(Common),
    /// Score predictions; writes metrics.json
    Evaluate(Common),
    /// Run the whole chain
    All(Common),
    /// Write a synthetic dataset to --dataset
    Generate(Generate),
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Iou,
    CenterRadius,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Zero,
    Noisy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Basic,
    Plus,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    workdir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_VOXEL_BUDGET)]
    voxel_budget: u64,
    /// Fractional overlap between neighbouring patches
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = 3.0)]
    min_diameter_mm: f64,
    /// Matching criterion for evaluation
    #[arg(long, value_enum, default_value = "iou")]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 0.1)]
    iou_threshold: f64,
    /// Oracle noise preset for `simulate`
    #[arg(long, value_enum, default_value = "noisy")]
    noise: NoiseArg,
    /// Baseline post-processing: plain argmax or tuned
    #[arg(long, value_enum, default_value = "basic")]
    mode: ModeArg,
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Volume extent as x,y,z
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 64, 64])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn config(&self) -> RunConfig {
        let mut cfg = RunConfig::new(&self.dataset, &self.workdir);
        cfg.seed = self.seed;
        cfg.folds = self.folds;
        cfg.jobs = self.jobs;
        cfg.voxel_budget = self.voxel_budget;
        cfg.overlap = self.overlap;
        cfg.min_diameter_mm = self.min_diameter_mm;
        cfg.iou_threshold = self.iou_threshold;
        cfg.criterion = match self.criterion {
            CriterionArg::Iou => Criterion::Iou,
            CriterionArg::CenterRadius => Criterion::CenterRadius,
        };
        cfg.noise = match self.noise {
            NoiseArg::Zero => OracleNoise::zero(),
            NoiseArg::Noisy => OracleNoise::noisy(),
        };
        cfg.baseline_mode = match self.mode {
            ModeArg::Basic => BaselineMode::Basic,
            ModeArg::Plus => BaselineMode::Plus,
        };
        cfg
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DETPIPE_LOG", "info")).init();
    let cli = Cli::parse();
    let (common, stage) = match &cli.command {
        Command::Fingerprint(c) => (c, Stage::Fingerprint),
        Command::Plan(c) => (c, Stage::Plan),
        Command::ConvertLabels(c) => (c, Stage::ConvertLabels),
        Command::Baseline(c) => (c, Stage::Baseline),
        Command::Simulate(c) => (c, Stage::Simulate),
        Command::Consolidate(c) => (c, Stage::Consolidate),
        Command::Sweep(c) => (c, Stage::Sweep),
        Command::Evaluate(c) => (c, Stage::Evaluate),
        Command::All(c) => (c, Stage::All),
        Command::Generate(g) => {
            let Ok(dims) = <[usize; 3]>::try_from(g.dims.as_slice()) else {
                log::error!("--dims needs exactly three values");
                return ExitCode::from(2);
            };
            let cfg = SynthConfig {
                num_cases: g.cases,
                dims,
                num_classes: g.classes,
                seed: g.seed,
                ..SynthConfig::default()
            };
            return match generate_synthetic_dataset(&cfg, &g.dataset) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => {
                    log::error!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            };
        }
    };
    match std::panic::catch_unwind(|| run_stage(&common.config(), stage)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL as u8),
    }
}
