//! Staged workflow over a dataset directory and a flat artifact workdir.
//!
//! ```text
//! <workdir>/fingerprint.json
//! <workdir>/plan.json, folds.json
//! <workdir>/boxes/<id>.json                  ground truth from convert-labels
//! <workdir>/raw_predictions/<model>/<id>.json
//! <workdir>/sweep.json, empirical_params.json
//! <workdir>/predictions/<id>.json
//! <workdir>/baseline_sweep.json, baseline_params.json
//! <workdir>/metrics.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxcluster::{tile_patches, ModelStream, RawCasePredictions, DEFAULT_OVERLAP};
use crate::dataio::{load_dataset, read_json_artifact, write_json_artifact, BoundingBox, Case, Dataset, Split};
use crate::empirical::{
    default_grids, seg_post_grids, tune_seg_postprocessing, EmpiricalParams, ModelChoice, ValidationSet,
};
use crate::error::{Error, Result};
use crate::fingerprint::{case_fingerprint, dataset_fingerprint, DatasetFingerprint};
use crate::metrics::{evaluate, Criterion, DEFAULT_IOU_THRESHOLD};
use crate::planner::{build_plan, PipelinePlan, TopologyPlan, TrainBox, DEFAULT_VOXEL_BUDGET};
use crate::seg2det::{instances_from_softmax, load_softmax, objects_from_labelmap, SegPostParams, DEFAULT_MIN_DIAMETER_MM};
use crate::stats::{derive_seed, stable_hash};
use crate::synth::{oracle_predict_patches, OracleNoise};

pub const FINGERPRINT_JSON: &str = "fingerprint.json";
pub const PLAN_JSON: &str = "plan.json";
pub const FOLDS_JSON: &str = "folds.json";
pub const SWEEP_JSON: &str = "sweep.json";
pub const EMPIRICAL_PARAMS_JSON: &str = "empirical_params.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const BASELINE_SWEEP_JSON: &str = "baseline_sweep.json";
pub const BASELINE_PARAMS_JSON: &str = "baseline_params.json";
pub const RAW_PREDICTIONS_DIR: &str = "raw_predictions";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const BOXES_DIR: &str = "boxes";

/// Number of simulated test-time augmentations per model (identity + mirror).
pub const DEFAULT_TTA: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Fingerprint,
    Plan,
    ConvertLabels,
    Baseline,
    Simulate,
    Consolidate,
    Sweep,
    Evaluate,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    #[default]
    Basic,
    Plus,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub workdir: PathBuf,
    pub seed: u64,
    pub folds: usize,
    /// Worker threads; `None` uses every available core.
    pub jobs: Option<usize>,
    pub voxel_budget: u64,
    pub overlap: f64,
    pub min_diameter_mm: f64,
    pub criterion: Criterion,
    pub iou_threshold: f64,
    pub noise: OracleNoise,
    pub tta: u32,
    pub baseline_mode: BaselineMode,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, workdir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            workdir: workdir.into(),
            seed: 0,
            folds: 5,
            jobs: None,
            voxel_budget: DEFAULT_VOXEL_BUDGET,
            overlap: DEFAULT_OVERLAP,
            min_diameter_mm: DEFAULT_MIN_DIAMETER_MM,
            criterion: Criterion::Iou,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            noise: OracleNoise::noisy(),
            tta: DEFAULT_TTA,
            baseline_mode: BaselineMode::Basic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Invalid("--folds must be ≥ 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Invalid("--jobs must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Invalid("--overlap must lie in [0, 1)".into()));
        }
        if self.tta == 0 {
            return Err(Error::Invalid("at least one test-time augmentation stream is required".into()));
        }
        if !(self.min_diameter_mm >= 0.0) {
            return Err(Error::Invalid("--min-diameter-mm must be non-negative".into()));
        }
        self.noise.validate()
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }
}

/// Fold of a non-test case: a pure function of the seed and the case id.
pub fn fold_of(seed: u64, case_id: &str, folds: usize) -> usize {
    (derive_seed(seed, &[stable_hash(case_id)]) % folds as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: usize,
    pub seed: u64,
    /// Non-test case id → fold whose model holds it out for validation.
    pub validation_fold: BTreeMap<String, usize>,
    pub test_cases: Vec<String>,
}

pub fn assign_folds(dataset: &Dataset, seed: u64, folds: usize) -> FoldAssignment {
    let mut validation_fold = BTreeMap::new();
    let mut test_cases = Vec::new();
    for c in &dataset.cases {
        if c.split == Split::Test {
            test_cases.push(c.id.clone());
        } else {
            validation_fold.insert(c.id.clone(), fold_of(seed, &c.id, folds));
        }
    }
    test_cases.sort();
    FoldAssignment {
        folds,
        seed,
        validation_fold,
        test_cases,
    }
}

fn require(path: &Path, name: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(name.to_string()))
    }
}

fn read_artifact<T: serde::de::DeserializeOwned>(cfg: &RunConfig, name: &str) -> Result<T> {
    let path = cfg.artifact(name);
    require(&path, name)?;
    read_json_artifact(path)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Ground truth per case: converted boxes from the workdir when present,
/// otherwise the dataset's own annotations.
pub fn ground_truth(cfg: &RunConfig, dataset: &Dataset) -> Result<BTreeMap<String, Vec<BoundingBox>>> {
    dataset
        .cases
        .iter()
        .map(|c| {
            let converted = cfg.workdir.join(BOXES_DIR).join(format!("{}.json", c.id));
            let boxes = if converted.exists() {
                read_json_artifact(&converted)?
            } else {
                c.objects.clone()
            };
            Ok((c.id.clone(), boxes))
        })
        .collect()
}

fn stage_fingerprint(cfg: &RunConfig, dataset: &Dataset) -> Result<DatasetFingerprint> {
    let gt = ground_truth(cfg, dataset)?;
    let stats = dataset
        .cases
        .par_iter()
        .map(|c| {
            let mut case = c.clone();
            case.objects = gt[&c.id].clone();
            case_fingerprint(dataset, &case)
        })
        .collect::<Result<Vec<_>>>()?;
    let fp = dataset_fingerprint(&stats, dataset.num_classes())?;
    write_json_artifact(&fp, cfg.artifact(FINGERPRINT_JSON))?;
    info!("fingerprint: {} cases, median shape {:?}", fp.num_cases, fp.median_shape);
    Ok(fp)
}

fn stage_plan(cfg: &RunConfig, dataset: &Dataset) -> Result<PipelinePlan> {
    let fp: DatasetFingerprint = read_artifact(cfg, FINGERPRINT_JSON)?;
    let gt = ground_truth(cfg, dataset)?;
    let train: Vec<TrainBox> = dataset
        .cases
        .iter()
        .filter(|c| c.split == Split::Train)
        .flat_map(|c| {
            gt[&c.id].iter().map(|b| TrainBox {
                bbox: b.clone(),
                spacing_mm: c.image.spacing_mm,
            })
        })
        .collect();
    let plan = build_plan(&fp, &train, cfg.voxel_budget, cfg.seed)?;
    write_json_artifact(&plan, cfg.artifact(PLAN_JSON))?;
    write_json_artifact(&assign_folds(dataset, cfg.seed, cfg.folds), cfg.artifact(FOLDS_JSON))?;
    info!(
        "plan: patch {:?}, lowres {}",
        plan.topology.patch_size, plan.lowres_triggered
    );
    Ok(plan)
}

fn stage_convert_labels(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let labelled: Vec<&Case> = dataset.cases.iter().filter(|c| c.labels.is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::Invalid("dataset has no label maps to convert".into()));
    }
    let dir = cfg.workdir.join(BOXES_DIR);
    ensure_dir(&dir)?;
    labelled.par_iter().try_for_each(|c| {
        let labels = dataset.load_labels(c)?.expect("labelled case");
        let table = &c.labels.as_ref().expect("labelled case").instance_classes;
        let objects = objects_from_labelmap(&labels, table, cfg.min_diameter_mm, &dataset.exclusions_for(&c.id))?;
        write_json_artifact(&objects, dir.join(format!("{}.json", c.id)))
    })?;
    info!("convert-labels: {} cases", labelled.len());
    Ok(())
}

fn write_predictions(cfg: &RunConfig, preds: &BTreeMap<String, Vec<BoundingBox>>) -> Result<()> {
    let dir = cfg.workdir.join(PREDICTIONS_DIR);
    ensure_dir(&dir)?;
    for (id, boxes) in preds {
        write_json_artifact(boxes, dir.join(format!("{id}.json")))?;
    }
    Ok(())
}

fn stage_baseline(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let with_softmax: Vec<&Case> = dataset
        .cases
        .iter()
        .filter(|c| crate::seg2det::softmax_paths(&dataset.root, &c.id).0.exists())
        .collect();
    if with_softmax.is_empty() {
        return Err(Error::MissingArtifact("softmax/<case>.json in the dataset".into()));
    }
    let softmax = with_softmax
        .par_iter()
        .map(|c| Ok((c.id.clone(), load_softmax(&dataset.root, &c.id)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let params = match cfg.baseline_mode {
        BaselineMode::Basic => SegPostParams::basic(),
        BaselineMode::Plus => {
            let test: Vec<&str> = dataset.cases.iter().filter(|c| c.split == Split::Test).map(|c| c.id.as_str()).collect();
            let val: BTreeMap<_, _> = softmax.iter().filter(|(id, _)| !test.contains(&id.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
            let gt = ground_truth(cfg, dataset)?;
            let report = tune_seg_postprocessing(&val, &gt, dataset.num_classes(), &seg_post_grids())?;
            write_json_artifact(&report, cfg.artifact(BASELINE_SWEEP_JSON))?;
            report.chosen
        }
    };
    write_json_artifact(&params, cfg.artifact(BASELINE_PARAMS_JSON))?;
    let preds = softmax
        .par_iter()
        .map(|(id, sm)| Ok((id.clone(), instances_from_softmax(sm, &params)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    write_predictions(cfg, &preds)?;
    info!("baseline: {} cases", preds.len());
    Ok(())
}

/// Patch extent in a case's own voxels for a plan made at `topo`'s spacing.
fn case_patch(topo: &TopologyPlan, case: &Case) -> [usize; 3] {
    [0, 1, 2].map(|a| {
        let p = (topo.patch_size[a] as f64 * topo.target_spacing_mm[a] / case.image.spacing_mm[a]).round() as usize;
        p.clamp(1, case.image.dims[a])
    })
}

fn simulate_case(
    cfg: &RunConfig,
    case: &Case,
    gt: &[BoundingBox],
    topo: &TopologyPlan,
    model: ModelChoice,
    noise: &OracleNoise,
    fold_models: &[u32],
    num_classes: usize,
) -> Result<RawCasePredictions> {
    let grid = tile_patches(case.image.dims, case_patch(topo, case), cfg.overlap)?;
    let mut streams = Vec::new();
    for &fold in fold_models {
        for tta in 0..cfg.tta {
            let seed = derive_seed(cfg.seed, &[stable_hash(&case.id), model as u64, u64::from(fold), u64::from(tta)]);
            streams.push(ModelStream {
                model: fold,
                tta,
                patches: oracle_predict_patches(gt, &grid, noise, num_classes, seed),
            });
        }
    }
    Ok(RawCasePredictions {
        case_id: case.id.clone(),
        grid,
        streams,
    })
}

fn stage_simulate(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let plan: PipelinePlan = read_artifact(cfg, PLAN_JSON)?;
    let folds: FoldAssignment = read_artifact(cfg, FOLDS_JSON)?;
    let gt = ground_truth(cfg, dataset)?;
    let mut models = vec![(ModelChoice::Fullres, plan.topology.clone(), cfg.noise)];
    if let Some(low) = &plan.lowres_topology {
        // coarser resolution localizes less precisely
        let ratio = (0..3)
            .map(|a| low.target_spacing_mm[a] / plan.topology.target_spacing_mm[a])
            .fold(1.0, f64::max);
        let mut noise = cfg.noise;
        noise.center_jitter_voxels *= ratio;
        models.push((ModelChoice::Lowres, low.clone(), noise));
    }
    let all_folds: Vec<u32> = (0..folds.folds as u32).collect();
    for (model, topo, noise) in &models {
        let dir = cfg.workdir.join(RAW_PREDICTIONS_DIR).join(model.name());
        ensure_dir(&dir)?;
        dataset.cases.par_iter().try_for_each(|c| {
            let fold_models = match folds.validation_fold.get(&c.id) {
                Some(&f) => vec![f as u32],
                None => all_folds.clone(),
            };
            let raw = simulate_case(cfg, c, &gt[&c.id], topo, *model, noise, &fold_models, dataset.num_classes())?;
            write_json_artifact(&raw, dir.join(format!("{}.json", c.id)))
        })?;
        info!("simulate: {} predictions for {} cases", model.name(), dataset.cases.len());
    }
    Ok(())
}

fn load_raw(cfg: &RunConfig, model: ModelChoice, ids: &[String]) -> Result<Vec<RawCasePredictions>> {
    let dir = cfg.workdir.join(RAW_PREDICTIONS_DIR).join(model.name());
    ids.par_iter()
        .map(|id| {
            let path = dir.join(format!("{id}.json"));
            require(&path, &format!("{RAW_PREDICTIONS_DIR}/{}/{id}.json", model.name()))?;
            read_json_artifact(path)
        })
        .collect()
}

fn raw_dir_exists(cfg: &RunConfig, model: ModelChoice) -> bool {
    cfg.workdir.join(RAW_PREDICTIONS_DIR).join(model.name()).is_dir()
}

fn stage_sweep(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    if !raw_dir_exists(cfg, ModelChoice::Fullres) {
        return Err(Error::MissingArtifact(format!("{RAW_PREDICTIONS_DIR}/{}", ModelChoice::Fullres.name())));
    }
    let val_ids: Vec<String> = dataset
        .cases
        .iter()
        .filter(|c| c.split != Split::Test)
        .map(|c| c.id.clone())
        .collect();
    if val_ids.is_empty() {
        return Err(Error::EmptyInput("no validation (non-test) cases to sweep on".into()));
    }
    let lowres = raw_dir_exists(cfg, ModelChoice::Lowres);
    let mut predictions = BTreeMap::new();
    predictions.insert(ModelChoice::Fullres, load_raw(cfg, ModelChoice::Fullres, &val_ids)?);
    if lowres {
        predictions.insert(ModelChoice::Lowres, load_raw(cfg, ModelChoice::Lowres, &val_ids)?);
    }
    let all_gt = ground_truth(cfg, dataset)?;
    let val = ValidationSet {
        predictions,
        gt: val_ids.iter().map(|id| (id.clone(), all_gt[id].clone())).collect(),
        num_classes: dataset.num_classes(),
    };
    let report = val.sweep(&EmpiricalParams::default(), &default_grids(lowres))?;
    write_json_artifact(&report, cfg.artifact(SWEEP_JSON))?;
    write_json_artifact(&report.chosen, cfg.artifact(EMPIRICAL_PARAMS_JSON))?;
    info!(
        "sweep: validation mAP {:.4} -> {:.4}",
        report.objective_trace[0],
        report.objective_trace.last().copied().unwrap_or_default()
    );
    Ok(())
}

fn stage_consolidate(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let params: EmpiricalParams = if cfg.artifact(EMPIRICAL_PARAMS_JSON).exists() {
        read_artifact(cfg, EMPIRICAL_PARAMS_JSON)?
    } else {
        warn!("{EMPIRICAL_PARAMS_JSON} not found, consolidating with initialization parameters");
        EmpiricalParams::default()
    };
    if !raw_dir_exists(cfg, params.model_choice) {
        return Err(Error::MissingArtifact(format!("{RAW_PREDICTIONS_DIR}/{}", params.model_choice.name())));
    }
    let ids: Vec<String> = dataset.cases.iter().map(|c| c.id.clone()).collect();
    let raw = load_raw(cfg, params.model_choice, &ids)?;
    let cp = params.consolidate_params();
    let preds = raw
        .par_iter()
        .map(|r| Ok((r.case_id.clone(), r.consolidate(&cp, params.tta_enabled)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    write_predictions(cfg, &preds)?;
    info!("consolidate: {} cases with {:?}", preds.len(), params);
    Ok(())
}

/// Cases that are scored: the test split, or every case when there is none.
pub fn evaluation_cases(dataset: &Dataset) -> Vec<String> {
    let test: Vec<String> = dataset.cases.iter().filter(|c| c.split == Split::Test).map(|c| c.id.clone()).collect();
    if test.is_empty() {
        dataset.cases.iter().map(|c| c.id.clone()).collect()
    } else {
        test
    }
}

fn stage_evaluate(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let dir = cfg.workdir.join(PREDICTIONS_DIR);
    require(&dir, PREDICTIONS_DIR)?;
    let ids = evaluation_cases(dataset);
    let all_gt = ground_truth(cfg, dataset)?;
    let mut preds = BTreeMap::new();
    let mut gt = BTreeMap::new();
    for id in &ids {
        let path = dir.join(format!("{id}.json"));
        require(&path, &format!("{PREDICTIONS_DIR}/{id}.json"))?;
        preds.insert(id.clone(), read_json_artifact::<Vec<BoundingBox>>(path)?);
        gt.insert(id.clone(), all_gt[id].clone());
    }
    let report = evaluate(&preds, &gt, dataset.num_classes(), cfg.iou_threshold, cfg.criterion);
    write_json_artifact(&report, cfg.artifact(METRICS_JSON))?;
    info!("evaluate: mAP {:?}, CPM {:?}", report.map, report.cpm);
    Ok(())
}

fn needs_conversion(dataset: &Dataset) -> bool {
    dataset.cases.iter().any(|c| c.labels.is_some() && c.objects.is_empty())
}

fn run_in_pool(cfg: &RunConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset)?;
    ensure_dir(&cfg.workdir)?;
    match stage {
        Stage::Fingerprint => stage_fingerprint(cfg, &dataset).map(|_| ()),
        Stage::Plan => stage_plan(cfg, &dataset).map(|_| ()),
        Stage::ConvertLabels => stage_convert_labels(cfg, &dataset),
        Stage::Baseline => stage_baseline(cfg, &dataset),
        Stage::Simulate => stage_simulate(cfg, &dataset),
        Stage::Consolidate => stage_consolidate(cfg, &dataset),
        Stage::Sweep => stage_sweep(cfg, &dataset),
        Stage::Evaluate => stage_evaluate(cfg, &dataset),
        Stage::All => {
            if needs_conversion(&dataset) {
                stage_convert_labels(cfg, &dataset)?;
            }
            stage_fingerprint(cfg, &dataset)?;
            stage_plan(cfg, &dataset)?;
            stage_simulate(cfg, &dataset)?;
            stage_sweep(cfg, &dataset)?;
            stage_consolidate(cfg, &dataset)?;
            stage_evaluate(cfg, &dataset)
        }
    }
}

/// Runs one stage (or the whole chain) on a thread pool sized by `jobs`.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(cfg, stage))
}
