//! Sequential optimization of test-time parameters on validation data.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxcluster::{ConsolidateParams, RawCasePredictions};
use crate::dataio::BoundingBox;
use crate::error::{Error, Result};
use crate::metrics::map_at_default;
use crate::seg2det::{instances_from_softmax, Aggregation, SegPostParams, SoftmaxVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    #[default]
    Fullres,
    Lowres,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Fullres => "fullres",
            ModelChoice::Lowres => "lowres",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [ModelChoice::Fullres, ModelChoice::Lowres].into_iter().find(|m| m.name() == s)
    }
}

/// A candidate value for one tunable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(u64),
    Real(f64),
    Label(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(v) => write!(f, "{v}"),
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Real(v) => write!(f, "{v}"),
            ParamValue::Label(v) => f.write_str(v),
        }
    }
}

/// Parameters that can be swept one named field at a time.
pub trait Tunable: Clone + Send + Sync {
    fn get(&self, name: &str) -> Option<ParamValue>;
    fn set(&mut self, name: &str, value: &ParamValue) -> Result<()>;
}

fn bad_value(name: &str, value: &ParamValue) -> Error {
    Error::Invalid(format!("invalid value `{value}` for parameter `{name}`"))
}

fn unit_real(name: &str, value: &ParamValue) -> Result<f64> {
    match value {
        ParamValue::Real(v) if (0.0..=1.0).contains(v) => Ok(*v),
        ParamValue::Int(v) if *v <= 1 => Ok(*v as f64),
        _ => Err(bad_value(name, value)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalParams {
    pub nms_iou: f64,
    pub wbc_iou: f64,
    pub min_score: f64,
    pub tta_enabled: bool,
    pub model_choice: ModelChoice,
}

impl Default for EmpiricalParams {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            wbc_iou: 0.3,
            min_score: 0.0,
            tta_enabled: true,
            model_choice: ModelChoice::Fullres,
        }
    }
}

impl EmpiricalParams {
    pub const ORDER: [&'static str; 5] = ["model_choice", "nms_iou", "wbc_iou", "min_score", "tta_enabled"];

    pub fn consolidate_params(&self) -> ConsolidateParams {
        ConsolidateParams {
            nms_iou: self.nms_iou,
            wbc_iou: self.wbc_iou,
            min_score: self.min_score,
        }
    }
}

impl Tunable for EmpiricalParams {
    fn get(&self, name: &str) -> Option<ParamValue> {
        Some(match name {
            "nms_iou" => ParamValue::Real(self.nms_iou),
            "wbc_iou" => ParamValue::Real(self.wbc_iou),
            "min_score" => ParamValue::Real(self.min_score),
            "tta_enabled" => ParamValue::Bool(self.tta_enabled),
            "model_choice" => ParamValue::Label(self.model_choice.name().into()),
            _ => return None,
        })
    }

    fn set(&mut self, name: &str, value: &ParamValue) -> Result<()> {
        match (name, value) {
            ("nms_iou", v) => self.nms_iou = unit_real(name, v)?,
            ("wbc_iou", v) => self.wbc_iou = unit_real(name, v)?,
            ("min_score", v) => self.min_score = unit_real(name, v)?,
            ("tta_enabled", ParamValue::Bool(b)) => self.tta_enabled = *b,
            ("model_choice", ParamValue::Label(s)) => {
                self.model_choice = ModelChoice::from_name(s).ok_or_else(|| bad_value(name, value))?
            }
            _ => return Err(bad_value(name, value)),
        }
        Ok(())
    }
}

impl Tunable for SegPostParams {
    fn get(&self, name: &str) -> Option<ParamValue> {
        Some(match name {
            "softmax_threshold" => ParamValue::Real(self.softmax_threshold),
            "min_voxels" => ParamValue::Int(self.min_voxels as u64),
            "aggregation" => ParamValue::Label(self.aggregation.name().into()),
            _ => return None,
        })
    }

    fn set(&mut self, name: &str, value: &ParamValue) -> Result<()> {
        match (name, value) {
            ("softmax_threshold", v) => self.softmax_threshold = unit_real(name, v)?,
            ("min_voxels", ParamValue::Int(n)) => self.min_voxels = *n as usize,
            ("aggregation", ParamValue::Label(s)) => {
                self.aggregation = Aggregation::from_name(s).ok_or_else(|| bad_value(name, value))?
            }
            _ => return Err(bad_value(name, value)),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub value: ParamValue,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStep {
    pub parameter: String,
    pub candidates: Vec<CandidateScore>,
    pub chosen: ParamValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport<P> {
    pub initial: P,
    pub chosen: P,
    pub steps: Vec<SweepStep>,
    /// Objective at initialization followed by the objective after each step.
    pub objective_trace: Vec<f64>,
}

/// One candidate list per parameter, swept in the given order.
pub type Grids = Vec<(String, Vec<ParamValue>)>;

/// Coordinate-wise sweep: each parameter in turn takes the candidate with the
/// best objective while the others stay fixed. A candidate must be strictly
/// better than the current value to replace it.
pub fn sweep_sequential<P, F>(init: &P, grids: &Grids, objective: F) -> Result<SweepReport<P>>
where
    P: Tunable,
    F: Fn(&P) -> Result<f64> + Sync,
{
    let mut current = init.clone();
    let mut best = objective(&current)?;
    let mut trace = vec![best];
    let mut steps = Vec::with_capacity(grids.len());
    for (name, candidates) in grids {
        let current_value = current
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        let scored: Vec<CandidateScore> = candidates
            .par_iter()
            .map(|v| {
                let objective = if *v == current_value {
                    best
                } else {
                    let mut p = current.clone();
                    p.set(name, v)?;
                    objective(&p)?
                };
                Ok(CandidateScore {
                    value: v.clone(),
                    objective,
                })
            })
            .collect::<Result<_>>()?;
        let mut chosen = current_value;
        for c in &scored {
            if c.objective > best {
                best = c.objective;
                chosen = c.value.clone();
            }
        }
        current.set(name, &chosen)?;
        trace.push(best);
        steps.push(SweepStep {
            parameter: name.clone(),
            candidates: scored,
            chosen,
        });
    }
    Ok(SweepReport {
        initial: init.clone(),
        chosen: current,
        steps,
        objective_trace: trace,
    })
}

/// Lowres only wins when it is present and strictly better.
pub fn select_model(fullres_map: f64, lowres_map: Option<f64>) -> ModelChoice {
    match lowres_map {
        Some(l) if l > fullres_map => ModelChoice::Lowres,
        _ => ModelChoice::Fullres,
    }
}

fn reals(values: &[f64]) -> Vec<ParamValue> {
    values.iter().map(|&v| ParamValue::Real(v)).collect()
}

/// Default candidate lists in sweep order. Model choice is only swept when
/// lowres predictions exist.
pub fn default_grids(lowres_available: bool) -> Grids {
    let models = if lowres_available {
        vec!["fullres", "lowres"]
    } else {
        vec!["fullres"]
    };
    vec![
        (
            "model_choice".into(),
            models.into_iter().map(|m| ParamValue::Label(m.into())).collect(),
        ),
        ("nms_iou".into(), reals(&[0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])),
        ("wbc_iou".into(), reals(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])),
        ("min_score".into(), reals(&[0.0, 0.05, 0.1, 0.2, 0.3])),
        ("tta_enabled".into(), vec![ParamValue::Bool(true), ParamValue::Bool(false)]),
    ]
}

/// Raw validation predictions per model configuration plus gt.
#[derive(Debug, Clone, Default)]
pub struct ValidationSet {
    pub predictions: BTreeMap<ModelChoice, Vec<RawCasePredictions>>,
    pub gt: BTreeMap<String, Vec<BoundingBox>>,
    pub num_classes: usize,
}

impl ValidationSet {
    pub fn consolidate(&self, params: &EmpiricalParams) -> Result<BTreeMap<String, Vec<BoundingBox>>> {
        let cases = self
            .predictions
            .get(&params.model_choice)
            .ok_or_else(|| Error::MissingArtifact(format!("{} validation predictions", params.model_choice.name())))?;
        let cp = params.consolidate_params();
        cases
            .par_iter()
            .map(|c| Ok((c.case_id.clone(), c.consolidate(&cp, params.tta_enabled)?)))
            .collect()
    }

    /// Validation mAP@0.1 after consolidating with `params`.
    pub fn objective(&self, params: &EmpiricalParams) -> Result<f64> {
        Ok(map_at_default(&self.consolidate(params)?, &self.gt, self.num_classes))
    }

    pub fn sweep(&self, init: &EmpiricalParams, grids: &Grids) -> Result<SweepReport<EmpiricalParams>> {
        if self.predictions.values().all(Vec::is_empty) {
            return Err(Error::EmptyInput("validation set has no cases".into()));
        }
        sweep_sequential(init, grids, |p| self.objective(p))
    }
}

/// Candidate lists for the segmentation baseline's post-processing sweep.
pub fn seg_post_grids() -> Grids {
    vec![
        ("softmax_threshold".into(), reals(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])),
        (
            "min_voxels".into(),
            [0u64, 5, 10, 20, 50, 100].into_iter().map(ParamValue::Int).collect(),
        ),
        (
            "aggregation".into(),
            Aggregation::ALL.iter().map(|a| ParamValue::Label(a.name().into())).collect(),
        ),
    ]
}

/// Sweeps segmentation post-processing on validation softmax volumes,
/// starting from the plain argmax configuration.
pub fn tune_seg_postprocessing(
    softmax: &BTreeMap<String, SoftmaxVolume>,
    gt: &BTreeMap<String, Vec<BoundingBox>>,
    num_classes: usize,
    grids: &Grids,
) -> Result<SweepReport<SegPostParams>> {
    if softmax.is_empty() {
        return Err(Error::EmptyInput("no validation softmax volumes".into()));
    }
    sweep_sequential(&SegPostParams::basic(), grids, |p| {
        let preds = softmax
            .par_iter()
            .map(|(id, sm)| Ok((id.clone(), instances_from_softmax(sm, p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(map_at_default(&preds, gt, num_classes))
    })
}
