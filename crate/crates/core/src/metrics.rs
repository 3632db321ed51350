//! Detection evaluation: greedy matching, all-points AP / mAP, FROC and CPM.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataio::BoundingBox;
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.1;
/// False positives per scan at which FROC sensitivities are reported.
pub const FROC_THRESHOLDS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Iou,
    /// Prediction center strictly within the gt radius (half its largest
    /// edge, in voxels).
    CenterRadius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredMatch {
    pub case: usize,
    pub index: usize,
    pub class_id: u32,
    pub score: f64,
    pub gt: Option<usize>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub num_gt: usize,
    pub num_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// In processing order: score descending, then case, then box index.
    pub preds: Vec<PredMatch>,
    pub gt_matched: Vec<Vec<bool>>,
    pub gt_classes: Vec<Vec<u32>>,
    pub cases: Vec<CaseSummary>,
}

impl MatchResult {
    pub fn num_gt(&self) -> usize {
        self.gt_classes.iter().map(Vec::len).sum()
    }

    pub fn num_gt_of(&self, class_id: u32) -> usize {
        self.gt_classes.iter().flatten().filter(|&&c| c == class_id).count()
    }
}

fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.center(), b.center());
    (0..3).map(|i| (ca[i] - cb[i]).powi(2)).sum::<f64>().sqrt()
}

fn gt_radius(g: &BoundingBox) -> f64 {
    g.size().iter().cloned().fold(0.0, f64::max) / 2.0
}

/// Greedy one-to-one matching over all cases. Cases are the union of both
/// maps' keys. A prediction only matches gt of its own class.
pub fn match_greedy(
    preds: &BTreeMap<String, Vec<BoundingBox>>,
    gt: &BTreeMap<String, Vec<BoundingBox>>,
    iou_threshold: f64,
    criterion: Criterion,
) -> MatchResult {
    let ids: BTreeSet<&String> = preds.keys().chain(gt.keys()).collect();
    let empty = Vec::new();
    let cases: Vec<(&String, &Vec<BoundingBox>, &Vec<BoundingBox>)> = ids
        .into_iter()
        .map(|id| (id, preds.get(id).unwrap_or(&empty), gt.get(id).unwrap_or(&empty)))
        .collect();

    let mut order: Vec<(usize, usize, f64)> = Vec::new();
    for (c, (_, p, _)) in cases.iter().enumerate() {
        for (i, b) in p.iter().enumerate() {
            order.push((c, i, b.score_or_zero()));
        }
    }
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut gt_matched: Vec<Vec<bool>> = cases.iter().map(|(_, _, g)| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (c, i, score) in order {
        let p = &cases[c].1[i];
        let mut best: Option<(usize, f64, f64)> = None; // (gt, iou, rank key)
        for (j, g) in cases[c].2.iter().enumerate() {
            if gt_matched[c][j] || g.class_id != p.class_id {
                continue;
            }
            let iou = p.iou(g);
            let key = match criterion {
                Criterion::Iou if iou >= iou_threshold => iou,
                Criterion::CenterRadius => {
                    let d = center_distance(p, g);
                    if d < gt_radius(g) {
                        -d
                    } else {
                        continue;
                    }
                }
                _ => continue,
            };
            if best.is_none_or(|(_, _, k)| key > k) {
                best = Some((j, iou, key));
            }
        }
        if let Some((j, _, _)) = best {
            gt_matched[c][j] = true;
        }
        out.push(PredMatch {
            case: c,
            index: i,
            class_id: p.class_id,
            score,
            gt: best.map(|b| b.0),
            iou: best.map_or(0.0, |b| b.1),
        });
    }

    MatchResult {
        preds: out,
        gt_matched,
        gt_classes: cases.iter().map(|(_, _, g)| g.iter().map(|b| b.class_id).collect()).collect(),
        cases: cases
            .iter()
            .map(|(id, p, g)| CaseSummary {
                case_id: (*id).clone(),
                num_gt: g.len(),
                num_pred: p.len(),
            })
            .collect(),
    }
}

/// (tp, fp) cumulative counts at each distinct score cut, highest cut first.
fn cuts<'a>(preds: impl Iterator<Item = &'a PredMatch>) -> Vec<(f64, usize, usize)> {
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for p in preds {
        if p.gt.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        match out.last_mut() {
            Some(last) if last.0 == p.score => {
                last.1 = tp;
                last.2 = fp;
            }
            _ => out.push((p.score, tp, fp)),
        }
    }
    out
}

/// All-points interpolated AP for one class; `None` when the class has no gt.
pub fn average_precision(m: &MatchResult, class_id: u32) -> Option<f64> {
    let num_gt = m.num_gt_of(class_id);
    if num_gt == 0 {
        return None;
    }
    let pts = cuts(m.preds.iter().filter(|p| p.class_id == class_id));
    let recall: Vec<f64> = pts.iter().map(|&(_, tp, _)| tp as f64 / num_gt as f64).collect();
    let mut precision: Vec<f64> = pts.iter().map(|&(_, tp, fp)| tp as f64 / (tp + fp) as f64).collect();
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Per-class AP over classes `0..num_classes` and their mean over defined
/// classes.
pub fn mean_average_precision(m: &MatchResult, num_classes: usize) -> (BTreeMap<u32, Option<f64>>, Option<f64>) {
    let per_class: BTreeMap<u32, Option<f64>> =
        (0..num_classes as u32).map(|c| (c, average_precision(m, c))).collect();
    let defined: Vec<f64> = per_class.values().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per_class, mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub score: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityAt {
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub sensitivities_at: Vec<SensitivityAt>,
}

/// Class-pooled FROC curve. Each threshold reports the best sensitivity
/// reachable with at most that many false positives per scan.
pub fn froc_curve(m: &MatchResult, thresholds: &[f64]) -> Result<FrocCurve> {
    let num_gt = m.num_gt();
    if num_gt == 0 {
        return Err(Error::EmptyInput("FROC requires at least one ground-truth object".into()));
    }
    let scans = m.cases.len() as f64;
    let points: Vec<FrocPoint> = cuts(m.preds.iter())
        .into_iter()
        .map(|(score, tp, fp)| FrocPoint {
            score,
            fp_per_scan: fp as f64 / scans,
            sensitivity: tp as f64 / num_gt as f64,
        })
        .collect();
    let sensitivities_at = thresholds
        .iter()
        .map(|&t| SensitivityAt {
            fp_per_scan: t,
            sensitivity: points
                .iter()
                .filter(|p| p.fp_per_scan <= t)
                .map(|p| p.sensitivity)
                .fold(0.0, f64::max),
        })
        .collect();
    Ok(FrocCurve { points, sensitivities_at })
}

/// Mean sensitivity over the seven standard FP-per-scan rates.
pub fn cpm(sensitivities: &[f64]) -> Result<f64> {
    if sensitivities.len() != FROC_THRESHOLDS.len() {
        return Err(Error::Invalid(format!(
            "CPM needs {} sensitivities, got {}",
            FROC_THRESHOLDS.len(),
            sensitivities.len()
        )));
    }
    Ok(sensitivities.iter().sum::<f64>() / sensitivities.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub criterion: Criterion,
    pub iou_threshold: f64,
    pub num_cases: usize,
    pub num_gt: usize,
    pub num_pred: usize,
    pub num_tp: usize,
    /// `None` marks a class without ground truth.
    pub per_class_ap: BTreeMap<u32, Option<f64>>,
    pub map: Option<f64>,
    pub froc: Option<FrocCurve>,
    pub cpm: Option<f64>,
}

pub fn evaluate(
    preds: &BTreeMap<String, Vec<BoundingBox>>,
    gt: &BTreeMap<String, Vec<BoundingBox>>,
    num_classes: usize,
    iou_threshold: f64,
    criterion: Criterion,
) -> MetricsReport {
    let m = match_greedy(preds, gt, iou_threshold, criterion);
    let (per_class_ap, map) = mean_average_precision(&m, num_classes);
    let froc = froc_curve(&m, &FROC_THRESHOLDS).ok();
    let cpm = froc
        .as_ref()
        .and_then(|f| cpm(&f.sensitivities_at.iter().map(|s| s.sensitivity).collect::<Vec<_>>()).ok());
    MetricsReport {
        criterion,
        iou_threshold,
        num_cases: m.cases.len(),
        num_gt: m.num_gt(),
        num_pred: m.preds.len(),
        num_tp: m.preds.iter().filter(|p| p.gt.is_some()).count(),
        per_class_ap,
        map,
        froc,
        cpm,
    }
}

/// mAP at IoU 0.1, with undefined (no gt at all) mapped to 0.
pub fn map_at_default(
    preds: &BTreeMap<String, Vec<BoundingBox>>,
    gt: &BTreeMap<String, Vec<BoundingBox>>,
    num_classes: usize,
) -> f64 {
    let m = match_greedy(preds, gt, DEFAULT_IOU_THRESHOLD, Criterion::Iou);
    mean_average_precision(&m, num_classes).1.unwrap_or(0.0)
}
