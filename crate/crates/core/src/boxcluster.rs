//! Test-time box consolidation: sliding-window tiling, patch-center
//! weighting, non-maximum suppression and weighted box clustering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::BoundingBox;
use crate::error::{Error, Result};

pub const DEFAULT_OVERLAP: f64 = 0.5;
/// Floor of the triangular patch-center window.
pub const CENTER_WEIGHT_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub dims: [usize; 3],
    pub patch_size: [usize; 3],
    pub overlap_fraction: f64,
    /// Patch start voxels, x-fastest over the per-axis starts. The index
    /// into this list is the patch id.
    pub origins: Vec<[i64; 3]>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Half-open bounds of patch `id`.
    pub fn bounds(&self, id: usize) -> ([f64; 3], [f64; 3]) {
        let o = self.origins[id];
        let lo = o.map(|v| v as f64);
        let hi = [0, 1, 2].map(|a| (o[a] + self.patch_size[a] as i64) as f64);
        (lo, hi)
    }
}

fn axis_starts(dim: usize, patch: usize, overlap: f64) -> Vec<i64> {
    if dim <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = dim - patch;
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        starts.push(s.min(last) as i64);
        if s + patch >= dim {
            break;
        }
        s += stride;
    }
    starts.dedup();
    starts
}

/// Sliding-window origins: consecutive starts differ by
/// `floor(patch·(1 − overlap))` and the last start is clamped to
/// `dims − patch`. Axes shorter than the patch are treated as zero-padded
/// up to the patch size and get a single start at 0.
pub fn tile_patches(dims: [usize; 3], patch_size: [usize; 3], overlap: f64) -> Result<PatchGrid> {
    if patch_size.iter().any(|&p| p == 0) {
        return Err(Error::Invalid(format!("non-positive patch size {patch_size:?}")));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Invalid(format!("non-positive volume dims {dims:?}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Invalid(format!("overlap {overlap} outside [0, 1)")));
    }
    let starts: Vec<Vec<i64>> = (0..3).map(|a| axis_starts(dims[a], patch_size[a], overlap)).collect();
    let mut origins = Vec::with_capacity(starts.iter().map(Vec::len).product());
    for &z in &starts[2] {
        for &y in &starts[1] {
            for &x in &starts[0] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(PatchGrid {
        dims,
        patch_size,
        overlap_fraction: overlap,
        origins,
    })
}

/// Separable triangular window, 1 at the patch midpoint and falling linearly
/// to the border, floored at [`CENTER_WEIGHT_FLOOR`] per axis.
pub fn patch_center_weight(box_center: [f64; 3], patch_origin: [i64; 3], patch_size: [usize; 3]) -> Result<f64> {
    let mut w = 1.0;
    for a in 0..3 {
        let lo = patch_origin[a] as f64;
        let half = patch_size[a] as f64 / 2.0;
        let c = box_center[a];
        if !(c >= lo && c <= lo + 2.0 * half) {
            return Err(Error::CenterOutsidePatch {
                center: box_center,
                origin: patch_origin,
                size: patch_size,
            });
        }
        let wa = 1.0 - (c - (lo + half)).abs() / half;
        w *= wa.clamp(CENTER_WEIGHT_FLOOR, 1.0);
    }
    Ok(w)
}

/// Greedy NMS over arbitrary ranking keys. Returns kept indices in ranking
/// order (key descending, ties by lower index). A box is dropped when its IoU
/// with an already kept box exceeds `iou_threshold`.
pub fn nms_indices(boxes: &[BoundingBox], keys: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), keys.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| keys[j].total_cmp(&keys[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Class-agnostic greedy non-maximum suppression ranked by score.
pub fn nms(dets: &[BoundingBox], iou_threshold: f64) -> Vec<BoundingBox> {
    let keys: Vec<f64> = dets.iter().map(BoundingBox::score_or_zero).collect();
    nms_indices(dets, &keys, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Source {
    pub model: u32,
    pub patch: usize,
    pub tta: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDetection {
    pub bbox: BoundingBox,
    pub patch_weight: f64,
    pub source: Source,
}

/// Merges overlapping detections into one box per cluster.
///
/// The highest-scoring unassigned detection seeds a cluster and absorbs every
/// unassigned detection with IoU above `iou_threshold`. With member weights
/// `w = patch_weight · IoU(seed, member)`, the merged coordinates are the
/// weighted mean of member coordinates and the score is the weighted mean
/// score times `min(1, members / expected_sources)`.
pub fn weighted_box_clustering(dets: &[WeightedDetection], iou_threshold: f64, expected_sources: usize) -> Vec<BoundingBox> {
    let expected = expected_sources.max(1) as f64;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .bbox
            .score_or_zero()
            .total_cmp(&dets[i].bbox.score_or_zero())
            .then(i.cmp(&j))
    });
    let mut assigned = vec![false; dets.len()];
    let mut out = Vec::new();
    for (pos, &seed) in order.iter().enumerate() {
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let seed_box = &dets[seed].bbox;
        let mut members = vec![(seed, 1.0)];
        for &j in &order[pos + 1..] {
            if assigned[j] {
                continue;
            }
            let iou = seed_box.iou(&dets[j].bbox);
            if iou > iou_threshold {
                assigned[j] = true;
                members.push((j, iou));
            }
        }

        let vote = (members.len() as f64 / expected).min(1.0);
        if members.len() == 1 {
            let mut single = seed_box.clone();
            single.score = Some(seed_box.score_or_zero() * vote);
            single.instance_id = None;
            out.push(single);
            continue;
        }

        let mut wsum = 0.0;
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        let mut score = 0.0;
        for &(j, iou) in &members {
            let d = &dets[j];
            let w = d.patch_weight * iou;
            wsum += w;
            score += w * d.bbox.score_or_zero();
            for a in 0..3 {
                min[a] += w * d.bbox.min[a];
                max[a] += w * d.bbox.max[a];
            }
        }
        // clamp to the member envelope; weighted means can drift by an ulp
        let envelope = |f: &dyn Fn(&BoundingBox) -> f64| {
            members.iter().map(|&(j, _)| f(&dets[j].bbox)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let mut merged = seed_box.clone();
        for a in 0..3 {
            let (lo, hi) = envelope(&|b| b.min[a]);
            merged.min[a] = (min[a] / wsum).clamp(lo, hi);
            let (lo, hi) = envelope(&|b| b.max[a]);
            merged.max[a] = (max[a] / wsum).clamp(lo, hi);
        }
        let (lo, hi) = envelope(&|b| b.score_or_zero());
        merged.score = Some((score / wsum).clamp(lo, hi) * vote);
        merged.instance_id = None;
        out.push(merged);
    }
    out
}

/// Raw per-patch predictions of one model (or one fold model) under one
/// test-time augmentation, in global voxel coordinates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelStream {
    pub model: u32,
    pub tta: u32,
    pub patches: BTreeMap<usize, Vec<BoundingBox>>,
}

/// Everything needed to consolidate one case: the tiling and every stream's
/// per-patch detections. This is the on-disk raw prediction schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCasePredictions {
    pub case_id: String,
    pub grid: PatchGrid,
    pub streams: Vec<ModelStream>,
}

impl RawCasePredictions {
    pub fn consolidate(&self, params: &ConsolidateParams, tta_enabled: bool) -> Result<Vec<BoundingBox>> {
        if tta_enabled {
            consolidate_case(&self.streams, &self.grid, params)
        } else {
            let plain: Vec<ModelStream> = self.streams.iter().filter(|s| s.tta == 0).cloned().collect();
            consolidate_case(&plain, &self.grid, params)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidateParams {
    pub nms_iou: f64,
    pub wbc_iou: f64,
    pub min_score: f64,
}

impl Default for ConsolidateParams {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            wbc_iou: 0.3,
            min_score: 0.0,
        }
    }
}

/// Center-weighted NMS of one stream across all of its patches, per class.
pub fn suppress_stream(stream: &ModelStream, grid: &PatchGrid, nms_iou: f64) -> Result<Vec<WeightedDetection>> {
    let mut weighted = Vec::new();
    for (&patch, dets) in &stream.patches {
        if patch >= grid.len() {
            return Err(Error::InconsistentGrid(format!(
                "model {} references patch {patch} but the grid has {} patches",
                stream.model,
                grid.len()
            )));
        }
        let origin = grid.origins[patch];
        for d in dets {
            let w = patch_center_weight(d.center(), origin, grid.patch_size)?;
            weighted.push(WeightedDetection {
                bbox: d.clone(),
                patch_weight: w,
                source: Source {
                    model: stream.model,
                    patch,
                    tta: stream.tta,
                },
            });
        }
    }

    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, d) in weighted.iter().enumerate() {
        by_class.entry(d.bbox.class_id).or_default().push(i);
    }
    let mut kept = Vec::new();
    for idx in by_class.values() {
        let boxes: Vec<BoundingBox> = idx.iter().map(|&i| weighted[i].bbox.clone()).collect();
        let keys: Vec<f64> = idx
            .iter()
            .map(|&i| weighted[i].bbox.score_or_zero() * weighted[i].patch_weight)
            .collect();
        kept.extend(nms_indices(&boxes, &keys, nms_iou).into_iter().map(|k| idx[k]));
    }
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| weighted[i].clone()).collect())
}

/// Consolidates one case: center-weighted NMS inside every stream, then
/// weighted box clustering across streams (one expected vote per stream),
/// then the `min_score` cut. Output is sorted by score, descending.
pub fn consolidate_case(streams: &[ModelStream], grid: &PatchGrid, params: &ConsolidateParams) -> Result<Vec<BoundingBox>> {
    let mut ordered: Vec<&ModelStream> = streams.iter().collect();
    ordered.sort_by_key(|s| (s.model, s.tta));
    if ordered.windows(2).any(|w| (w[0].model, w[0].tta) == (w[1].model, w[1].tta)) {
        return Err(Error::InconsistentGrid("duplicate (model, tta) stream".into()));
    }

    let mut pooled: Vec<WeightedDetection> = Vec::new();
    for s in &ordered {
        pooled.extend(suppress_stream(s, grid, params.nms_iou)?);
    }

    let expected = ordered.len().max(1);
    let mut by_class: BTreeMap<u32, Vec<WeightedDetection>> = BTreeMap::new();
    for d in pooled {
        by_class.entry(d.bbox.class_id).or_default().push(d);
    }
    let mut out: Vec<BoundingBox> = by_class
        .values()
        .flat_map(|dets| weighted_box_clustering(dets, params.wbc_iou, expected))
        .filter(|b| b.score_or_zero() >= params.min_score)
        .collect();
    out.sort_by(|a, b| {
        b.score_or_zero()
            .total_cmp(&a.score_or_zero())
            .then(a.class_id.cmp(&b.class_id))
            .then_with(|| a.min.partial_cmp(&b.min).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(out)
}
