//! Anchor grids and adaptive training sample selection without the
//! center-inside-box requirement.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataio::BoundingBox;
use crate::error::{Error, Result};
use crate::planner::{AnchorPlan, ANCHORS_PER_POSITION};

/// Slack on the `IoU ≥ mean + std` test so that candidate sets with identical
/// IoUs are not lost to summation rounding.
pub const THRESHOLD_EPS: f64 = 1e-12;

/// Regular anchor grid over one patch. Anchor centers at level `l` sit at
/// `origin + stride_l·(i + 0.5)` per axis; every position carries the same 27
/// sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub origin: [i64; 3],
    pub patch_size: [usize; 3],
    pub level_strides: Vec<usize>,
    pub sizes: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub id: usize,
    pub level: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Anchor {
    pub fn to_box(&self) -> BoundingBox {
        BoundingBox::centered(self.center, self.size, 0)
    }
}

impl AnchorGrid {
    pub fn new(origin: [i64; 3], patch_size: [usize; 3], level_strides: Vec<usize>, sizes: Vec<Vec<[f64; 3]>>) -> Result<Self> {
        if level_strides.is_empty() || level_strides.len() != sizes.len() {
            return Err(Error::Invalid("anchor grid needs one size set per level".into()));
        }
        for (l, (&stride, s)) in level_strides.iter().zip(&sizes).enumerate() {
            if s.len() != ANCHORS_PER_POSITION {
                return Err(Error::Invalid(format!("level {l}: {} anchors per position, expected 27", s.len())));
            }
            if stride == 0 || patch_size.iter().any(|&p| p < stride) {
                return Err(Error::Invalid(format!("level {l}: stride {stride} does not fit patch {patch_size:?}")));
            }
        }
        Ok(Self {
            origin,
            patch_size,
            level_strides,
            sizes,
        })
    }

    /// Grid for a fitted anchor plan with `num_levels` head levels starting
    /// at the plan's level-0 stride.
    pub fn from_plan(plan: &AnchorPlan, patch_size: [usize; 3], num_levels: usize) -> Result<Self> {
        let strides: Vec<usize> = (0..num_levels).map(|l| plan.level0_stride << l).collect();
        let sizes = (0..num_levels).map(|l| plan.sizes_at_level(l)).collect();
        Self::new([0; 3], patch_size, strides, sizes)
    }

    pub fn positions(&self, level: usize) -> [usize; 3] {
        let s = self.level_strides[level];
        self.patch_size.map(|p| p / s)
    }

    fn level_offset(&self, level: usize) -> usize {
        (0..level)
            .map(|l| self.positions(l).iter().product::<usize>() * ANCHORS_PER_POSITION)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.level_offset(self.level_strides.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn position_center(&self, level: usize, pos: usize) -> [f64; 3] {
        let n = self.positions(level);
        let idx = [pos % n[0], (pos / n[0]) % n[1], pos / (n[0] * n[1])];
        let s = self.level_strides[level] as f64;
        [0, 1, 2].map(|a| self.origin[a] as f64 + s * (idx[a] as f64 + 0.5))
    }

    /// All anchors, ordered by level, then position (x-fastest), then size.
    pub fn anchors(&self) -> Vec<Anchor> {
        let mut out = Vec::with_capacity(self.len());
        for level in 0..self.level_strides.len() {
            let npos: usize = self.positions(level).iter().product();
            for pos in 0..npos {
                let center = self.position_center(level, pos);
                for &size in &self.sizes[level] {
                    out.push(Anchor {
                        id: out.len(),
                        level,
                        center,
                        size,
                    });
                }
            }
        }
        out
    }

    pub fn anchor(&self, id: usize) -> Anchor {
        let mut rest = id;
        for level in 0..self.level_strides.len() {
            let count = self.positions(level).iter().product::<usize>() * ANCHORS_PER_POSITION;
            if rest < count {
                let pos = rest / ANCHORS_PER_POSITION;
                return Anchor {
                    id,
                    level,
                    center: self.position_center(level, pos),
                    size: self.sizes[level][rest % ANCHORS_PER_POSITION],
                };
            }
            rest -= count;
        }
        panic!("anchor id {id} out of range");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    /// Candidates per pyramid level.
    pub k: usize,
    /// Always `false`; kept so configurations state the rule explicitly.
    pub center_inside_required: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            k: 9,
            center_inside_required: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtMatch {
    /// Candidate anchor ids, ascending.
    pub candidates: Vec<usize>,
    pub threshold: f64,
    pub positives: BTreeSet<usize>,
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Assigns positive anchors to each ground-truth box: the `k` nearest
/// anchors per level (ties by id) form the candidates, and candidates whose
/// IoU reaches the mean plus population standard deviation of the candidate
/// IoUs become positives. Anchor centers need not lie inside the box.
pub fn atss_match(gt: &[BoundingBox], grid: &AnchorGrid, params: &MatchParams) -> Vec<GtMatch> {
    gt.iter().map(|g| match_one(g, grid, params.k)).collect()
}

fn match_one(g: &BoundingBox, grid: &AnchorGrid, k: usize) -> GtMatch {
    let gc = g.center();
    let mut candidates = Vec::new();
    for level in 0..grid.level_strides.len() {
        if k == 0 {
            break;
        }
        let npos: usize = grid.positions(level).iter().product();
        // all 27 anchors of a position share a distance and have consecutive
        // ids, so ordering positions by (distance, index) orders anchors by
        // (distance, id)
        let mut order: Vec<(f64, usize)> = (0..npos)
            .map(|p| (sq_dist(grid.position_center(level, p), gc), p))
            .collect();
        let needed = k.div_ceil(ANCHORS_PER_POSITION).min(npos);
        if needed < npos {
            order.select_nth_unstable_by(needed - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.truncate(needed);
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let offset = grid.level_offset(level);
        candidates.extend(
            order
                .iter()
                .flat_map(|&(_, p)| (0..ANCHORS_PER_POSITION).map(move |s| offset + p * ANCHORS_PER_POSITION + s))
                .take(k),
        );
    }
    candidates.sort_unstable();

    let ious: Vec<f64> = candidates.iter().map(|&id| grid.anchor(id).to_box().iou(g)).collect();
    let (mean, std) = crate::stats::mean_std(&ious);
    let threshold = mean + std;
    let positives = candidates
        .iter()
        .zip(&ious)
        .filter(|(_, &iou)| iou >= threshold - THRESHOLD_EPS)
        .map(|(&id, _)| id)
        .collect();
    GtMatch {
        candidates,
        threshold,
        positives,
    }
}

/// Per-class fraction of ground-truth boxes that receive at least one
/// positive anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_class: BTreeMap<u32, f64>,
    pub num_gt: usize,
    pub num_without_positive: usize,
}

pub fn coverage_report(gt: &[BoundingBox], matches: &[GtMatch]) -> CoverageReport {
    let mut totals: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (g, m) in gt.iter().zip(matches) {
        let e = totals.entry(g.class_id).or_default();
        e.0 += 1;
        if !m.positives.is_empty() {
            e.1 += 1;
        }
    }
    let num_without_positive = matches.iter().filter(|m| m.positives.is_empty()).count();
    CoverageReport {
        per_class: totals.into_iter().map(|(c, (n, hit))| (c, hit as f64 / n as f64)).collect(),
        num_gt: gt.len(),
        num_without_positive,
    }
}
