//! Rule-based parameters: target spacing, network topology, low-resolution
//! trigger and anchor fitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::BoundingBox;
use crate::error::{Error, Result};
use crate::fingerprint::DatasetFingerprint;
use crate::stats::nearest_rank;

pub const BATCH_SIZE: usize = 4;
pub const DEFAULT_VOXEL_BUDGET: u64 = 128 * 128 * 128;
pub const MAX_POOLS_PER_AXIS: usize = 6;
pub const MIN_FEATURE_EXTENT: usize = 4;
pub const DEFAULT_ANCHOR_SWEEPS: usize = 3;
pub const ANCHORS_PER_POSITION: usize = 27;

/// Axis spacing above this multiple of the finest p50 spacing falls back to p10.
const TARGET_ANISOTROPY: f64 = 3.0;
/// Axes coarser than this multiple of the finest current spacing are neither
/// pooled nor convolved (kernel 1) at that level.
const POOL_ANISOTROPY: f64 = 2.0;
const LOWRES_MIN_COVERAGE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyPlan {
    pub target_spacing_mm: [f64; 3],
    pub patch_size: [usize; 3],
    pub num_pool_per_axis: [usize; 3],
    /// One entry per pooling operation.
    pub pool_strides: Vec<[usize; 3]>,
    /// One entry per resolution level (`pool_strides.len() + 1`).
    pub kernel_plan: Vec<[usize; 3]>,
    pub batch_size: usize,
    pub num_levels: usize,
}

impl TopologyPlan {
    pub fn patch_voxels(&self) -> u64 {
        self.patch_size.iter().map(|&p| p as u64).product()
    }

    pub fn deepest_extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.patch_size[a] >> self.num_pool_per_axis[a])
    }

    /// Checks every structural invariant of a topology.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for a in 0..3 {
            let p = self.num_pool_per_axis[a];
            if p > MAX_POOLS_PER_AXIS {
                return Err(format!("axis {a}: {p} pools"));
            }
            if self.patch_size[a] % (1 << p) != 0 {
                return Err(format!("axis {a}: patch {} not divisible by 2^{p}", self.patch_size[a]));
            }
            if self.patch_size[a] >> p < MIN_FEATURE_EXTENT {
                return Err(format!("axis {a}: deepest extent {} < 4", self.patch_size[a] >> p));
            }
            let counted = self.pool_strides.iter().filter(|s| s[a] == 2).count();
            if counted != p {
                return Err(format!("axis {a}: strides pool {counted} times, expected {p}"));
            }
        }
        if self.batch_size != BATCH_SIZE {
            return Err(format!("batch size {}", self.batch_size));
        }
        if self.kernel_plan.len() != self.num_levels || self.pool_strides.len() + 1 != self.num_levels {
            return Err("level count mismatch".into());
        }
        Ok(())
    }
}

/// Rule-based target spacing: per-axis p50, except that an axis whose p50
/// exceeds 3× the finest p50 uses its p10.
pub fn target_spacing(fp: &DatasetFingerprint) -> [f64; 3] {
    let p50 = fp.p50_spacing();
    let finest = p50.iter().cloned().fold(f64::INFINITY, f64::min);
    [0, 1, 2].map(|a| {
        if p50[a] > TARGET_ANISOTROPY * finest {
            fp.spacing_percentiles[a].p10
        } else {
            p50[a]
        }
    })
}

/// Median image shape after resampling to `spacing`.
pub fn median_resampled_shape(fp: &DatasetFingerprint, spacing: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| ((fp.median_extent_mm[a] / spacing[a]).round() as usize).max(1))
}

struct PoolSchedule {
    pools: [usize; 3],
    strides: Vec<[usize; 3]>,
    kernels: Vec<[usize; 3]>,
}

fn pool_schedule(patch: [usize; 3], spacing: [f64; 3]) -> PoolSchedule {
    let mut extent = patch.map(|p| p as f64);
    let mut sp = spacing;
    let mut pools = [0usize; 3];
    let mut strides = Vec::new();
    let mut kernels = Vec::new();
    loop {
        let finest = sp.iter().cloned().fold(f64::INFINITY, f64::min);
        let isotropic = sp.map(|s| s <= POOL_ANISOTROPY * finest);
        kernels.push(isotropic.map(|iso| if iso { 3 } else { 1 }));
        let pool = [0, 1, 2].map(|a| {
            isotropic[a] && extent[a] >= (2 * MIN_FEATURE_EXTENT) as f64 && pools[a] < MAX_POOLS_PER_AXIS
        });
        if !pool.iter().any(|&p| p) {
            break;
        }
        strides.push(pool.map(|p| if p { 2 } else { 1 }));
        for a in 0..3 {
            if pool[a] {
                pools[a] += 1;
                extent[a] /= 2.0;
                sp[a] *= 2.0;
            }
        }
    }
    PoolSchedule { pools, strides, kernels }
}

/// Plans the topology at the rule-based target spacing.
pub fn plan_topology(fp: &DatasetFingerprint, voxel_budget: u64) -> Result<TopologyPlan> {
    plan_topology_at(fp, target_spacing(fp), voxel_budget)
}

/// Iterative patch/topology planning at an explicit spacing.
///
/// The patch starts at the median resampled shape (at least 4 per axis). While
/// it exceeds the voxel budget, the axis that is largest relative to the
/// median shape is halved (ties: larger physical extent, then lower axis).
/// After each step the patch is rounded down to a multiple of `2^pools`.
pub fn plan_topology_at(fp: &DatasetFingerprint, spacing: [f64; 3], voxel_budget: u64) -> Result<TopologyPlan> {
    let min_patch = MIN_FEATURE_EXTENT as u64;
    if voxel_budget < min_patch.pow(3) {
        return Err(Error::BudgetTooSmall(voxel_budget));
    }
    let median_shape = median_resampled_shape(fp, spacing).map(|s| s.max(MIN_FEATURE_EXTENT));
    let mut patch = median_shape;
    let schedule = loop {
        let sched = pool_schedule(patch, spacing);
        for a in 0..3 {
            let unit = 1usize << sched.pools[a];
            patch[a] = patch[a] / unit * unit;
        }
        let voxels: u64 = patch.iter().map(|&p| p as u64).product();
        if voxels <= voxel_budget {
            break pool_schedule(patch, spacing);
        }
        let axis = (0..3)
            .filter(|&a| patch[a] > MIN_FEATURE_EXTENT)
            .max_by(|&a, &b| {
                let ra = patch[a] as f64 / median_shape[a] as f64;
                let rb = patch[b] as f64 / median_shape[b] as f64;
                ra.total_cmp(&rb)
                    .then((patch[a] as f64 * spacing[a]).total_cmp(&(patch[b] as f64 * spacing[b])))
                    .then(b.cmp(&a))
            })
            .ok_or(Error::BudgetTooSmall(voxel_budget))?;
        patch[axis] = (patch[axis] / 2).max(MIN_FEATURE_EXTENT);
    };
    let num_levels = schedule.kernels.len();
    Ok(TopologyPlan {
        target_spacing_mm: spacing,
        patch_size: patch,
        num_pool_per_axis: schedule.pools,
        pool_strides: schedule.strides,
        kernel_plan: schedule.kernels,
        batch_size: BATCH_SIZE,
        num_levels,
    })
}

/// Whether an additional low-resolution configuration is needed: the patch
/// covers under 25% of the median resampled image, or the p99 object extent
/// exceeds the patch along some axis.
pub fn lowres_trigger(fp: &DatasetFingerprint, topo: &TopologyPlan) -> bool {
    let shape = median_resampled_shape(fp, topo.target_spacing_mm);
    let image_voxels: f64 = shape.iter().map(|&s| s as f64).product();
    if (topo.patch_voxels() as f64) < LOWRES_MIN_COVERAGE * image_voxels {
        return true;
    }
    match &fp.object_extent_percentiles_mm {
        Some(ext) => (0..3).any(|a| ext[a].p99 / topo.target_spacing_mm[a] > topo.patch_size[a] as f64),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPlan {
    /// Three ascending sizes per axis, in voxels at target spacing.
    pub sizes_per_axis: [[f64; 3]; 3],
    /// Cartesian product of the per-axis sizes, x-fastest.
    pub anchors: Vec<[f64; 3]>,
    pub level0_stride: usize,
    pub per_level_scale: f64,
    /// Mean best-anchor IoU over the fitting boxes, after each sweep
    /// (first entry: initialization).
    pub objective_trace: Vec<f64>,
}

impl AnchorPlan {
    pub fn from_sizes(mut sizes_per_axis: [[f64; 3]; 3], level0_stride: usize) -> Self {
        for axis in sizes_per_axis.iter_mut() {
            axis.sort_by(f64::total_cmp);
        }
        AnchorPlan {
            anchors: cartesian(&sizes_per_axis),
            sizes_per_axis,
            level0_stride,
            per_level_scale: 2.0,
            objective_trace: Vec::new(),
        }
    }

    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Anchor sizes at pyramid level `level` (scaled by `2^level`).
    pub fn sizes_at_level(&self, level: usize) -> Vec<[f64; 3]> {
        let f = self.per_level_scale.powi(level as i32);
        self.anchors.iter().map(|s| s.map(|v| v * f)).collect()
    }
}

fn cartesian(sizes: &[[f64; 3]; 3]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(ANCHORS_PER_POSITION);
    for &z in &sizes[2] {
        for &y in &sizes[1] {
            for &x in &sizes[0] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// IoU of two boxes sharing the same center.
pub fn centered_iou(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]) * a[2].min(b[2]);
    let union = a[0] * a[1] * a[2] + b[0] * b[1] * b[2] - inter;
    inter / union
}

/// Mean over `extents` of the best centered IoU against the 27 anchors formed
/// from `sizes`.
pub fn anchor_objective(sizes: &[[f64; 3]; 3], extents: &[[f64; 3]]) -> f64 {
    let anchors = cartesian(sizes);
    let total: f64 = extents
        .iter()
        .map(|e| anchors.iter().map(|&a| centered_iou(a, *e)).fold(0.0, f64::max))
        .sum();
    total / extents.len() as f64
}

/// Multiplicative step ladder `1.25^(1/2^k)`; each rung is tried in both
/// directions (×s and ×1/s) until it stops improving.
const STEP_LADDER: [f64; 5] = [1.25, 1.118_033_988_749_895, 1.057_371_263_440_564, 1.028_286_989_471_946_8, 1.014_044_220_937_466_8];
const MAX_STEPS_PER_RUNG: usize = 64;

/// Fits three sizes per axis maximizing the mean best-anchor IoU of
/// center-aligned boxes, by coordinate descent from a p25/p50/p75
/// initialization. `sweeps` full passes are made over the nine sizes, in an
/// order shuffled by `seed`.
pub fn optimize_anchors(train_boxes: &[BoundingBox], sweeps: usize, seed: u64) -> Result<AnchorPlan> {
    if train_boxes.is_empty() {
        return Err(Error::NoTrainingObjects);
    }
    let extents: Vec<[f64; 3]> = train_boxes.iter().map(BoundingBox::size).collect();
    let mut sizes = [0, 1, 2].map(|a| {
        let mut v: Vec<f64> = extents.iter().map(|e| e[a]).collect();
        v.sort_by(f64::total_cmp);
        [nearest_rank(&v, 0.25), nearest_rank(&v, 0.50), nearest_rank(&v, 0.75)]
    });

    let mut best = anchor_objective(&sizes, &extents);
    let mut trace = vec![best];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(usize, usize)> = (0..3).flat_map(|a| (0..3).map(move |j| (a, j))).collect();

    for _ in 0..sweeps {
        coords.shuffle(&mut rng);
        for &(axis, j) in &coords {
            for &step in &STEP_LADDER {
                for _ in 0..MAX_STEPS_PER_RUNG {
                    let current = sizes[axis][j];
                    let mut improved = false;
                    for cand in [current * step, current / step] {
                        sizes[axis][j] = cand;
                        let value = anchor_objective(&sizes, &extents);
                        if value > best {
                            best = value;
                            improved = true;
                            break;
                        }
                    }
                    if !improved {
                        sizes[axis][j] = current;
                        break;
                    }
                }
            }
        }
        trace.push(best);
    }

    let mut plan = AnchorPlan::from_sizes(sizes, 1);
    plan.objective_trace = trace;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub topology: TopologyPlan,
    pub anchors: AnchorPlan,
    pub lowres_triggered: bool,
    pub lowres_topology: Option<TopologyPlan>,
}

/// A training box together with the voxel spacing of the case it came from.
#[derive(Debug, Clone)]
pub struct TrainBox {
    pub bbox: BoundingBox,
    pub spacing_mm: [f64; 3],
}

impl TrainBox {
    /// The box re-expressed in voxels of `target` spacing.
    pub fn at_spacing(&self, target: [f64; 3]) -> BoundingBox {
        let mut b = self.bbox.clone();
        for a in 0..3 {
            let f = self.spacing_mm[a] / target[a];
            b.min[a] *= f;
            b.max[a] *= f;
        }
        b
    }
}

/// Highest-resolution stride the detection head operates on: `2^min(2, p)`
/// where `p` is the smallest per-axis pool count.
pub fn head_level0_stride(topo: &TopologyPlan) -> usize {
    let p = *topo.num_pool_per_axis.iter().min().unwrap_or(&0);
    1 << p.min(2)
}

/// Composes target spacing → topology → low-res trigger → anchor fitting.
pub fn build_plan(
    fp: &DatasetFingerprint,
    train_boxes: &[TrainBox],
    voxel_budget: u64,
    seed: u64,
) -> Result<PipelinePlan> {
    let topology = plan_topology(fp, voxel_budget)?;
    let lowres_triggered = lowres_trigger(fp, &topology);
    let target = topology.target_spacing_mm;
    let boxes: Vec<BoundingBox> = train_boxes.iter().map(|b| b.at_spacing(target)).collect();
    let mut anchors = optimize_anchors(&boxes, DEFAULT_ANCHOR_SWEEPS, seed)?;
    anchors.level0_stride = head_level0_stride(&topology);

    let lowres_topology = if lowres_triggered {
        let spacing = [0, 1, 2].map(|a| {
            let covering = fp.median_extent_mm[a] / topology.patch_size[a] as f64;
            (2.0 * target[a]).min(covering.max(target[a]))
        });
        Some(plan_topology_at(fp, spacing, voxel_budget)?)
    } else {
        None
    };

    Ok(PipelinePlan {
        topology,
        anchors,
        lowres_triggered,
        lowres_topology,
    })
}
