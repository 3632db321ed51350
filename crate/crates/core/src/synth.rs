//! Synthetic datasets and an oracle prediction provider that stands in for
//! trained detectors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::boxcluster::PatchGrid;
use crate::dataio::{
    load_dataset, write_case, write_dataset_index, BoundingBox, Case, DType, Dataset, LabelInfo, Split, Volume,
    VolumeHeader,
};
use crate::error::{Error, Result};
use crate::stats::derive_seed;

const PLACEMENT_ATTEMPTS: usize = 1000;
const FOREGROUND_INTENSITY: f32 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub num_cases: usize,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Inclusive range.
    pub objects_per_case: (usize, usize),
    /// Inclusive edge range in voxels, per axis.
    pub object_edge_range: [(usize, usize); 3],
    pub num_classes: usize,
    /// Probability that an object is rasterized as an inscribed ellipsoid
    /// rather than a full cuboid.
    pub sphere_fraction: f64,
    /// Trailing share of cases assigned to the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            num_cases: 20,
            dims: [64, 64, 64],
            spacing_mm: [1.0; 3],
            objects_per_case: (1, 4),
            object_edge_range: [(4, 16); 3],
            num_classes: 1,
            sphere_fraction: 0.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cases == 0 || self.num_classes == 0 {
            return Err(Error::Invalid("synthetic dataset needs ≥1 case and ≥1 class".into()));
        }
        if self.objects_per_case.0 > self.objects_per_case.1 {
            return Err(Error::Invalid("objects_per_case range is empty".into()));
        }
        for a in 0..3 {
            let (lo, hi) = self.object_edge_range[a];
            if lo == 0 || lo > hi {
                return Err(Error::Invalid(format!("edge range on axis {a} is empty")));
            }
            if hi > self.dims[a] {
                return Err(Error::CannotFit(format!("edge {hi} exceeds volume extent {} on axis {a}", self.dims[a])));
            }
        }
        if !(0.0..=1.0).contains(&self.sphere_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Invalid("fractions must lie in [0,1)".into()));
        }
        Ok(())
    }
}

fn gap_overlaps(a: &([usize; 3], [usize; 3]), b: &([usize; 3], [usize; 3])) -> bool {
    // one empty voxel is kept between objects so they never touch
    (0..3).all(|i| a.0[i] < b.1[i] + 1 && b.0[i] < a.1[i] + 1)
}

/// Rasterizes one case. Returns image, labels, instance classes and the
/// tight boxes of the rasterized objects.
#[allow(clippy::type_complexity)]
pub fn synthesize_case(
    cfg: &SynthConfig,
    index: usize,
) -> Result<(Volume<f32>, Volume<u16>, BTreeMap<u16, u32>, Vec<BoundingBox>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64]));
    let count = rng.random_range(cfg.objects_per_case.0..=cfg.objects_per_case.1);
    let mut placed: Vec<([usize; 3], [usize; 3])> = Vec::new();
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let edge: [usize; 3] = [0, 1, 2].map(|a| rng.random_range(cfg.object_edge_range[a].0..=cfg.object_edge_range[a].1));
            let lo: [usize; 3] = [0, 1, 2].map(|a| rng.random_range(0..=cfg.dims[a] - edge[a]));
            let cand = (lo, [0, 1, 2].map(|a| lo[a] + edge[a]));
            if placed.iter().all(|p| !gap_overlaps(p, &cand)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::CannotFit(format!(
                "case {index}: could not place {count} non-overlapping objects in {:?}",
                cfg.dims
            )));
        }
    }

    let mut labels = Volume::filled(cfg.dims, cfg.spacing_mm, 0u16);
    let mut table = BTreeMap::new();
    for (k, (lo, hi)) in placed.iter().enumerate() {
        let id = (k + 1) as u16;
        let class = rng.random_range(0..cfg.num_classes) as u32;
        let sphere = rng.random_bool(cfg.sphere_fraction);
        table.insert(id, class);
        let center = [0, 1, 2].map(|a| (lo[a] + hi[a]) as f64 / 2.0);
        let half = [0, 1, 2].map(|a| (hi[a] - lo[a]) as f64 / 2.0);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let inside = !sphere || {
                        let p = [x, y, z];
                        (0..3).map(|a| ((p[a] as f64 + 0.5 - center[a]) / half[a]).powi(2)).sum::<f64>() <= 1.0
                    };
                    if inside {
                        labels.set(x, y, z, id);
                    }
                }
            }
        }
    }

    // boxes are the tight bounds of what was actually rasterized
    let mut bounds: BTreeMap<u16, ([i64; 3], [i64; 3])> = BTreeMap::new();
    for (i, &v) in labels.data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let c = labels.coords(i).map(|c| c as i64);
        let e = bounds.entry(v).or_insert(([i64::MAX; 3], [i64::MIN; 3]));
        for a in 0..3 {
            e.0[a] = e.0[a].min(c[a]);
            e.1[a] = e.1[a].max(c[a] + 1);
        }
    }
    table.retain(|id, _| bounds.contains_key(id));
    let objects = bounds
        .iter()
        .map(|(&id, &(lo, hi))| BoundingBox::from_voxels(lo, hi, table[&id]).with_instance(id))
        .collect();

    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
    let image = Volume {
        dims: cfg.dims,
        spacing_mm: cfg.spacing_mm,
        data: labels
            .data
            .iter()
            .map(|&v| if v != 0 { FOREGROUND_INTENSITY } else { 0.0 } + noise.sample(&mut rng))
            .collect(),
    };
    Ok((image, labels, table, objects))
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Writes a synthetic dataset under `root` and loads it back.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, root: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let num_test = (cfg.num_cases as f64 * cfg.test_fraction).round() as usize;
    let mut cases = Vec::with_capacity(cfg.num_cases);
    for index in 0..cfg.num_cases {
        let (image, labels, table, objects) = synthesize_case(cfg, index)?;
        let header = VolumeHeader::new(cfg.dims, cfg.spacing_mm, DType::F32);
        let mut label_header = header.clone();
        label_header.dtype = DType::U16;
        let case = Case {
            id: case_id(index),
            split: if index >= cfg.num_cases - num_test { Split::Test } else { Split::Train },
            image: header,
            labels: Some(LabelInfo {
                header: label_header,
                instance_classes: table,
            }),
            objects,
        };
        write_case(root, &case, &image, Some(&labels))?;
        cases.push(case);
    }
    write_dataset_index(&Dataset {
        root: root.to_path_buf(),
        name: cfg.name.clone(),
        classes: (0..cfg.num_classes).map(|c| format!("class_{c}")).collect(),
        cases,
        exclusion_list: BTreeSet::new(),
    })?;
    load_dataset(root)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleNoise {
    pub center_jitter_voxels: f64,
    pub size_jitter_fraction: f64,
    pub fp_per_patch: f64,
    /// (mean, std) of true-positive scores.
    pub score_tp: (f64, f64),
    pub score_fp: (f64, f64),
    pub drop_rate: f64,
}

impl OracleNoise {
    /// Exact boxes, constant scores, no false positives, nothing dropped.
    pub fn zero() -> Self {
        Self {
            center_jitter_voxels: 0.0,
            size_jitter_fraction: 0.0,
            fp_per_patch: 0.0,
            score_tp: (0.9, 0.0),
            score_fp: (0.2, 0.0),
            drop_rate: 0.0,
        }
    }

    pub fn noisy() -> Self {
        Self {
            center_jitter_voxels: 1.0,
            size_jitter_fraction: 0.05,
            fp_per_patch: 0.5,
            score_tp: (0.8, 0.1),
            score_fp: (0.3, 0.15),
            drop_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            self.center_jitter_voxels,
            self.size_jitter_fraction,
            self.fp_per_patch,
            self.score_tp.1,
            self.score_fp.1,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invalid("noise rates and deviations must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Invalid("drop_rate must lie in [0,1]".into()));
        }
        Ok(())
    }
}

fn clamped_score(rng: &mut ChaCha8Rng, (mean, std): (f64, f64)) -> f64 {
    let v = if std > 0.0 {
        Normal::new(mean, std).expect("valid normal").sample(rng)
    } else {
        mean
    };
    v.clamp(0.0, 1.0)
}

fn jitter(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("valid normal").sample(rng)
    } else {
        0.0
    }
}

/// Jittered copy of a gt box, before clipping. Edges never drop below one
/// voxel.
pub fn jitter_box(rng: &mut ChaCha8Rng, gt: &BoundingBox, noise: &OracleNoise) -> BoundingBox {
    let c = gt.center();
    let s = gt.size();
    let center = [0, 1, 2].map(|a| c[a] + jitter(rng, noise.center_jitter_voxels));
    let size = [0, 1, 2].map(|a| (s[a] * (1.0 + jitter(rng, noise.size_jitter_fraction))).max(1.0));
    BoundingBox::centered(center, size, gt.class_id)
}

/// Simulated per-patch detections of one model for one case, in global voxel
/// coordinates. Each patch draws from its own stream seeded by
/// `(seed, patch)`.
pub fn oracle_predict_patches(
    gt: &[BoundingBox],
    grid: &PatchGrid,
    noise: &OracleNoise,
    num_classes: usize,
    seed: u64,
) -> BTreeMap<usize, Vec<BoundingBox>> {
    let (edge_lo, edge_hi) = if gt.is_empty() {
        (2.0, 8.0)
    } else {
        let edges = gt.iter().flat_map(|g| g.size());
        let lo = edges.clone().fold(f64::MAX, f64::min);
        (lo, edges.fold(lo, f64::max))
    };
    let mut out = BTreeMap::new();
    for patch in 0..grid.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[patch as u64]));
        let (lo, hi) = grid.bounds(patch);
        let patch_box = BoundingBox::new(lo, hi, 0);
        let mut dets = Vec::new();
        for g in gt {
            if g.intersection(&patch_box) <= 0.0 {
                continue;
            }
            let dropped = rng.random::<f64>() < noise.drop_rate;
            let b = jitter_box(&mut rng, g, noise);
            let score = clamped_score(&mut rng, noise.score_tp);
            if dropped {
                continue;
            }
            if let Some(b) = b.clipped(lo, hi) {
                dets.push(b.with_score(score));
            }
        }
        let num_fp = if noise.fp_per_patch > 0.0 {
            Poisson::new(noise.fp_per_patch).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..num_fp {
            let size = [0, 1, 2].map(|a| rng.random_range(edge_lo..=edge_hi).min(hi[a] - lo[a]));
            let min = [0, 1, 2].map(|a| lo[a] + rng.random::<f64>() * (hi[a] - lo[a] - size[a]));
            let class = rng.random_range(0..num_classes.max(1)) as u32;
            let b = BoundingBox::new(min, [0, 1, 2].map(|a| min[a] + size[a]), class);
            dets.push(b.with_score(clamped_score(&mut rng, noise.score_fp)));
        }
        if !dets.is_empty() {
            out.insert(patch, dets);
        }
    }
    out
}
