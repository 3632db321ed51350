//! Per-case statistics and the aggregated dataset fingerprint that drives
//! every rule-based planning decision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{BoundingBox, Case, Dataset, Volume};
use crate::error::{Error, Result};
use crate::stats::{mean_std, median, nearest_rank};

/// Upper bound on intensity samples kept per case.
pub const MAX_INTENSITY_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub p0_5: f64,
    pub p99_5: f64,
}

impl IntensityStats {
    /// Statistics of a sample; the sample is sorted in place.
    fn from_samples(samples: &mut [f32]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f32::total_cmp);
        let values: Vec<f64> = samples.iter().map(|&v| f64::from(v)).collect();
        let (mean, std) = mean_std(&values);
        IntensityStats {
            mean,
            std,
            min: values[0],
            max: values[values.len() - 1],
            p0_5: nearest_rank(&values, 0.005),
            p99_5: nearest_rank(&values, 0.995),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStats {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub intensity: IntensityStats,
    pub object_extents_mm: Vec<[f64; 3]>,
    pub class_counts: BTreeMap<u32, usize>,
    /// Deterministic strided intensity subsample, pooled by
    /// [`dataset_fingerprint`]. Not persisted.
    #[serde(skip)]
    pub intensity_samples: Vec<f32>,
}

impl CaseStats {
    pub fn num_objects(&self) -> usize {
        self.object_extents_mm.len()
    }
}

/// Statistics for one case from already-loaded volumes.
///
/// Intensities are taken from foreground voxels of the label map, or the
/// whole image when there is no label map or it is empty.
pub fn case_stats(image: &Volume<f32>, labels: Option<&Volume<u16>>, objects: &[BoundingBox]) -> CaseStats {
    let foreground: Vec<usize> = match labels {
        Some(l) => (0..l.data.len()).filter(|&i| l.data[i] != 0).collect(),
        None => Vec::new(),
    };
    let samples: Vec<f32> = if foreground.is_empty() {
        strided(image.data.len()).map(|i| image.data[i]).collect()
    } else {
        let n = foreground.len();
        strided(n).map(|k| image.data[foreground[k]]).collect()
    };
    let mut sorted = samples.clone();
    let intensity = IntensityStats::from_samples(&mut sorted);

    let mut class_counts = BTreeMap::new();
    for b in objects {
        *class_counts.entry(b.class_id).or_insert(0) += 1;
    }
    CaseStats {
        shape: image.dims,
        spacing_mm: image.spacing_mm,
        intensity,
        object_extents_mm: objects.iter().map(|b| b.extent_mm(image.spacing_mm)).collect(),
        class_counts,
        intensity_samples: samples,
    }
}

fn strided(n: usize) -> impl Iterator<Item = usize> {
    let stride = n.div_ceil(MAX_INTENSITY_SAMPLES).max(1);
    (0..n).step_by(stride)
}

/// Loads a case's payloads and computes its statistics.
pub fn case_fingerprint(dataset: &Dataset, case: &Case) -> Result<CaseStats> {
    let image = dataset.load_image(case)?;
    let labels = dataset.load_labels(case)?;
    Ok(case_stats(&image, labels.as_ref(), &case.objects))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingPercentiles {
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtentPercentiles {
    pub p10: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p99: f64,
}

impl ExtentPercentiles {
    fn of(sorted: &[f64]) -> Self {
        ExtentPercentiles {
            p10: nearest_rank(sorted, 0.10),
            p25: nearest_rank(sorted, 0.25),
            p50: nearest_rank(sorted, 0.50),
            p75: nearest_rank(sorted, 0.75),
            p90: nearest_rank(sorted, 0.90),
            p99: nearest_rank(sorted, 0.99),
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.p10, self.p25, self.p50, self.p75, self.p90, self.p99]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectsPerCase {
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub num_cases: usize,
    pub num_classes: usize,
    pub median_shape: [usize; 3],
    /// Per-axis median of physical image size (shape × spacing).
    pub median_extent_mm: [f64; 3],
    pub spacing_percentiles: [SpacingPercentiles; 3],
    pub anisotropy_ratio: f64,
    pub intensity_global: IntensityStats,
    /// `None` when the dataset has no objects at all.
    pub object_extent_percentiles_mm: Option<[ExtentPercentiles; 3]>,
    pub objects_per_case: ObjectsPerCase,
    pub class_counts: BTreeMap<u32, usize>,
}

impl DatasetFingerprint {
    pub fn p50_spacing(&self) -> [f64; 3] {
        self.spacing_percentiles.map(|s| s.p50)
    }
}

/// Aggregates per-case statistics. The result does not depend on the order
/// of `stats`.
pub fn dataset_fingerprint(stats: &[CaseStats], num_classes: usize) -> Result<DatasetFingerprint> {
    if stats.is_empty() {
        return Err(Error::EmptyFingerprint);
    }

    let median_shape = [0, 1, 2].map(|a| {
        let v: Vec<f64> = stats.iter().map(|s| s.shape[a] as f64).collect();
        median(&v).round() as usize
    });
    let median_extent_mm = [0, 1, 2].map(|a| {
        let v: Vec<f64> = stats.iter().map(|s| s.shape[a] as f64 * s.spacing_mm[a]).collect();
        median(&v)
    });
    let spacing_percentiles = [0, 1, 2].map(|a| {
        let mut v: Vec<f64> = stats.iter().map(|s| s.spacing_mm[a]).collect();
        v.sort_by(f64::total_cmp);
        SpacingPercentiles {
            p10: nearest_rank(&v, 0.10),
            p50: nearest_rank(&v, 0.50),
            p90: nearest_rank(&v, 0.90),
        }
    });
    let p50 = spacing_percentiles.map(|s| s.p50);
    let anisotropy_ratio = p50.iter().cloned().fold(f64::MIN, f64::max) / p50.iter().cloned().fold(f64::MAX, f64::min);

    let extents: Vec<[f64; 3]> = stats.iter().flat_map(|s| s.object_extents_mm.iter().copied()).collect();
    let object_extent_percentiles_mm = if extents.is_empty() {
        None
    } else {
        Some([0, 1, 2].map(|a| {
            let mut v: Vec<f64> = extents.iter().map(|e| e[a]).collect();
            v.sort_by(f64::total_cmp);
            ExtentPercentiles::of(&v)
        }))
    };

    let counts: Vec<usize> = stats.iter().map(CaseStats::num_objects).collect();
    let objects_per_case = ObjectsPerCase {
        min: *counts.iter().min().unwrap(),
        median: median(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()),
        max: *counts.iter().max().unwrap(),
    };

    let mut class_counts = BTreeMap::new();
    for s in stats {
        for (&c, &n) in &s.class_counts {
            *class_counts.entry(c).or_insert(0) += n;
        }
    }

    let mut pooled: Vec<f32> = stats.iter().flat_map(|s| s.intensity_samples.iter().copied()).collect();
    let intensity_global = IntensityStats::from_samples(&mut pooled);

    Ok(DatasetFingerprint {
        num_cases: stats.len(),
        num_classes,
        median_shape,
        median_extent_mm,
        spacing_percentiles,
        anisotropy_ratio,
        intensity_global,
        object_extent_percentiles_mm,
        objects_per_case,
        class_counts,
    })
}
