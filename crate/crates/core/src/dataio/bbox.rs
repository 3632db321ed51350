use serde::{Deserialize, Serialize};

/// Axis-aligned half-open box `[min, max)` in voxel coordinates.
///
/// Ground-truth boxes always carry integral coordinates. Predictions and
/// anchors may be fractional, so coordinates are stored as `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Label-map instance this object was derived from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u16>,
}

impl BoundingBox {
    pub fn new(min: [f64; 3], max: [f64; 3], class_id: u32) -> Self {
        Self {
            min,
            max,
            class_id,
            score: None,
            instance_id: None,
        }
    }

    pub fn from_voxels(min: [i64; 3], max: [i64; 3], class_id: u32) -> Self {
        Self::new(min.map(|v| v as f64), max.map(|v| v as f64), class_id)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_instance(mut self, instance: u16) -> Self {
        self.instance_id = Some(instance);
        self
    }

    /// Box of the given size centred on `center`.
    pub fn centered(center: [f64; 3], size: [f64; 3], class_id: u32) -> Self {
        let min = [0, 1, 2].map(|a| center[a] - 0.5 * size[a]);
        let max = [0, 1, 2].map(|a| center[a] + 0.5 * size[a]);
        Self::new(min, max, class_id)
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a])
    }

    pub fn size(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn volume(&self) -> f64 {
        let s = self.size();
        s[0] * s[1] * s[2]
    }

    /// World extent in mm for the given voxel spacing.
    pub fn extent_mm(&self, spacing_mm: [f64; 3]) -> [f64; 3] {
        let s = self.size();
        [0, 1, 2].map(|a| s[a] * spacing_mm[a])
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let mut vol = 1.0;
        for a in 0..3 {
            let lo = self.min[a].max(other.min[a]);
            let hi = self.max[a].min(other.max[a]);
            if hi <= lo {
                return 0.0;
            }
            vol *= hi - lo;
        }
        vol
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).min(1.0)
        }
    }

    pub fn translated(&self, offset: [f64; 3]) -> BoundingBox {
        let mut b = self.clone();
        for a in 0..3 {
            b.min[a] += offset[a];
            b.max[a] += offset[a];
        }
        b
    }

    /// Intersection with another half-open region, or `None` when empty.
    pub fn clipped(&self, lo: [f64; 3], hi: [f64; 3]) -> Option<BoundingBox> {
        let mut b = self.clone();
        for a in 0..3 {
            b.min[a] = b.min[a].max(lo[a]);
            b.max[a] = b.max[a].min(hi[a]);
            if b.max[a] <= b.min[a] {
                return None;
            }
        }
        Some(b)
    }
}
