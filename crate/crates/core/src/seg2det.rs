//! Segmentation to detection: connected components, object generation with a
//! minimum-diameter filter, and softmax post-processing for segmentation
//! baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{read_bytes, read_text, BoundingBox, Volume, LAYOUT_X_FASTEST};
use crate::error::{Error, Result};
use crate::stats::nearest_rank;

pub const DEFAULT_MIN_DIAMETER_MM: f64 = 3.0;
/// Allowed deviation of per-voxel class scores from summing to one.
pub const SOFTMAX_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub instance_id: u16,
    pub class_id: u32,
    pub voxel_count: usize,
    /// Tight bound of the component's voxels.
    pub bbox: BoundingBox,
    pub extent_mm: [f64; 3],
}

impl Component {
    /// Largest axis-aligned world extent.
    pub fn diameter_mm(&self) -> f64 {
        self.extent_mm.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    /// Instance ids `1..=N`, 0 is background.
    pub labelmap: Volume<u16>,
    pub components: Vec<Component>,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// 26-connected component labeling. Component ids follow the x-fastest scan
/// order of each component's first voxel.
pub fn connected_components_3d(mask: &Volume<bool>, class_id: u32) -> Result<ComponentSet> {
    let [nx, ny, nz] = mask.dims;
    let mut provisional = vec![u32::MAX; mask.data.len()];
    let mut ds = DisjointSet { parent: Vec::new() };

    // the 13 neighbours preceding a voxel in scan order
    let mut offsets = Vec::with_capacity(13);
    for dz in -1i64..=0 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dz == 0 && (dy > 0 || (dy == 0 && dx >= 0)) {
                    continue;
                }
                offsets.push((dx, dy, dz));
            }
        }
    }

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = mask.index(x, y, z);
                if !mask.data[i] {
                    continue;
                }
                let mut label = u32::MAX;
                for &(dx, dy, dz) in &offsets {
                    let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 {
                        continue;
                    }
                    let j = mask.index(qx as usize, qy as usize, qz as usize);
                    let l = provisional[j];
                    if l == u32::MAX {
                        continue;
                    }
                    if label == u32::MAX {
                        label = l;
                    } else {
                        ds.union(label, l);
                    }
                }
                if label == u32::MAX {
                    label = ds.parent.len() as u32;
                    ds.parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }

    let mut final_id: BTreeMap<u32, u16> = BTreeMap::new();
    let mut labelmap = Volume::filled(mask.dims, mask.spacing_mm, 0u16);
    let mut stats: Vec<(usize, [i64; 3], [i64; 3])> = Vec::new();
    for i in 0..provisional.len() {
        if provisional[i] == u32::MAX {
            continue;
        }
        let root = ds.find(provisional[i]);
        let next = final_id.len() + 1;
        let id = match final_id.get(&root) {
            Some(&id) => id,
            None => {
                let id = u16::try_from(next)
                    .map_err(|_| Error::Invalid("more than 65535 components in one mask".into()))?;
                final_id.insert(root, id);
                stats.push((0, [i64::MAX; 3], [i64::MIN; 3]));
                id
            }
        };
        labelmap.data[i] = id;
        let c = labelmap.coords(i).map(|v| v as i64);
        let s = &mut stats[id as usize - 1];
        s.0 += 1;
        for a in 0..3 {
            s.1[a] = s.1[a].min(c[a]);
            s.2[a] = s.2[a].max(c[a] + 1);
        }
    }

    let components = stats
        .into_iter()
        .enumerate()
        .map(|(k, (count, lo, hi))| {
            let instance_id = (k + 1) as u16;
            let bbox = BoundingBox::from_voxels(lo, hi, class_id).with_instance(instance_id);
            let extent_mm = bbox.extent_mm(mask.spacing_mm);
            Component {
                instance_id,
                class_id,
                voxel_count: count,
                bbox,
                extent_mm,
            }
        })
        .collect();
    Ok(ComponentSet { labelmap, components })
}

/// Keeps components whose diameter (largest world extent) is at least
/// `min_diameter_mm` and whose instance id is not excluded.
pub fn components_to_objects(
    cs: &ComponentSet,
    spacing_mm: [f64; 3],
    min_diameter_mm: f64,
    exclusions: &BTreeSet<u16>,
) -> Vec<BoundingBox> {
    cs.components
        .iter()
        .filter(|c| !exclusions.contains(&c.instance_id))
        .filter(|c| {
            let diameter = c.bbox.extent_mm(spacing_mm).iter().cloned().fold(0.0, f64::max);
            diameter >= min_diameter_mm
        })
        .map(|c| c.bbox.clone())
        .collect()
}

/// Connected components of every class in an instance label map, numbered
/// contiguously across classes (classes ascending). Also returns, per new
/// component id, the original label values it covers.
pub fn labelmap_components(
    labels: &Volume<u16>,
    instance_classes: &BTreeMap<u16, u32>,
) -> Result<(ComponentSet, BTreeMap<u16, BTreeSet<u16>>)> {
    let classes: BTreeSet<u32> = instance_classes.values().copied().collect();
    let mut combined = Volume::filled(labels.dims, labels.spacing_mm, 0u16);
    let mut components = Vec::new();
    let mut covers: BTreeMap<u16, BTreeSet<u16>> = BTreeMap::new();
    for class in classes {
        let mask = labels.map(|v| v != 0 && instance_classes.get(&v) == Some(&class));
        let cs = connected_components_3d(&mask, class)?;
        let offset = components.len();
        if offset + cs.components.len() > u16::MAX as usize {
            return Err(Error::Invalid("more than 65535 components in one label map".into()));
        }
        for (i, &id) in cs.labelmap.data.iter().enumerate() {
            if id != 0 {
                let new_id = id + offset as u16;
                combined.data[i] = new_id;
                covers.entry(new_id).or_default().insert(labels.data[i]);
            }
        }
        for mut c in cs.components {
            c.instance_id += offset as u16;
            c.bbox.instance_id = Some(c.instance_id);
            components.push(c);
        }
    }
    Ok((
        ComponentSet {
            labelmap: combined,
            components,
        },
        covers,
    ))
}

/// Ground-truth objects from an instance label map: per-class connected
/// components, minus components touching an excluded original instance,
/// minus components below the diameter threshold.
pub fn objects_from_labelmap(
    labels: &Volume<u16>,
    instance_classes: &BTreeMap<u16, u32>,
    min_diameter_mm: f64,
    excluded_instances: &BTreeSet<u16>,
) -> Result<Vec<BoundingBox>> {
    let (cs, covers) = labelmap_components(labels, instance_classes)?;
    let excluded: BTreeSet<u16> = covers
        .iter()
        .filter(|(_, orig)| !orig.is_disjoint(excluded_instances))
        .map(|(&id, _)| id)
        .collect();
    Ok(components_to_objects(&cs, labels.spacing_mm, min_diameter_mm, &excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Mean,
    Median,
    P95,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [Aggregation::Max, Aggregation::Mean, Aggregation::Median, Aggregation::P95];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
            Aggregation::P95 => "p95",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

pub fn aggregate_component_score(voxel_scores: &[f64], method: Aggregation) -> Result<f64> {
    if voxel_scores.is_empty() {
        return Err(Error::EmptyInput("component has no voxel scores".into()));
    }
    Ok(match method {
        Aggregation::Max => voxel_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => voxel_scores.iter().sum::<f64>() / voxel_scores.len() as f64,
        Aggregation::Median | Aggregation::P95 => {
            let mut v = voxel_scores.to_vec();
            v.sort_by(f64::total_cmp);
            let q = if method == Aggregation::Median { 0.5 } else { 0.95 };
            nearest_rank(&v, q)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegPostParams {
    /// 0 selects argmax mode.
    pub softmax_threshold: f64,
    pub min_voxels: usize,
    pub aggregation: Aggregation,
}

impl SegPostParams {
    /// Argmax, no size filter, max aggregation.
    pub fn basic() -> Self {
        Self {
            softmax_threshold: 0.0,
            min_voxels: 0,
            aggregation: Aggregation::Max,
        }
    }
}

impl Default for SegPostParams {
    fn default() -> Self {
        Self::basic()
    }
}

/// Per-class scores; channel 0 is background, channel `c + 1` is foreground
/// class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxVolume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub channels: Vec<Vec<f32>>,
}

impl SoftmaxVolume {
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if self.channels.len() < 2 {
            return Err(Error::MalformedSoftmax("need background plus ≥1 class channel".into()));
        }
        if let Some(c) = self.channels.iter().position(|ch| ch.len() != n) {
            return Err(Error::MalformedSoftmax(format!("channel {c} has wrong length")));
        }
        for i in 0..n {
            let sum: f64 = self.channels.iter().map(|ch| f64::from(ch[i])).sum();
            if (sum - 1.0).abs() > SOFTMAX_TOLERANCE {
                return Err(Error::MalformedSoftmax(format!("voxel {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.channels.len() - 1
    }

    fn argmax(&self, i: usize) -> usize {
        let mut best = 0;
        for c in 1..self.channels.len() {
            if self.channels[c][i] > self.channels[best][i] {
                best = c;
            }
        }
        best
    }
}

/// Turns a softmax prediction into scored boxes.
///
/// Argmax mode (`softmax_threshold == 0`) assigns each voxel to its best
/// channel. Threshold mode assigns a voxel to every class whose score reaches
/// the threshold. Components smaller than `min_voxels` are dropped and the
/// rest are scored by aggregating their class scores.
pub fn instances_from_softmax(softmax: &SoftmaxVolume, params: &SegPostParams) -> Result<Vec<BoundingBox>> {
    softmax.validate()?;
    let mut out = Vec::new();
    for class in 0..softmax.num_classes() {
        let channel = class + 1;
        let scores = &softmax.channels[channel];
        let mask = Volume {
            dims: softmax.dims,
            spacing_mm: softmax.spacing_mm,
            data: (0..scores.len())
                .map(|i| {
                    if params.softmax_threshold <= 0.0 {
                        softmax.argmax(i) == channel
                    } else {
                        f64::from(scores[i]) >= params.softmax_threshold
                    }
                })
                .collect(),
        };
        let cs = connected_components_3d(&mask, class as u32)?;
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); cs.components.len()];
        for (i, &id) in cs.labelmap.data.iter().enumerate() {
            if id != 0 {
                members[id as usize - 1].push(f64::from(scores[i]));
            }
        }
        for (c, voxels) in cs.components.iter().zip(&members) {
            if c.voxel_count < params.min_voxels {
                continue;
            }
            let score = aggregate_component_score(voxels, params.aggregation)?;
            let mut b = c.bbox.clone().with_score(score);
            b.instance_id = None;
            out.push(b);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SoftmaxHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    #[serde(default = "default_layout")]
    layout: String,
    channels: usize,
}

fn default_layout() -> String {
    LAYOUT_X_FASTEST.to_string()
}

pub fn softmax_paths(root: &Path, id: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let d = root.join("softmax");
    (d.join(format!("{id}.json")), d.join(format!("{id}.raw")))
}

/// Reads `softmax/<id>.json` + `.raw`: f32, channel-major, each channel
/// x-fastest.
pub fn load_softmax(root: &Path, id: &str) -> Result<SoftmaxVolume> {
    let (hj, hr) = softmax_paths(root, id);
    let header: SoftmaxHeader = serde_json::from_str(&read_text(&hj)?).map_err(|e| Error::json(&hj, e))?;
    if header.dtype != "f32" {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.layout != LAYOUT_X_FASTEST {
        return Err(Error::Invalid(format!("unsupported layout `{}`", header.layout)));
    }
    let n: usize = header.dims.iter().product();
    let bytes = read_bytes(&hr)?;
    let expected = n * header.channels * 4;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            what: format!("softmax `{id}`"),
            expected,
            actual: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let channels = values.chunks(n.max(1)).map(<[f32]>::to_vec).collect();
    Ok(SoftmaxVolume {
        dims: header.dims,
        spacing_mm: header.spacing_mm,
        channels,
    })
}

pub fn write_softmax(root: &Path, id: &str, softmax: &SoftmaxVolume) -> Result<()> {
    let dir = root.join("softmax");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (hj, hr) = softmax_paths(root, id);
    let header = SoftmaxHeader {
        dims: softmax.dims,
        spacing_mm: softmax.spacing_mm,
        dtype: "f32".into(),
        layout: default_layout(),
        channels: softmax.channels.len(),
    };
    crate::dataio::write_json_artifact(&header, &hj)?;
    let bytes: Vec<u8> = softmax.channels.iter().flat_map(|ch| crate::dataio::encode_f32(ch)).collect();
    std::fs::write(&hr, bytes).map_err(|e| Error::io(&hr, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(dims: [usize; 3], on: &[[usize; 3]]) -> Volume<bool> {
        let mut m = Volume::filled(dims, [1.0; 3], false);
        for p in on {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    #[test]
    fn single_voxel() {
        let cs = connected_components_3d(&mask_with([3, 3, 3], &[[1, 1, 1]]), 0).unwrap();
        assert_eq!(cs.components.len(), 1);
        assert_eq!(cs.components[0].voxel_count, 1);
        assert_eq!(cs.components[0].bbox.min, [1.0; 3]);
        assert_eq!(cs.components[0].bbox.max, [2.0; 3]);
    }

    #[test]
    fn diagonal_touch_is_connected() {
        let cs = connected_components_3d(&mask_with([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]), 0).unwrap();
        assert_eq!(cs.components.len(), 1);
        // and a corner-only contact going "backwards" in x
        let cs = connected_components_3d(&mask_with([3, 3, 3], &[[2, 0, 0], [1, 1, 1]]), 0).unwrap();
        assert_eq!(cs.components.len(), 1);
    }

    #[test]
    fn ids_in_scan_order() {
        let cs = connected_components_3d(&mask_with([5, 1, 1], &[[4, 0, 0], [0, 0, 0], [2, 0, 0]]), 0).unwrap();
        assert_eq!(cs.labelmap.data, vec![1, 0, 2, 0, 3]);
        let empty = connected_components_3d(&mask_with([4, 4, 4], &[]), 0).unwrap();
        assert!(empty.components.is_empty());
    }

    #[test]
    fn u_shape_merges() {
        // two arms joined only at the far end: provisional labels must merge
        let on: Vec<[usize; 3]> = (0..4).map(|y| [0, y, 0]).chain((0..4).map(|y| [4, y, 0])).chain((0..5).map(|x| [x, 4, 0])).collect();
        let cs = connected_components_3d(&mask_with([5, 5, 1], &on), 0).unwrap();
        assert_eq!(cs.components.len(), 1);
        assert_eq!(cs.components[0].voxel_count, 13);
    }

    fn component_with_extent(extent: [f64; 3]) -> ComponentSet {
        // one voxel per mm along x, spacing chosen so that 1 voxel spans extent
        let mut m = Volume::filled([2, 2, 2], extent, false);
        m.set(0, 0, 0, true);
        connected_components_3d(&m, 0).unwrap()
    }

    #[test]
    fn diameter_filter() {
        let none = BTreeSet::new();
        let cs = component_with_extent([2.0, 2.0, 2.0]);
        assert!(components_to_objects(&cs, cs.labelmap.spacing_mm, 3.0, &none).is_empty());
        let cs = component_with_extent([3.0, 1.0, 1.0]);
        assert_eq!(components_to_objects(&cs, cs.labelmap.spacing_mm, 3.0, &none).len(), 1);
        let cs = component_with_extent([5.0, 5.0, 5.0]);
        assert_eq!(components_to_objects(&cs, cs.labelmap.spacing_mm, 3.0, &none).len(), 1);
        let excluded: BTreeSet<u16> = [1].into();
        assert!(components_to_objects(&cs, cs.labelmap.spacing_mm, 3.0, &excluded).is_empty());
    }

    #[test]
    fn aggregation_examples() {
        let v = [0.2, 0.9, 0.4];
        assert_eq!(aggregate_component_score(&v, Aggregation::Max).unwrap(), 0.9);
        assert_eq!(aggregate_component_score(&v, Aggregation::Median).unwrap(), 0.4);
        assert_eq!(aggregate_component_score(&v, Aggregation::P95).unwrap(), 0.9);
        assert!((aggregate_component_score(&v, Aggregation::Mean).unwrap() - 0.5).abs() < 1e-12);
        assert!(aggregate_component_score(&[], Aggregation::Max).is_err());
        for a in Aggregation::ALL {
            assert_eq!(aggregate_component_score(&[0.3; 7], a).unwrap(), 0.3);
        }
    }

    fn blob_softmax(fg: f32, blob: &[[usize; 3]]) -> SoftmaxVolume {
        let dims = [8, 8, 8];
        let n = 512;
        let mut bg = vec![1.0f32; n];
        let mut c1 = vec![0.0f32; n];
        for p in blob {
            let i = p[0] + 8 * (p[1] + 8 * p[2]);
            c1[i] = fg;
            bg[i] = 1.0 - fg;
        }
        SoftmaxVolume {
            dims,
            spacing_mm: [1.0; 3],
            channels: vec![bg, c1],
        }
    }

    fn cube_blob(lo: usize, hi: usize) -> Vec<[usize; 3]> {
        let mut v = Vec::new();
        for z in lo..hi {
            for y in lo..hi {
                for x in lo..hi {
                    v.push([x, y, z]);
                }
            }
        }
        v
    }

    #[test]
    fn softmax_blob_argmax() {
        let sm = blob_softmax(0.9, &cube_blob(2, 4));
        let out = instances_from_softmax(&sm, &SegPostParams::basic()).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].score.unwrap() - 0.9).abs() < 1e-6);
        assert_eq!(out[0].class_id, 0);
    }

    #[test]
    fn softmax_min_voxels() {
        let blob: Vec<[usize; 3]> = (0..5).map(|x| [x, 0, 0]).collect();
        let sm = blob_softmax(0.9, &blob);
        let params = SegPostParams { min_voxels: 10, ..SegPostParams::basic() };
        assert!(instances_from_softmax(&sm, &params).unwrap().is_empty());
    }

    #[test]
    fn threshold_recovers_argmax_loser() {
        let sm = blob_softmax(0.45, &cube_blob(2, 5));
        assert!(instances_from_softmax(&sm, &SegPostParams::basic()).unwrap().is_empty());
        let plus = SegPostParams { softmax_threshold: 0.4, ..SegPostParams::basic() };
        assert_eq!(instances_from_softmax(&sm, &plus).unwrap().len(), 1);
    }

    #[test]
    fn malformed_softmax() {
        let mut sm = blob_softmax(0.9, &cube_blob(2, 3));
        sm.channels[0][0] = 0.5;
        assert!(matches!(instances_from_softmax(&sm, &SegPostParams::basic()), Err(Error::MalformedSoftmax(_))));
    }

    #[test]
    fn labelmap_exclusions_use_original_ids() {
        let mut labels = Volume::filled([10, 4, 4], [1.0; 3], 0u16);
        for x in 0..4 {
            labels.set(x, 1, 1, 5);
        }
        for x in 6..10 {
            labels.set(x, 1, 1, 9);
        }
        let table: BTreeMap<u16, u32> = [(5, 0), (9, 1)].into();
        let all = objects_from_labelmap(&labels, &table, 3.0, &BTreeSet::new()).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1].class_id, 1);
        let kept = objects_from_labelmap(&labels, &table, 3.0, &[9].into()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].class_id, 0);
    }

    #[test]
    fn softmax_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sm = blob_softmax(0.7, &cube_blob(1, 3));
        write_softmax(dir.path(), "c", &sm).unwrap();
        assert_eq!(load_softmax(dir.path(), "c").unwrap(), sm);
    }
}
