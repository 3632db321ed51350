//! On-disk dataset layout:
//!
//! ```text
//! <root>/dataset.json            name, classes, cases, exclusion_list
//! <root>/images/<id>.json|.raw   image header + payload
//! <root>/labels/<id>.json|.raw   optional u16 instance map + instance→class table
//! <root>/boxes/<id>.json         optional ground-truth boxes
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bbox::BoundingBox;
use super::json::{read_bytes, read_text, to_canonical_json, write_json_artifact};
use super::volume::{encode_f32, encode_u16, load_label_volume, load_volume, DType, Volume, VolumeHeader};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelInfo {
    pub header: VolumeHeader,
    /// Instance id (≥ 1) → class id.
    pub instance_classes: BTreeMap<u16, u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub split: Split,
    pub image: VolumeHeader,
    pub labels: Option<LabelInfo>,
    pub objects: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub name: String,
    pub classes: Vec<String>,
    pub cases: Vec<Case>,
    pub exclusion_list: BTreeSet<(String, u16)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexFile {
    name: String,
    classes: Vec<String>,
    cases: Vec<IndexCase>,
    #[serde(default)]
    exclusion_list: Vec<Exclusion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexCase {
    id: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    objects: Option<Vec<BoundingBox>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Exclusion {
    case: String,
    instance: u16,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelFile {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    #[serde(default = "default_layout")]
    layout: String,
    instances: BTreeMap<u16, u32>,
}

fn default_layout() -> String {
    super::volume::LAYOUT_X_FASTEST.to_string()
}

pub fn image_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    let d = root.join("images");
    (d.join(format!("{id}.json")), d.join(format!("{id}.raw")))
}

pub fn label_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    let d = root.join("labels");
    (d.join(format!("{id}.json")), d.join(format!("{id}.raw")))
}

pub fn boxes_path(root: &Path, id: &str) -> PathBuf {
    root.join("boxes").join(format!("{id}.json"))
}

fn parse_header(path: &Path, text: &str) -> Result<VolumeHeader> {
    VolumeHeader::from_json(text).map_err(|e| Error::json(path, e))?
}

fn payload_size(path: &Path) -> Result<usize> {
    match fs::metadata(path) {
        Ok(m) => Ok(m.len() as usize),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.into())),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let index_path = root.join("dataset.json");
    let index: IndexFile =
        serde_json::from_str(&read_text(&index_path)?).map_err(|e| Error::json(&index_path, e))?;

    let num_classes = index.classes.len();
    let mut seen = BTreeSet::new();
    let mut cases = Vec::with_capacity(index.cases.len());
    for entry in index.cases {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateCase(entry.id));
        }
        cases.push(load_case(root, entry, num_classes)?);
    }

    let mut exclusion_list = BTreeSet::new();
    for ex in index.exclusion_list {
        if !seen.contains(&ex.case) {
            return Err(Error::Invalid(format!(
                "exclusion list references unknown case `{}`",
                ex.case
            )));
        }
        exclusion_list.insert((ex.case, ex.instance));
    }

    Ok(Dataset {
        root: root.to_path_buf(),
        name: index.name,
        classes: index.classes,
        cases,
        exclusion_list,
    })
}

fn load_case(root: &Path, entry: IndexCase, num_classes: usize) -> Result<Case> {
    let id = entry.id;
    let (img_json, img_raw) = image_paths(root, &id);
    let image = parse_header(&img_json, &read_text(&img_json)?)?;
    let actual = payload_size(&img_raw)?;
    if actual != image.payload_len() {
        return Err(Error::SizeMismatch {
            what: format!("image `{id}`"),
            expected: image.payload_len(),
            actual,
        });
    }

    let (lbl_json, lbl_raw) = label_paths(root, &id);
    let labels = if lbl_json.exists() {
        let text = read_text(&lbl_json)?;
        let file: LabelFile = serde_json::from_str(&text).map_err(|e| Error::json(&lbl_json, e))?;
        let header = VolumeHeader {
            dims: file.dims,
            spacing_mm: file.spacing_mm,
            dtype: DType::parse(&file.dtype)?,
            layout: file.layout,
        };
        if header.dims != image.dims {
            return Err(Error::Invalid(format!(
                "case `{id}`: label dims {:?} differ from image dims {:?}",
                header.dims, image.dims
            )));
        }
        let payload = read_bytes(&lbl_raw)?;
        if payload.len() != header.payload_len() {
            return Err(Error::SizeMismatch {
                what: format!("labels `{id}`"),
                expected: header.payload_len(),
                actual: payload.len(),
            });
        }
        let volume = load_label_volume(&header, &payload)?;
        if file.instances.contains_key(&0) {
            return Err(Error::Invalid(format!("case `{id}`: instance 0 is reserved for background")));
        }
        if let Some(&cls) = file.instances.values().find(|&&c| c as usize >= num_classes) {
            return Err(Error::UnknownClass {
                case: id.clone(),
                class_id: cls,
                num_classes,
            });
        }
        let present: BTreeSet<u16> = volume.data.iter().copied().filter(|&v| v != 0).collect();
        if let Some(missing) = present.iter().find(|i| !file.instances.contains_key(i)) {
            return Err(Error::Invalid(format!(
                "case `{id}`: label instance {missing} has no class entry"
            )));
        }
        Some(LabelInfo {
            header,
            instance_classes: file.instances,
        })
    } else {
        None
    };

    let box_file = boxes_path(root, &id);
    let objects = match (entry.objects, box_file.exists()) {
        (Some(_), true) => {
            return Err(Error::Invalid(format!(
                "case `{id}`: objects given both inline and in {}",
                box_file.display()
            )))
        }
        (Some(objs), false) => objs,
        (None, true) => serde_json::from_str(&read_text(&box_file)?).map_err(|e| Error::json(&box_file, e))?,
        (None, false) => Vec::new(),
    };
    validate_objects(&id, &objects, labels.as_ref(), num_classes)?;

    Ok(Case {
        id,
        split: entry.split,
        image,
        labels,
        objects,
    })
}

fn validate_objects(id: &str, objects: &[BoundingBox], labels: Option<&LabelInfo>, num_classes: usize) -> Result<()> {
    let mut used = BTreeSet::new();
    for b in objects {
        if !b.is_valid() {
            return Err(Error::Invalid(format!("case `{id}`: degenerate box {:?}..{:?}", b.min, b.max)));
        }
        if b.class_id as usize >= num_classes {
            return Err(Error::UnknownClass {
                case: id.to_string(),
                class_id: b.class_id,
                num_classes,
            });
        }
        if let Some(info) = labels {
            let inst = b.instance_id.ok_or_else(|| {
                Error::Invalid(format!("case `{id}`: object without instance_id in a labelled case"))
            })?;
            match info.instance_classes.get(&inst) {
                Some(&c) if c == b.class_id => {}
                Some(&c) => {
                    return Err(Error::Invalid(format!(
                        "case `{id}`: object instance {inst} has class {} but label table says {c}",
                        b.class_id
                    )))
                }
                None => {
                    return Err(Error::Invalid(format!(
                        "case `{id}`: object references unknown instance {inst}"
                    )))
                }
            }
            if !used.insert(inst) {
                return Err(Error::Invalid(format!("case `{id}`: instance {inst} used by two objects")));
            }
        }
    }
    Ok(())
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn case(&self, id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn load_image(&self, case: &Case) -> Result<Volume<f32>> {
        let (_, raw) = image_paths(&self.root, &case.id);
        load_volume(&case.image, &read_bytes(&raw)?)
    }

    pub fn load_labels(&self, case: &Case) -> Result<Option<Volume<u16>>> {
        match &case.labels {
            None => Ok(None),
            Some(info) => {
                let (_, raw) = label_paths(&self.root, &case.id);
                load_label_volume(&info.header, &read_bytes(&raw)?).map(Some)
            }
        }
    }

    /// Instances excluded from annotation for a given case.
    pub fn exclusions_for(&self, case_id: &str) -> BTreeSet<u16> {
        self.exclusion_list
            .iter()
            .filter(|(c, _)| c == case_id)
            .map(|&(_, i)| i)
            .collect()
    }
}

fn encode_image(header: &VolumeHeader, image: &Volume<f32>) -> Vec<u8> {
    match header.dtype {
        DType::F32 => encode_f32(&image.data),
        DType::I16 => image.data.iter().flat_map(|&v| (v as i16).to_le_bytes()).collect(),
        DType::U16 => image.data.iter().flat_map(|&v| (v as u16).to_le_bytes()).collect(),
        DType::U8 => image.data.iter().map(|&v| v as u8).collect(),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one case's payloads. Objects go to `boxes/<id>.json` when non-empty.
pub fn write_case(root: &Path, case: &Case, image: &Volume<f32>, labels: Option<&Volume<u16>>) -> Result<()> {
    ensure_dir(&root.join("images"))?;
    let (hj, hr) = image_paths(root, &case.id);
    write_json_artifact(&case.image, &hj)?;
    write_bytes(&hr, &encode_image(&case.image, image))?;

    if let (Some(info), Some(vol)) = (&case.labels, labels) {
        ensure_dir(&root.join("labels"))?;
        let (lj, lr) = label_paths(root, &case.id);
        let file = LabelFile {
            dims: info.header.dims,
            spacing_mm: info.header.spacing_mm,
            dtype: "u16".into(),
            layout: info.header.layout.clone(),
            instances: info.instance_classes.clone(),
        };
        write_json_artifact(&file, &lj)?;
        write_bytes(&lr, &encode_u16(&vol.data))?;
    }

    if !case.objects.is_empty() {
        ensure_dir(&root.join("boxes"))?;
        write_json_artifact(&case.objects, boxes_path(root, &case.id))?;
    }
    Ok(())
}

/// Writes `dataset.json`. Payloads must be written separately via [`write_case`].
pub fn write_dataset_index(dataset: &Dataset) -> Result<()> {
    ensure_dir(&dataset.root)?;
    let index = IndexFile {
        name: dataset.name.clone(),
        classes: dataset.classes.clone(),
        cases: dataset
            .cases
            .iter()
            .map(|c| IndexCase {
                id: c.id.clone(),
                split: c.split,
                objects: None,
            })
            .collect(),
        exclusion_list: dataset
            .exclusion_list
            .iter()
            .map(|(case, instance)| Exclusion {
                case: case.clone(),
                instance: *instance,
            })
            .collect(),
    };
    let text = to_canonical_json(&index)?;
    let path = dataset.root.join("dataset.json");
    write_bytes(&path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_case(id: &str, dims: [usize; 3]) -> (Case, Volume<f32>, Volume<u16>) {
        let mut labels = Volume::filled(dims, [1.0, 1.0, 2.0], 0u16);
        labels.set(1, 1, 1, 1);
        labels.set(2, 1, 1, 1);
        let image = Volume {
            dims,
            spacing_mm: [1.0, 1.0, 2.0],
            data: (0..dims.iter().product::<usize>()).map(|i| i as f32 * 0.5).collect(),
        };
        let mut table = BTreeMap::new();
        table.insert(1u16, 1u32);
        let case = Case {
            id: id.into(),
            split: Split::Train,
            image: VolumeHeader::new(dims, [1.0, 1.0, 2.0], DType::F32),
            labels: Some(LabelInfo {
                header: VolumeHeader::new(dims, [1.0, 1.0, 2.0], DType::U16),
                instance_classes: table,
            }),
            objects: vec![BoundingBox::from_voxels([1, 1, 1], [3, 2, 2], 1).with_instance(1)],
        };
        (case, image, labels)
    }

    fn write_fixture(root: &Path) -> Dataset {
        let mut cases = Vec::new();
        for id in ["a", "b"] {
            let (case, img, lbl) = make_case(id, [4, 3, 2]);
            write_case(root, &case, &img, Some(&lbl)).unwrap();
            cases.push(case);
        }
        let mut exclusion_list = BTreeSet::new();
        exclusion_list.insert(("b".to_string(), 1u16));
        let ds = Dataset {
            root: root.to_path_buf(),
            name: "fixture".into(),
            classes: vec!["organ".into(), "lesion".into()],
            cases,
            exclusion_list,
        };
        write_dataset_index(&ds).unwrap();
        ds
    }

    #[test]
    fn two_case_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_fixture(dir.path());
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.cases.len(), 2);
        assert_eq!(loaded, ds);
        let img = loaded.load_image(&loaded.cases[0]).unwrap();
        assert_eq!(img.get(1, 0, 0), 0.5);
        assert_eq!(loaded.exclusions_for("b").into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn size_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let (hj, hr) = image_paths(dir.path(), "a");
        fs::write(&hr, vec![0u8; 100]).unwrap();
        let h = VolumeHeader::new([128; 3], [1.0; 3], DType::F32);
        write_json_artifact(&h, &hj).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::SizeMismatch { actual: 100, .. })));
    }

    #[test]
    fn missing_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        fs::remove_file(image_paths(dir.path(), "b").1).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn missing_index_detected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn duplicate_case_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = write_fixture(dir.path());
        ds.cases[1].id = "a".into();
        write_dataset_index(&ds).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::DuplicateCase(ref id)) if id == "a"));
    }

    #[test]
    fn unknown_class_in_index_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut case, img, _) = make_case("a", [4, 3, 2]);
        case.labels = None;
        case.objects.clear();
        write_case(dir.path(), &case, &img, None).unwrap();
        let text = r#"{"name":"x","classes":["a","b"],"cases":[{"id":"a","split":"train",
            "objects":[{"min":[0,0,0],"max":[1,1,1],"class_id":5}]}]}"#;
        fs::write(dir.path().join("dataset.json"), text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::UnknownClass { class_id: 5, num_classes: 2, .. })
        ));
    }

    #[test]
    fn unlisted_label_instance_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut case, img, mut lbl) = make_case("a", [4, 3, 2]);
        lbl.set(0, 0, 0, 7);
        case.objects.clear();
        write_case(dir.path(), &case, &img, Some(&lbl)).unwrap();
        let ds = Dataset {
            root: dir.path().into(),
            name: "x".into(),
            classes: vec!["a".into(), "b".into()],
            cases: vec![case],
            exclusion_list: BTreeSet::new(),
        };
        write_dataset_index(&ds).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Invalid(ref m)) if m.contains("instance 7")));
    }
}
