//! Dataset format, volumes, boxes and deterministic JSON artifacts.

mod bbox;
mod dataset;
mod json;
mod volume;

pub use bbox::BoundingBox;
pub use dataset::{
    boxes_path, image_paths, label_paths, load_dataset, write_case, write_dataset_index, Case, Dataset, LabelInfo,
    Split,
};
pub use json::{read_json_artifact, to_canonical_json, write_json_artifact};
pub use volume::{
    encode_f32, encode_u16, load_label_volume, load_volume, DType, Volume, VolumeHeader, LAYOUT_X_FASTEST,
};

pub(crate) use json::{read_bytes, read_text};
