use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYOUT_X_FASTEST: &str = "x-fastest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I16,
    U8,
    U16,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I16 | DType::U16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "i16" => Ok(DType::I16),
            "u8" => Ok(DType::U8),
            "u16" => Ok(DType::U16),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

/// Header of a raw volume payload. Payloads are little-endian and x-fastest:
/// voxel `(x, y, z)` lives at element `x + dims.x·(y + dims.y·z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: DType,
    #[serde(default = "default_layout")]
    pub layout: String,
}

fn default_layout() -> String {
    LAYOUT_X_FASTEST.to_string()
}

#[derive(Deserialize)]
struct RawHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    #[serde(default = "default_layout")]
    layout: String,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], dtype: DType) -> Self {
        Self {
            dims,
            spacing_mm,
            dtype,
            layout: default_layout(),
        }
    }

    /// Parses and validates a header from JSON text. Unknown dtypes produce
    /// [`Error::UnsupportedDtype`] rather than a generic parse error.
    pub fn from_json(text: &str) -> std::result::Result<Result<Self>, serde_json::Error> {
        let raw: RawHeader = serde_json::from_str(text)?;
        Ok(DType::parse(&raw.dtype).and_then(|dtype| {
            let h = VolumeHeader {
                dims: raw.dims,
                spacing_mm: raw.spacing_mm,
                dtype,
                layout: raw.layout,
            };
            h.validate()?;
            Ok(h)
        }))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("dims must be ≥ 1, got {:?}", self.dims)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!(
                "spacing must be > 0, got {:?}",
                self.spacing_mm
            )));
        }
        if self.layout != LAYOUT_X_FASTEST {
            return Err(Error::Invalid(format!("unsupported layout `{}`", self.layout)));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.num_voxels() * self.dtype.size_of()
    }
}

/// Dense 3D grid stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], value: T) -> Self {
        Self {
            dims,
            spacing_mm,
            data: vec![value; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn check_len(header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::SizeMismatch {
            what: "volume payload".into(),
            expected,
            actual: payload.len(),
        });
    }
    Ok(())
}

/// Decodes a raw payload into an `f32` volume. All supported dtypes convert
/// to `f32` without loss.
pub fn load_volume(header: &VolumeHeader, payload: &[u8]) -> Result<Volume<f32>> {
    header.validate()?;
    check_len(header, payload)?;
    let data: Vec<f32> = match header.dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::I16 => payload
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DType::U16 => payload
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DType::U8 => payload.iter().map(|&b| f32::from(b)).collect(),
    };
    Ok(Volume {
        dims: header.dims,
        spacing_mm: header.spacing_mm,
        data,
    })
}

/// Decodes a `u16` instance label map.
pub fn load_label_volume(header: &VolumeHeader, payload: &[u8]) -> Result<Volume<u16>> {
    header.validate()?;
    if header.dtype != DType::U16 {
        return Err(Error::Invalid(format!(
            "label maps must be u16, got {:?}",
            header.dtype
        )));
    }
    check_len(header, payload)?;
    Ok(Volume {
        dims: header.dims,
        spacing_mm: header.spacing_mm,
        data: payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect(),
    })
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode_u16(values: &[u16]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}
