//! Scalar and label volumes plus the raw-with-sidecar file format.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYOUT: &str = "z-major (index=(z*H+y)*W+x)";

/// Default class names for the three-phase convention.
pub fn default_class_names() -> Vec<String> {
    ["rock", "brine", "oil"].iter().map(|s| s.to_string()).collect()
}

/// Scalar field on a `D x H x W` voxel grid, z-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Voxel spacing `(dz, dy, dx)` in micrometers.
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

/// Per-voxel class labels on the same grid convention as [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
    pub class_names: Vec<String>,
}

pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn index(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::contract("volume", format!("spacing must be positive, got {spacing:?}")))
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_spacing(spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::dim("volume", format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Self {
        Self {
            dims,
            spacing,
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Anisotropy ratio `dz / dx`.
    pub fn anisotropy(&self) -> f64 {
        self.spacing[0] / self.spacing[2]
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[index(self.dims, z, y, x)]
    }

    /// Copies the box `origin .. origin + size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Volume {
        Volume {
            dims: size,
            spacing: self.spacing,
            data: crop_slice(&self.data, self.dims, origin, size),
        }
    }

    pub fn with_data(&self, data: Vec<f64>) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, class_names: Vec<String>) -> Result<Self> {
        if labels.len() != voxel_count(dims) {
            return Err(Error::dim("label volume", format!("{} labels for dims {dims:?}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::contract(
                "label volume",
                format!("label {bad} outside {} classes", class_names.len()),
            ));
        }
        Ok(Self { dims, labels, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[index(self.dims, z, y, x)]
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> LabelVolume {
        LabelVolume {
            dims: size,
            labels: crop_slice(&self.labels, self.dims, origin, size),
            class_names: self.class_names.clone(),
        }
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

pub(crate) fn crop_slice<T: Copy>(data: &[T], dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = index(dims, origin[0] + z, origin[1] + y, origin[2]);
            out.extend_from_slice(&data[start..start + size[2]]);
        }
    }
    out
}

/// On-disk sample type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
    U16,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }
}

/// JSON sidecar describing a `.raw` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing_um: [f64; 3],
    pub dtype: DType,
    pub order: String,
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

/// `stem.json` and `stem.raw` for a path given with or without extension.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".raw"))
}

fn write_pair(path: &Path, sidecar: &Sidecar, bytes: &[u8]) -> Result<()> {
    let (json, raw) = volume_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::format(&json, e.to_string()))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

fn read_pair(path: &Path) -> Result<(Sidecar, Vec<u8>)> {
    let (json, raw) = volume_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    if sidecar.order != "little-endian" {
        return Err(Error::format(&json, format!("unsupported byte order `{}`", sidecar.order)));
    }
    if sidecar.layout != LAYOUT {
        return Err(Error::format(&json, format!("unsupported layout `{}`", sidecar.layout)));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = voxel_count(sidecar.dims) * sidecar.dtype.width();
    if bytes.len() != expected {
        return Err(Error::format(&raw, format!("{} bytes, expected {expected}", bytes.len())));
    }
    Ok((sidecar, bytes))
}

/// Writes a scalar volume as little-endian `f32`.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut bytes = vec![0u8; v.len() * 4];
    for (chunk, &x) in bytes.chunks_exact_mut(4).zip(&v.data) {
        LittleEndian::write_f32(chunk, x as f32);
    }
    let sidecar = Sidecar {
        dims: v.dims,
        spacing_um: v.spacing,
        dtype: DType::F32,
        order: "little-endian".into(),
        layout: LAYOUT.into(),
        class_names: None,
    };
    write_pair(path, &sidecar, &bytes)
}

/// Reads a scalar volume stored as `f32`, `u8` or `u16`.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let (sc, bytes) = read_pair(path)?;
    let data: Vec<f64> = match sc.dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect(),
        DType::U16 => bytes.chunks_exact(2).map(|c| LittleEndian::read_u16(c) as f64).collect(),
        DType::U8 => bytes.iter().map(|&b| b as f64).collect(),
    };
    Volume::new(sc.dims, sc.spacing_um, data)
}

/// Writes labels as `u8`, keeping class names in the sidecar.
pub fn write_labels(path: &Path, l: &LabelVolume, spacing: [f64; 3]) -> Result<()> {
    let sidecar = Sidecar {
        dims: l.dims,
        spacing_um: spacing,
        dtype: DType::U8,
        order: "little-endian".into(),
        layout: LAYOUT.into(),
        class_names: Some(l.class_names.clone()),
    };
    write_pair(path, &sidecar, &l.labels)
}

/// Reads a `u8` label volume and its spacing.
pub fn read_labels(path: &Path) -> Result<(LabelVolume, [f64; 3])> {
    let (sc, bytes) = read_pair(path)?;
    if sc.dtype != DType::U8 {
        let (json, _) = volume_paths(path);
        return Err(Error::format(json, "labels must be stored as u8"));
    }
    let names = sc.class_names.unwrap_or_else(|| {
        let k = bytes.iter().copied().max().map_or(1, |m| m as usize + 1).max(3);
        let mut names = default_class_names();
        names.extend((3..k).map(|i| format!("class{i}")));
        names
    });
    Ok((LabelVolume::new(sc.dims, bytes, names)?, sc.spacing_um))
}
