//! On-disk array format and PGM previews.
//!
//! An array named `stem` lives in two files: `stem.json` holds an
//! [`ArrayHeader`] and `stem.raw` holds the values as little-endian `f32`,
//! row-major. Unknown header fields are ignored on read.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Geometry, Image2D, Sinogram};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Image,
    Sinogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    #[serde(default = "default_version")]
    pub version: u32,
    pub kind: ArrayKind,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_size_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
    /// Free-form annotations (e.g. correction warnings).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

impl ArrayHeader {
    pub fn image(width: usize, height: usize, pixel_size: f64) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind: ArrayKind::Image,
            shape: vec![height, width],
            pixel_size_mm: Some(pixel_size),
            geometry: None,
            meta: Default::default(),
        }
    }

    pub fn sinogram(num_bins: usize, geometry: &Geometry) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind: ArrayKind::Sinogram,
            shape: vec![geometry.num_views(), num_bins],
            pixel_size_mm: None,
            geometry: Some(geometry.clone()),
            meta: Default::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path.json` and `path.raw`.
pub fn write_array(path: impl AsRef<Path>, header: &ArrayHeader, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    if header.len() != data.len() {
        return Err(Error::Shape(format!(
            "header shape {:?} holds {} values, data has {}",
            header.shape,
            header.len(),
            data.len()
        )));
    }
    let json_path = with_suffix(path, ".json");
    let raw_path = with_suffix(path, ".raw");
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;

    let mut bytes = Vec::with_capacity(4 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(io_err(&raw_path))
}

/// Reads a `path.json` / `path.raw` pair written by [`write_array`].
pub fn read_array(path: impl AsRef<Path>) -> Result<(ArrayHeader, Vec<f32>)> {
    let path = path.as_ref();
    let json_path = with_suffix(path, ".json");
    let raw_path = with_suffix(path, ".raw");
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let header: ArrayHeader = serde_json::from_str(&text).map_err(|source| Error::Header {
        path: json_path.clone(),
        source,
    })?;
    let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    if bytes.len() != 4 * header.len() {
        return Err(Error::Shape(format!(
            "{} has {} bytes but shape {:?} needs {}",
            raw_path.display(),
            bytes.len(),
            header.shape,
            4 * header.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: raw_path.display().to_string(),
            index,
        });
    }
    Ok((header, data))
}

fn to_f32(data: &[f64]) -> Vec<f32> {
    data.iter().map(|&v| v as f32).collect()
}

pub fn save_image(path: impl AsRef<Path>, image: &Image2D) -> Result<()> {
    let header = ArrayHeader::image(image.width(), image.height(), image.pixel_size());
    write_array(path, &header, &to_f32(image.data()))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image2D> {
    let (header, data) = read_array(path)?;
    if header.kind != ArrayKind::Image || header.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "expected a 2D image, header says {:?} with shape {:?}",
            header.kind, header.shape
        )));
    }
    let pixel_size = header.pixel_size_mm.unwrap_or(1.0);
    Image2D::new(
        header.shape[1],
        header.shape[0],
        pixel_size,
        data.into_iter().map(f64::from).collect(),
    )
}

pub fn save_sinogram(path: impl AsRef<Path>, sino: &Sinogram) -> Result<()> {
    save_sinogram_with_meta(path, sino, Default::default())
}

pub fn save_sinogram_with_meta(
    path: impl AsRef<Path>,
    sino: &Sinogram,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let mut header = ArrayHeader::sinogram(sino.num_bins(), sino.geometry());
    header.meta = meta;
    write_array(path, &header, &to_f32(sino.data()))
}

pub fn load_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    let (header, data) = read_array(path)?;
    let geometry = match (header.kind, header.geometry) {
        (ArrayKind::Sinogram, Some(g)) if header.shape.len() == 2 => g,
        _ => {
            return Err(Error::Shape(
                "expected a sinogram header with geometry and a 2D shape".into(),
            ))
        }
    };
    if geometry.num_views() != header.shape[0] {
        return Err(Error::Shape(format!(
            "geometry has {} angles but shape declares {} views",
            geometry.num_views(),
            header.shape[0]
        )));
    }
    Sinogram::new(
        header.shape[1],
        geometry,
        data.into_iter().map(f64::from).collect(),
    )
}

/// Maps `value` in `[lo, hi]` to a gray level, rounding half away from zero.
pub fn gray_level(value: f64, lo: f64, hi: f64) -> u8 {
    let t = ((value.clamp(lo, hi) - lo) / (hi - lo)) * 255.0;
    t.round() as u8
}

/// Writes an 8-bit binary PGM (P5) of `image`, windowed to `[lo, hi]`.
pub fn export_pgm(image: &Image2D, path: impl AsRef<Path>, window: (f64, f64)) -> Result<()> {
    let path = path.as_ref();
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(crate::error::invalid(
            "window",
            format!("lower bound {lo} must be below upper bound {hi}"),
        ));
    }
    let mut out = Vec::with_capacity(image.data().len() + 32);
    write!(out, "P5\n{} {}\n255\n", image.width(), image.height()).expect("write to vec");
    out.extend(image.data().iter().map(|&v| gray_level(v, lo, hi)));
    fs::write(path, out).map_err(io_err(path))
}
