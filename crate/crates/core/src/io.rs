//! Volume files: a `key = value` text header plus a raw payload next to it.
//!
//! ```text
//! NDims = 3
//! DimSize = nx ny nz
//! ElementSpacing = sx sy sz
//! ElementType = FLOAT32_LE        (or UINT8 for masks)
//! ElementDataFile = <name>.raw
//! ```
//!
//! The payload holds `nx*ny*nz` samples, x-fastest. Float payloads are
//! 32-bit IEEE-754 little-endian; mask payloads are bytes restricted to {0,1}.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{join, KeyValues};
use crate::volume::{Grid, Volume3D};

const MODULE: &str = "volume";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    Uint8,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Float32 => "FLOAT32_LE",
            ElementType::Uint8 => "UINT8",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Uint8 => 1,
        }
    }
}

/// Raw payload path for a header path: same directory and stem, `.raw` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn header_text(grid: &Grid, ty: ElementType, data_file: &str) -> String {
    let mut kv = KeyValues::new();
    kv.set("NDims", "3");
    kv.set("DimSize", join(&grid.dims));
    kv.set("ElementSpacing", join(&grid.spacing));
    kv.set("ElementType", ty.tag());
    kv.set("ElementDataFile", data_file);
    kv.to_text()
}

fn write_files(path: &Path, header: String, payload: &[u8]) -> Result<()> {
    let raw = payload_path(path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))
}

fn data_file_name(path: &Path) -> Result<String> {
    payload_path(path)
        .file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::invalid(MODULE, format!("unusable file name {}", path.display())))
}

/// Writes `vol` as a float volume (header at `path`, payload beside it).
pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = header_text(vol.grid(), ElementType::Float32, &data_file_name(path)?);
    let mut payload = Vec::with_capacity(vol.len() * 4);
    for &v in vol.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_files(path, header, &payload)
}

/// Writes a binary volume with `UINT8` elements.
pub fn save_mask(mask: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    mask.ensure_binary(MODULE, "mask")?;
    let header = header_text(mask.grid(), ElementType::Uint8, &data_file_name(path)?);
    let payload: Vec<u8> = mask.data().iter().map(|&v| v as u8).collect();
    write_files(path, header, &payload)
}

/// Reads a volume of either element type. Masks load as 0.0/1.0 samples.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    load_volume_typed(path).map(|(v, _)| v)
}

/// Like [`load_volume`], also reporting the on-disk element type.
pub fn load_volume_typed(path: impl AsRef<Path>) -> Result<(Volume3D, ElementType)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv = KeyValues::parse(&text, MODULE)?;

    let ndims: usize = kv
        .parse_value("NDims", MODULE)?
        .ok_or_else(|| Error::invalid(MODULE, "missing key `NDims`"))?;
    if ndims != 3 {
        return Err(Error::invalid(MODULE, format!("NDims must be 3, got {ndims}")));
    }
    let dims: [usize; 3] = kv
        .parse_array("DimSize", MODULE)?
        .ok_or_else(|| Error::invalid(MODULE, "missing key `DimSize`"))?;
    let spacing: [f64; 3] = kv
        .parse_array("ElementSpacing", MODULE)?
        .ok_or_else(|| Error::invalid(MODULE, "missing key `ElementSpacing`"))?;
    let grid = Grid::new(dims, spacing)?;
    let ty = match kv.require("ElementType", MODULE)? {
        "FLOAT32_LE" => ElementType::Float32,
        "UINT8" => ElementType::Uint8,
        other => {
            return Err(Error::invalid(
                MODULE,
                format!("unsupported ElementType {other:?}"),
            ))
        }
    };
    let data_file = kv.require("ElementDataFile", MODULE)?;
    let raw = path.parent().unwrap_or(Path::new(".")).join(data_file);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;

    let expected = grid.len() * ty.size();
    if bytes.len() != expected {
        return Err(Error::invalid(
            MODULE,
            format!(
                "payload {} has {} bytes, header declares {:?} {} ({} bytes)",
                raw.display(),
                bytes.len(),
                dims,
                ty.tag(),
                expected
            ),
        ));
    }
    let data: Vec<f64> = match ty {
        ElementType::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        ElementType::Uint8 => {
            if let Some(i) = bytes.iter().position(|&b| b > 1) {
                return Err(Error::invalid(
                    MODULE,
                    format!("mask voxel {i} has value {}, expected 0 or 1", bytes[i]),
                ));
            }
            bytes.iter().map(|&b| b as f64).collect()
        }
    };
    Ok((Volume3D::new(grid, data)?, ty))
}
