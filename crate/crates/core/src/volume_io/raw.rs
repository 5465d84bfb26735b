//! Little-endian raw voxel dumps with a JSON sidecar:
//! `{"shape": [H, W, D], "spacing": [sx, sy, sz], "dtype": "f32" | "u8"}`.
//! Voxels are stored row-major over `(H, W, D)`, D fastest.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::Loaded;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    F32,
    U8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: RawDtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_shape: Option<[usize; 3]>,
}

/// `x.raw` → `x.json`.
pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

fn data_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("raw")
    } else {
        path.to_path_buf()
    }
}

fn read(path: &Path, want: RawDtype) -> Result<(Sidecar, Vec<u8>)> {
    let data = data_path(path);
    let side = sidecar_path(&data);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if meta.dtype != want {
        return Err(Error::format(&side, format!("dtype {:?}, expected {want:?}", meta.dtype)));
    }
    let bytes = std::fs::read(&data).map_err(|e| Error::io(&data, e))?;
    let width = match want {
        RawDtype::F32 => 4,
        RawDtype::U8 => 1,
    };
    let expected = meta.shape.iter().product::<usize>() * width;
    if bytes.len() != expected {
        return Err(Error::format(
            &data,
            format!("{} bytes, sidecar shape {:?} needs {expected}", bytes.len(), meta.shape),
        ));
    }
    Ok((meta, bytes))
}

pub(super) fn read_f32(path: &Path) -> Result<Loaded<f32>> {
    let (meta, bytes) = read(path, RawDtype::F32)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array3::from_shape_vec(meta.shape, values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Loaded {
        data,
        spacing: meta.spacing,
        original_shape: meta.original_shape,
    })
}

pub(super) fn read_u8(path: &Path) -> Result<Loaded<u8>> {
    let (meta, bytes) = read(path, RawDtype::U8)?;
    let data = Array3::from_shape_vec(meta.shape, bytes).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Loaded {
        data,
        spacing: meta.spacing,
        original_shape: None,
    })
}

fn write(path: &Path, meta: &Sidecar, bytes: &[u8]) -> Result<()> {
    let data = data_path(path);
    if let Some(parent) = data.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&data, bytes).map_err(|e| Error::io(&data, e))?;
    let side = sidecar_path(&data);
    std::fs::write(&side, serde_json::to_string(meta)?).map_err(|e| Error::io(&side, e))
}

pub(super) fn write_f32(path: &Path, a: &Array3<f32>, spacing: [f32; 3], original_shape: Option<[usize; 3]>) -> Result<()> {
    let shape = super::dims(a);
    let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = Sidecar {
        shape,
        spacing,
        dtype: RawDtype::F32,
        original_shape: original_shape.filter(|o| *o != shape),
    };
    write(path, &meta, &bytes)
}

pub(super) fn write_u8(path: &Path, a: &Array3<u8>, spacing: [f32; 3]) -> Result<()> {
    let meta = Sidecar {
        shape: super::dims(a),
        spacing,
        dtype: RawDtype::U8,
        original_shape: None,
    };
    let bytes: Vec<u8> = a.iter().copied().collect();
    write(path, &meta, &bytes)
}
