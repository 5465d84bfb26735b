//! Volumes, label masks and cases, with NIfTI-1 and raw+JSON-sidecar I/O.
//!
//! Arrays are indexed `(H, W, D)`. NIfTI axes are taken as stored (no
//! reorientation); intensities are never rescaled beyond the file's own
//! `scl_slope`/`scl_inter`.

mod nifti;
mod raw;

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use raw::{sidecar_path, RawDtype, Sidecar};

/// Scanner label used for synthetic data.
pub const PHANTOM_SCANNER: &str = "phantom";

/// Scanner/protocol groups of the public WMH challenge data with their stored
/// volume extents.
pub const CHALLENGE_SCANNERS: [(&str, [usize; 3]); 5] = [
    ("3T Philips Achieva", [240, 240, 48]),
    ("3T Siemens TrioTim", [232, 256, 48]),
    ("3T GE Signa HDxt", [132, 256, 83]),
    ("3T Philips Ingenuity", [321, 240, 83]),
    ("1.5T GE Signa HDxt", [128, 256, 103]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Millimetres per voxel along (H, W, D).
    pub spacing: [f32; 3],
    pub original_shape: [usize; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        let shape = dims(&data);
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume has a zero-length axis: {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Shape(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self {
            data,
            spacing,
            original_shape: shape,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }
}

/// Voxel labels: 0 background, 1 WMH, 2 other pathology.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub data: Array3<u8>,
    pub spacing: [f32; 3],
}

impl LabelMask {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        Self::with_spacing(data, [1.0; 3])
    }

    pub fn with_spacing(data: Array3<u8>, spacing: [f32; 3]) -> Result<Self> {
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 2) {
            return Err(Error::IllegalLabel { value, index });
        }
        if dims(&data).contains(&0) {
            return Err(Error::Shape("mask has a zero-length axis".into()));
        }
        Ok(Self { data, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array3::zeros(shape),
            spacing: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub scanner: String,
    pub image: Volume,
    pub truth: Option<LabelMask>,
}

impl Case {
    pub fn new(id: impl Into<String>, scanner: impl Into<String>, image: Volume, truth: Option<LabelMask>) -> Result<Self> {
        if let Some(t) = &truth {
            if t.shape() != image.shape() {
                return Err(Error::Shape(format!(
                    "image {:?} and truth {:?} differ",
                    image.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            scanner: scanner.into(),
            image,
            truth,
        })
    }
}

pub fn dims<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Nifti,
    Raw,
}

fn format_of(path: &Path) -> Format {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Format::Nifti
    } else {
        Format::Raw
    }
}

/// Intensity grid plus any `original_shape` the file recorded.
struct Loaded<T> {
    data: Array3<T>,
    spacing: [f32; 3],
    original_shape: Option<[usize; 3]>,
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let l: Loaded<f32> = match format_of(path) {
        Format::Nifti => nifti::read_f32(path)?,
        Format::Raw => raw::read_f32(path)?,
    };
    let mut v = Volume::new(l.data, l.spacing).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(o) = l.original_shape {
        v.original_shape = o;
    }
    Ok(v)
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let l: Loaded<u8> = match format_of(path) {
        Format::Nifti => nifti::read_labels(path)?,
        Format::Raw => raw::read_u8(path)?,
    };
    LabelMask::with_spacing(l.data, l.spacing)
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    match format_of(path) {
        Format::Nifti => nifti::write_f32(path, &v.data, v.spacing),
        Format::Raw => raw::write_f32(path, &v.data, v.spacing, Some(v.original_shape)),
    }
}

pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    if let Some((index, &value)) = mask.data.iter().enumerate().find(|(_, &v)| v > 2) {
        return Err(Error::IllegalLabel { value, index });
    }
    match format_of(path) {
        Format::Nifti => nifti::write_u8(path, &mask.data, mask.spacing),
        Format::Raw => raw::write_u8(path, &mask.data, mask.spacing),
    }
}

/// Reads an image (and optional truth mask) into a [`Case`]. The case id is
/// the image file stem with any `_image` suffix removed.
pub fn load_case(image_path: &Path, truth_path: Option<&Path>, scanner: &str) -> Result<Case> {
    let image = load_volume(image_path)?;
    let truth = truth_path.map(load_mask).transpose()?;
    Case::new(case_id_from_path(image_path, "image"), scanner, image, truth)
}

/// `dir/abc_image.nii.gz` → `abc` for role `image`.
pub fn case_id_from_path(path: &Path, role: &str) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("case");
    let stem = ["nii.gz", "nii", "raw", "json"]
        .iter()
        .find_map(|ext| name.strip_suffix(&format!(".{ext}")))
        .unwrap_or(name);
    stem.strip_suffix(&format!("_{role}")).unwrap_or(stem).to_string()
}

/// One entry of a dataset directory's `cases.json` index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    #[serde(default = "unknown_scanner")]
    pub scanner: String,
    pub image: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

fn unknown_scanner() -> String {
    "unknown".into()
}

pub const INDEX_FILE: &str = "cases.json";

/// Lists the cases of a dataset directory: `cases.json` when present,
/// otherwise every `<id>_image.{raw,nii,nii.gz}` with an optional sibling
/// `<id>_mask.*`. Relative paths resolve against `dir`.
pub fn list_cases(dir: &Path) -> Result<Vec<CaseEntry>> {
    let index = dir.join(INDEX_FILE);
    let mut entries: Vec<CaseEntry> = if index.exists() {
        let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&index, e.to_string()))?
    } else {
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let is_image = ["_image.raw", "_image.nii", "_image.nii.gz"].iter().any(|s| name.ends_with(s));
            if !is_image {
                continue;
            }
            let id = case_id_from_path(&path, "image");
            let truth = find_role(dir, &id, "mask");
            found.push(CaseEntry {
                id,
                scanner: unknown_scanner(),
                image: PathBuf::from(name),
                truth: truth.map(|t| PathBuf::from(t.file_name().expect("file"))),
            });
        }
        found
    };
    for e in &mut entries {
        if e.image.is_relative() {
            e.image = dir.join(&e.image);
        }
        if let Some(t) = e.truth.as_mut() {
            if t.is_relative() {
                *t = dir.join(&*t);
            }
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

/// Finds `<dir>/<id>_<role>.{raw,nii.gz,nii}`.
pub fn find_role(dir: &Path, id: &str, role: &str) -> Option<PathBuf> {
    ["raw", "nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{id}_{role}.{ext}")))
        .find(|p| p.exists())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    list_cases(dir)?
        .into_iter()
        .map(|e| {
            let mut c = load_case(&e.image, e.truth.as_deref(), &e.scanner)?;
            c.id = e.id;
            Ok(c)
        })
        .collect()
}

/// Writes `<id>_image.raw`, `<id>_mask.raw` (when truth exists) and a
/// `cases.json` index.
pub fn save_dataset(dir: &Path, cases: &[Case]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::with_capacity(cases.len());
    for c in cases {
        let image = PathBuf::from(format!("{}_image.raw", c.id));
        save_volume(&c.image, &dir.join(&image))?;
        let truth = match &c.truth {
            Some(t) => {
                let p = PathBuf::from(format!("{}_mask.raw", c.id));
                save_mask(t, &dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        index.push(CaseEntry {
            id: c.id.clone(),
            scanner: c.scanner.clone(),
            image,
            truth,
        });
    }
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
