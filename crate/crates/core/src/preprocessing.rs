//! Canonical-grid geometry (centered pad/crop), z-slab chunking, intensity
//! z-scoring and the label-2 ignore policy.

use ndarray::{concatenate, s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{dims, LabelMask, Volume};

/// Largest accepted input extent per axis.
pub const MAX_EXTENT: usize = 512;
/// Variance floor used by [`normalize_intensity`].
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Working grid that every case is padded/cropped to, and the number of
/// equal z-slabs it is cut into before entering the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalGrid {
    pub shape: [usize; 3],
    pub chunks: usize,
}

impl Default for CanonicalGrid {
    fn default() -> Self {
        Self {
            shape: [256, 256, 128],
            chunks: 4,
        }
    }
}

impl CanonicalGrid {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) || self.chunks == 0 {
            return Err(Error::Config(format!("degenerate canonical grid {self:?}")));
        }
        if !self.shape[2].is_multiple_of(self.chunks) {
            return Err(Error::Config(format!(
                "grid depth {} is not divisible into {} chunks",
                self.shape[2], self.chunks
            )));
        }
        Ok(())
    }

    pub fn chunk_depth(&self) -> usize {
        self.shape[2] / self.chunks
    }

    pub fn chunk_shape(&self) -> [usize; 3] {
        [self.shape[0], self.shape[1], self.chunk_depth()]
    }
}

/// Data-side pipeline settings carried in configs and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: CanonicalGrid,
    pub normalize: bool,
    /// Exclude label-2 voxels from loss and metrics; when false they count
    /// as background.
    pub ignore_label2: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: CanonicalGrid::default(),
            normalize: true,
            ignore_label2: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub original_shape: [usize; 3],
    pub pad_before: [usize; 3],
    pub crop_before: [usize; 3],
    pub canonical_shape: [usize; 3],
}

impl GeometryRecord {
    /// Centered pad or crop per axis; the odd voxel goes to the trailing side.
    pub fn plan(original: [usize; 3], canonical: [usize; 3]) -> Self {
        let mut pad_before = [0; 3];
        let mut crop_before = [0; 3];
        for a in 0..3 {
            if original[a] <= canonical[a] {
                pad_before[a] = (canonical[a] - original[a]) / 2;
            } else {
                crop_before[a] = (original[a] - canonical[a]) / 2;
            }
        }
        Self {
            original_shape: original,
            pad_before,
            crop_before,
            canonical_shape: canonical,
        }
    }

    pub fn pad_after(&self) -> [usize; 3] {
        std::array::from_fn(|a| {
            self.canonical_shape[a].saturating_sub(self.original_shape[a]) - self.pad_before[a]
        })
    }

    pub fn crop_after(&self) -> [usize; 3] {
        std::array::from_fn(|a| {
            self.original_shape[a].saturating_sub(self.canonical_shape[a]) - self.crop_before[a]
        })
    }

    /// Per-axis `(original_start, canonical_start, length)` of the region the
    /// two grids share.
    fn overlap(&self) -> [(usize, usize, usize); 3] {
        std::array::from_fn(|a| {
            let len = self.original_shape[a].min(self.canonical_shape[a]);
            (self.crop_before[a], self.pad_before[a], len)
        })
    }

    fn check(&self) -> Result<()> {
        for a in 0..3 {
            let (o, c) = (self.original_shape[a], self.canonical_shape[a]);
            let consistent = if o <= c {
                self.crop_before[a] == 0 && self.pad_before[a] <= c - o
            } else {
                self.pad_before[a] == 0 && self.crop_before[a] <= o - c
            };
            if !consistent {
                return Err(Error::Shape(format!("inconsistent geometry record {self:?}")));
            }
        }
        Ok(())
    }
}

fn to_grid<T: Copy + Default>(a: ArrayView3<T>, g: &GeometryRecord) -> Array3<T> {
    let mut out = Array3::from_elem(g.canonical_shape, T::default());
    let [(o0, c0, l0), (o1, c1, l1), (o2, c2, l2)] = g.overlap();
    out.slice_mut(s![c0..c0 + l0, c1..c1 + l1, c2..c2 + l2])
        .assign(&a.slice(s![o0..o0 + l0, o1..o1 + l1, o2..o2 + l2]));
    out
}

fn from_grid<T: Copy + Default>(a: ArrayView3<T>, g: &GeometryRecord) -> Array3<T> {
    let mut out = Array3::from_elem(g.original_shape, T::default());
    let [(o0, c0, l0), (o1, c1, l1), (o2, c2, l2)] = g.overlap();
    out.slice_mut(s![o0..o0 + l0, o1..o1 + l1, o2..o2 + l2])
        .assign(&a.slice(s![c0..c0 + l0, c1..c1 + l1, c2..c2 + l2]));
    out
}

/// Pads/crops onto the default 256×256×128 grid.
pub fn to_canonical(v: &Volume, m: Option<&LabelMask>) -> Result<(Volume, Option<LabelMask>, GeometryRecord)> {
    to_canonical_on(&CanonicalGrid::default(), v, m)
}

pub fn to_canonical_on(
    grid: &CanonicalGrid,
    v: &Volume,
    m: Option<&LabelMask>,
) -> Result<(Volume, Option<LabelMask>, GeometryRecord)> {
    let shape = v.shape();
    if let Some(a) = shape.iter().position(|&s| s > MAX_EXTENT) {
        return Err(Error::Shape(format!("axis {a} extent {} exceeds {MAX_EXTENT}", shape[a])));
    }
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    if let Some(m) = m {
        if m.shape() != shape {
            return Err(Error::Shape(format!("image {shape:?} and mask {:?} differ", m.shape())));
        }
    }
    let g = GeometryRecord::plan(shape, grid.shape);
    let image = Volume {
        data: to_grid(v.data.view(), &g),
        spacing: v.spacing,
        original_shape: shape,
    };
    let mask = m.map(|m| LabelMask {
        data: to_grid(m.data.view(), &g),
        spacing: m.spacing,
    });
    Ok((image, mask, g))
}

/// Restores a canonical-grid mask to the recorded original shape; voxels that
/// were cropped away come back as background.
pub fn from_canonical(pred: &LabelMask, g: &GeometryRecord) -> Result<LabelMask> {
    g.check()?;
    if pred.shape() != g.canonical_shape {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match canonical shape {:?}",
            pred.shape(),
            g.canonical_shape
        )));
    }
    Ok(LabelMask {
        data: from_grid(pred.data.view(), g),
        spacing: pred.spacing,
    })
}

/// Cuts a canonical-depth array into `grid.chunks` contiguous z-slabs.
pub fn slice_z<T: Clone>(a: &Array3<T>, grid: &CanonicalGrid) -> Result<Vec<Array3<T>>> {
    let depth = dims(a)[2];
    if depth != grid.shape[2] {
        return Err(Error::Shape(format!("depth {depth}, expected {}", grid.shape[2])));
    }
    let k = grid.chunk_depth();
    Ok((0..grid.chunks)
        .map(|c| a.slice(s![.., .., c * k..(c + 1) * k]).to_owned())
        .collect())
}

/// Inverse of [`slice_z`].
pub fn unslice_z<T: Clone>(chunks: &[Array3<T>], grid: &CanonicalGrid) -> Result<Array3<T>> {
    if chunks.len() != grid.chunks {
        return Err(Error::Shape(format!("{} chunks, expected {}", chunks.len(), grid.chunks)));
    }
    let want = grid.chunk_shape();
    for (i, c) in chunks.iter().enumerate() {
        if dims(c) != [want[0], want[1], want[2]] {
            return Err(Error::Shape(format!("chunk {i} has shape {:?}, expected {want:?}", dims(c))));
        }
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    concatenate(Axis(2), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Z-scores the nonzero voxels (statistics over nonzero voxels only); zero
/// voxels stay zero so padding does not leak into the foreground scale.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &x in v.data.iter().filter(|&&x| x != 0.0) {
        n += 1;
        sum += x as f64;
    }
    if n == 0 {
        return v.clone();
    }
    let mean = sum / n as f64;
    let var = v
        .data
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let scale = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
    let mut out = v.clone();
    out.data.mapv_inplace(|x| if x == 0.0 { 0.0 } else { ((x as f64 - mean) * scale) as f32 });
    out
}

/// `(target, ignore)`: target marks label 1; ignore marks label 2.
pub fn training_target(m: &LabelMask) -> (Array3<u8>, Array3<u8>) {
    training_target_with(m, true)
}

pub fn training_target_with(m: &LabelMask, ignore_label2: bool) -> (Array3<u8>, Array3<u8>) {
    let target = m.data.mapv(|v| u8::from(v == 1));
    let ignore = m.data.mapv(|v| u8::from(ignore_label2 && v == 2));
    (target, ignore)
}

/// One case laid out for the network.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub image_chunks: Vec<Array3<f32>>,
    /// `(target, ignore)` per chunk, when the case has truth.
    pub label_chunks: Option<Vec<(Array3<u8>, Array3<u8>)>>,
    pub geometry: GeometryRecord,
}

/// normalize → to_canonical → slice_z, plus targets when truth exists.
pub fn prepare_case(case: &crate::volume_io::Case, cfg: &PipelineConfig) -> Result<PreparedCase> {
    cfg.grid.validate()?;
    let image = if cfg.normalize {
        normalize_intensity(&case.image)
    } else {
        case.image.clone()
    };
    let (image, mask, geometry) = to_canonical_on(&cfg.grid, &image, case.truth.as_ref())?;
    let image_chunks = slice_z(&image.data, &cfg.grid)?;
    let label_chunks = match mask {
        Some(m) => {
            let (t, i) = training_target_with(&m, cfg.ignore_label2);
            let ts = slice_z(&t, &cfg.grid)?;
            let is = slice_z(&i, &cfg.grid)?;
            Some(ts.into_iter().zip(is).collect())
        }
        None => None,
    };
    Ok(PreparedCase {
        image_chunks,
        label_chunks,
        geometry,
    })
}
