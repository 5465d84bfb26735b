//! Minimal single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only the fields needed for 3D grids are interpreted: `dim`, `datatype`,
//! `pixdim`, `vox_offset` and the scaling pair. Voxels are stored with the
//! first axis fastest.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use super::Loaded;
use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

struct Header {
    big_endian: bool,
    dim: [usize; 3],
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_LEN {
        return Err(Error::format(path, format!("{} bytes, shorter than a NIfTI-1 header", b.len())));
    }
    let le = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes([b[0], b[1], b[2], b[3]]) == 348 => true,
        _ => return Err(Error::format(path, "sizeof_hdr is not 348")),
    };
    if &b[344..347] != b"n+1" && &b[344..347] != b"ni1" {
        return Err(Error::format(path, "missing NIfTI-1 magic"));
    }
    if &b[344..347] == b"ni1" {
        return Err(Error::format(path, "detached .hdr/.img pairs are not supported"));
    }
    let i16_at = |o: usize| {
        let x = [b[o], b[o + 1]];
        if big_endian {
            i16::from_be_bytes(x)
        } else {
            i16::from_le_bytes(x)
        }
    };
    let f32_at = |o: usize| {
        let x = [b[o], b[o + 1], b[o + 2], b[o + 3]];
        if big_endian {
            f32::from_be_bytes(x)
        } else {
            f32::from_le_bytes(x)
        }
    };
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("dim[0] = {ndim}")));
    }
    let mut dim = [1usize; 3];
    for (a, d) in dim.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = i16_at(42 + 2 * a);
        if v < 1 {
            return Err(Error::format(path, format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err(Error::format(path, "only 3D volumes are supported"));
        }
    }
    let mut pixdim = [1.0f32; 3];
    for (a, p) in pixdim.iter_mut().enumerate() {
        let v = f32_at(80 + 4 * a).abs();
        *p = if v > 0.0 && v.is_finite() { v } else { 1.0 };
    }
    let vox_offset = f32_at(108).max(HEADER_LEN as f32) as usize;
    Ok(Header {
        big_endian,
        dim,
        datatype: i16_at(70),
        pixdim,
        vox_offset,
        scl_slope: f32_at(112),
        scl_inter: f32_at(116),
    })
}

fn decode(path: &Path, h: &Header, body: &[u8]) -> Result<Vec<f64>> {
    let n: usize = h.dim.iter().product();
    let width = match h.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::format(path, format!("unsupported datatype {other}"))),
    };
    if body.len() < n * width {
        return Err(Error::format(path, format!("truncated voxel data: {} of {} bytes", body.len(), n * width)));
    }
    let be = h.big_endian;
    macro_rules! conv {
        ($t:ty, $w:expr) => {
            body[..n * $w]
                .chunks_exact($w)
                .map(|c| {
                    let arr: [u8; $w] = c.try_into().expect("chunk width");
                    (if be { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
                })
                .collect()
        };
    }
    Ok(match h.datatype {
        DT_UINT8 => body[..n].iter().map(|&v| v as f64).collect(),
        DT_INT8 => body[..n].iter().map(|&v| v as i8 as f64).collect(),
        DT_INT16 => conv!(i16, 2),
        DT_UINT16 => conv!(u16, 2),
        DT_INT32 => conv!(i32, 4),
        DT_FLOAT32 => conv!(f32, 4),
        DT_FLOAT64 => conv!(f64, 8),
        _ => unreachable!(),
    })
}

fn load(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes)?;
    if bytes.len() < h.vox_offset {
        return Err(Error::format(path, "vox_offset beyond end of file"));
    }
    let values = decode(path, &h, &bytes[h.vox_offset..])?;
    Ok((h, values))
}

fn to_array<T: Clone>(path: &Path, dim: [usize; 3], values: Vec<T>) -> Result<Array3<T>> {
    let fortran = Array3::from_shape_vec(dim.f(), values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(fortran.as_standard_layout().into_owned())
}

pub(super) fn read_f32(path: &Path) -> Result<Loaded<f32>> {
    let (h, values) = load(path)?;
    let scaled = h.scl_slope != 0.0 && h.scl_slope.is_finite() && !(h.scl_slope == 1.0 && h.scl_inter == 0.0);
    let values: Vec<f32> = values
        .into_iter()
        .map(|v| {
            if scaled {
                (v * h.scl_slope as f64 + h.scl_inter as f64) as f32
            } else {
                v as f32
            }
        })
        .collect();
    Ok(Loaded {
        data: to_array(path, h.dim, values)?,
        spacing: h.pixdim,
        original_shape: None,
    })
}

pub(super) fn read_labels(path: &Path) -> Result<Loaded<u8>> {
    let (h, values) = load(path)?;
    let mut labels = Vec::with_capacity(values.len());
    for (index, v) in values.into_iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::format(path, format!("non-integer label {v} at voxel {index}")));
        }
        labels.push(v as u8);
    }
    Ok(Loaded {
        data: to_array(path, h.dim, labels)?,
        spacing: h.pixdim,
        original_shape: None,
    })
}

fn header_bytes(dim: [usize; 3], datatype: i16, bitpix: i16, spacing: [f32; 3]) -> Result<Vec<u8>> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut h, 40, 3);
    for (a, &d) in dim.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| Error::Shape(format!("extent {d} too large for NIfTI-1")))?;
        put_i16(&mut h, 42 + 2 * a, d);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for (a, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * a, s);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_file(path: &Path, header: Vec<u8>, body: Vec<u8>) -> Result<()> {
    let mut bytes = header;
    bytes.extend(body);
    let gz = path.to_str().is_some_and(|s| s.to_ascii_lowercase().ends_with(".gz"));
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn fortran_order<T: Copy>(a: &Array3<T>) -> impl Iterator<Item = T> + '_ {
    a.t().into_iter().copied()
}

pub(super) fn write_f32(path: &Path, a: &Array3<f32>, spacing: [f32; 3]) -> Result<()> {
    let dim = super::dims(a);
    let header = header_bytes(dim, DT_FLOAT32, 32, spacing)?;
    let body = fortran_order(a).flat_map(f32::to_le_bytes).collect();
    write_file(path, header, body)
}

pub(super) fn write_u8(path: &Path, a: &Array3<u8>, spacing: [f32; 3]) -> Result<()> {
    let dim = super::dims(a);
    let header = header_bytes(dim, DT_UINT8, 8, spacing)?;
    write_file(path, header, fortran_order(a).collect())
}
