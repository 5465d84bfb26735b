use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel adjacency: faces (6), faces+edges (18), faces+edges+corners (26).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 6, 18 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets, excluding the origin.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::with_capacity(26);
        for a in -1isize..=1 {
            for b in -1isize..=1 {
                for c in -1isize..=1 {
                    let nz = (a != 0) as usize + (b != 0) as usize + (c != 0) as usize;
                    if nz > 0 && nz <= max_nonzero {
                        out.push([a, b, c]);
                    }
                }
            }
        }
        out
    }
}

/// Labels every maximal connected foreground set with `1..=count` in raster
/// order of its first voxel.
pub fn connected_components_3d(mask: ArrayView3<u8>, connectivity: Connectivity) -> (Array3<u32>, usize) {
    let shape = mask.dim();
    let mut labels = Array3::<u32>::zeros(shape);
    let offsets = connectivity.offsets();
    let (nh, nw, nd) = (shape.0 as isize, shape.1 as isize, shape.2 as isize);
    let mut stack = Vec::new();
    let mut count = 0u32;
    for ((h, w, d), &v) in mask.indexed_iter() {
        if v == 0 || labels[[h, w, d]] != 0 {
            continue;
        }
        count += 1;
        labels[[h, w, d]] = count;
        stack.push([h as isize, w as isize, d as isize]);
        while let Some([ch, cw, cd]) = stack.pop() {
            for o in &offsets {
                let (h2, w2, d2) = (ch + o[0], cw + o[1], cd + o[2]);
                if h2 < 0 || w2 < 0 || d2 < 0 || h2 >= nh || w2 >= nw || d2 >= nd {
                    continue;
                }
                let at = [h2 as usize, w2 as usize, d2 as usize];
                if mask[at] != 0 && labels[at] == 0 {
                    labels[at] = count;
                    stack.push([h2, w2, d2]);
                }
            }
        }
    }
    (labels, count as usize)
}

/// Binary dilation by a `(2r+1)³` cube, done as three separable passes.
pub fn dilate(mask: ArrayView3<u8>, radius: usize) -> Array3<u8> {
    let mut cur = mask.mapv(|v| u8::from(v != 0));
    for axis in 0..3 {
        let src = cur.clone();
        let n = src.shape()[axis];
        for (idx, v) in cur.indexed_iter_mut() {
            if *v != 0 {
                continue;
            }
            let i = [idx.0, idx.1, idx.2];
            let lo = i[axis].saturating_sub(radius);
            let hi = (i[axis] + radius).min(n - 1);
            *v = u8::from((lo..=hi).any(|k| {
                let mut j = i;
                j[axis] = k;
                src[j] != 0
            }));
        }
    }
    cur
}
