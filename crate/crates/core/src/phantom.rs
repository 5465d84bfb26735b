//! Synthetic FLAIR-like volumes with exact lesion ground truth.
//!
//! A cylindrical "brain" region (elliptic in-plane, full depth) carries a
//! smooth low-order intensity field plus Gaussian noise; outside it the
//! volume is zero, like a skull-stripped scan. Lesions are small ellipsoids,
//! flat in z, added as a constant bright offset. Stamps never touch one
//! another (not even at a corner), so each one is its own 26-connected
//! component.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{Case, LabelMask, Volume, PHANTOM_SCANNER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    /// Inclusive range of lesion stamps per case.
    pub n_lesions: [usize; 2],
    /// Semi-axis range (voxels) along H and W.
    pub lesion_radius_vox: [f64; 2],
    /// Semi-axis range (voxels) along D.
    pub lesion_radius_z: [f64; 2],
    /// Lesion offset in units of the background standard deviation.
    pub lesion_contrast: f64,
    /// Standard deviation of the voxel noise.
    pub background_noise: f64,
    /// Peak amplitude of the smooth background field.
    pub background_field: f64,
    pub include_label2: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 16],
            spacing: [1.0, 1.0, 3.0],
            n_lesions: [3, 10],
            lesion_radius_vox: [1.0, 4.0],
            lesion_radius_z: [0.0, 1.0],
            lesion_contrast: 1.5,
            background_noise: 0.02,
            background_field: 0.2,
            include_label2: false,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w, d] = self.shape;
        if h < 16 || w < 16 || d < 4 {
            return Err(Error::Config(format!("phantom shape {:?} below 16×16×4", self.shape)));
        }
        if !(self.lesion_contrast > 0.0) {
            return Err(Error::Config("lesion_contrast must be > 0".into()));
        }
        if self.n_lesions[0] > self.n_lesions[1] {
            return Err(Error::Config("n_lesions range is reversed".into()));
        }
        for r in [self.lesion_radius_vox, self.lesion_radius_z] {
            if !(r[0] >= 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("bad radius range {r:?}")));
            }
        }
        if !(self.background_noise >= 0.0 && self.background_field >= 0.0) {
            return Err(Error::Config("background terms must be >= 0".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LesionStamp {
    pub center: [usize; 3],
    pub radii: [f64; 3],
    pub voxels: usize,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhantomInfo {
    /// Stamps actually placed; fewer than requested when space runs out.
    pub lesions: Vec<LesionStamp>,
    pub requested: usize,
    pub background_std: f64,
}

/// Offsets inside the voxelized ellipsoid with semi-axes `r + 0.5`.
fn ellipsoid(radii: [f64; 3]) -> Vec<[isize; 3]> {
    let a = radii.map(|r| r + 0.5);
    let ext = a.map(|v| v.floor() as isize);
    let mut out = Vec::new();
    for i in -ext[0]..=ext[0] {
        for j in -ext[1]..=ext[1] {
            for k in -ext[2]..=ext[2] {
                let q = (i as f64 / a[0]).powi(2) + (j as f64 / a[1]).powi(2) + (k as f64 / a[2]).powi(2);
                if q <= 1.0 {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn in_brain(h: usize, w: usize, shape: [usize; 3]) -> bool {
    let (ch, cw) = ((shape[0] as f64 - 1.0) / 2.0, (shape[1] as f64 - 1.0) / 2.0);
    let (rh, rw) = (0.45 * shape[0] as f64, 0.45 * shape[1] as f64);
    ((h as f64 - ch) / rh).powi(2) + ((w as f64 - cw) / rw).powi(2) <= 1.0
}

pub fn generate(cfg: &PhantomConfig) -> Result<Case> {
    Ok(generate_with_info(cfg)?.0)
}

pub fn generate_with_info(cfg: &PhantomConfig) -> Result<(Case, PhantomInfo)> {
    cfg.validate()?;
    let shape = cfg.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Background: linear + quadratic terms in normalized coordinates.
    let coeffs: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
    let unit = |i: usize, n: usize| 2.0 * i as f64 / (n.max(2) - 1) as f64 - 1.0;
    let noise = Normal::new(0.0, cfg.background_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut image = Array3::<f64>::zeros(shape);
    for ((h, w, d), v) in image.indexed_iter_mut() {
        if !in_brain(h, w, shape) {
            continue;
        }
        let (u, s, z) = (unit(h, shape[0]), unit(w, shape[1]), unit(d, shape[2]));
        let field = coeffs[0] * u + coeffs[1] * s + coeffs[2] * z + coeffs[3] * u * u + coeffs[4] * s * s + coeffs[5] * u * s;
        let n = if cfg.background_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = 1.0 + cfg.background_field * field / 6.0 + n;
    }
    let brain: Vec<f64> = image
        .indexed_iter()
        .filter(|((h, w, _), _)| in_brain(*h, *w, shape))
        .map(|(_, &v)| v)
        .collect();
    let mean = brain.iter().sum::<f64>() / brain.len() as f64;
    let background_std = (brain.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / brain.len() as f64).sqrt();
    let offset = cfg.lesion_contrast * background_std.max(1e-6);

    let requested = rng.random_range(cfg.n_lesions[0]..=cfg.n_lesions[1]);
    let mut labels = Array3::<u8>::zeros(shape);
    let mut lesions = Vec::new();
    let total = requested + usize::from(cfg.include_label2);
    for n in 0..total {
        let label = if n < requested { 1 } else { 2 };
        for _attempt in 0..200 {
            let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..=r[1]) } else { r[0] };
            let radii = [
                draw(&mut rng, cfg.lesion_radius_vox),
                draw(&mut rng, cfg.lesion_radius_vox),
                draw(&mut rng, cfg.lesion_radius_z),
            ];
            let center = [
                rng.random_range(0..shape[0]),
                rng.random_range(0..shape[1]),
                rng.random_range(0..shape[2]),
            ];
            let offsets = ellipsoid(radii);
            let mut voxels = Vec::with_capacity(offsets.len());
            let mut ok = true;
            for o in &offsets {
                let p = [
                    center[0] as isize + o[0],
                    center[1] as isize + o[1],
                    center[2] as isize + o[2],
                ];
                if p.iter().zip(shape).any(|(&c, n)| c < 0 || c >= n as isize) || !in_brain(p[0] as usize, p[1] as usize, shape) {
                    ok = false;
                    break;
                }
                voxels.push(p.map(|c| c as usize));
            }
            // Reject any stamp within one voxel (26-neighbourhood) of another.
            ok = ok
                && voxels.iter().all(|p| {
                    (-1isize..=1).all(|a| {
                        (-1isize..=1).all(|b| {
                            (-1isize..=1).all(|c| {
                                let q = [p[0] as isize + a, p[1] as isize + b, p[2] as isize + c];
                                q.iter().zip(shape).any(|(&x, n)| x < 0 || x >= n as isize)
                                    || labels[[q[0] as usize, q[1] as usize, q[2] as usize]] == 0
                            })
                        })
                    })
                });
            if !ok {
                continue;
            }
            for p in &voxels {
                labels[*p] = label;
                image[*p] += offset;
            }
            lesions.push(LesionStamp {
                center,
                radii,
                voxels: voxels.len(),
                label,
            });
            break;
        }
    }

    let image = Volume::new(image.mapv(|v| v as f32), cfg.spacing)?;
    let truth = LabelMask::with_spacing(labels, cfg.spacing)?;
    let case = Case::new(format!("phantom_{}", cfg.seed), PHANTOM_SCANNER, image, Some(truth))?;
    Ok((
        case,
        PhantomInfo {
            lesions,
            requested,
            background_std,
        },
    ))
}

/// `n` cases with seeds `seed + i`.
pub fn generate_dataset(n: usize, cfg: &PhantomConfig, seed: u64) -> Result<Vec<Case>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    (0..n)
        .map(|i| {
            let c = PhantomConfig {
                seed: seed + i as u64,
                ..cfg.clone()
            };
            let mut case = generate(&c)?;
            case.id = format!("phantom_{i:03}");
            Ok(case)
        })
        .collect()
}
