//! Training-time augmentation applied jointly to an image and its mask.
//!
//! Geometric transforms act only in the H–W plane: in-plane rotation, elastic
//! deformation, flips along H and W, and H↔W transposition. The mask follows
//! with nearest-neighbour sampling. Intensity transforms touch the image
//! only: a global offset, a smooth multiplicative bias field and k-space line
//! attenuation (motion ghosting).
//!
//! Randomness is split in two: [`AugmentDraw::draw`] consumes the RNG, and
//! [`AugmentDraw::apply`] is a pure function of the draw.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnabledTransforms {
    pub rotation: bool,
    pub flip: bool,
    pub transpose: bool,
    pub channel_shift: bool,
    pub bias_field: bool,
    pub elastic: bool,
    pub ghosting: bool,
}

impl Default for EnabledTransforms {
    fn default() -> Self {
        Self::all()
    }
}

impl EnabledTransforms {
    pub fn all() -> Self {
        Self {
            rotation: true,
            flip: true,
            transpose: true,
            channel_shift: true,
            bias_field: true,
            elastic: true,
            ghosting: true,
        }
    }

    pub fn none() -> Self {
        Self {
            rotation: false,
            flip: false,
            transpose: false,
            channel_shift: false,
            bias_field: false,
            elastic: false,
            ghosting: false,
        }
    }
}

/// In-plane axis selector for ghosting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaneAxis {
    H,
    W,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: EnabledTransforms,
    pub rotation_max_deg: f64,
    /// Peak displacement in voxels.
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    /// Offset bound, in units of the image standard deviation.
    pub channel_shift_max: f64,
    pub bias_field_order: usize,
    pub bias_field_strength: f64,
    pub ghost_axes: Vec<PlaneAxis>,
    pub ghost_intensity: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: EnabledTransforms::all(),
            rotation_max_deg: 15.0,
            elastic_alpha: 8.0,
            elastic_sigma: 4.0,
            channel_shift_max: 0.1,
            bias_field_order: 3,
            bias_field_strength: 0.3,
            ghost_axes: vec![PlaneAxis::H, PlaneAxis::W],
            ghost_intensity: 0.15,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        Self {
            enabled: EnabledTransforms::none(),
            ..Self::default()
        }
    }

    pub fn only(enabled: EnabledTransforms) -> Self {
        Self {
            enabled,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let strengths = [
            self.elastic_alpha,
            self.elastic_sigma,
            self.channel_shift_max,
            self.bias_field_strength,
            self.ghost_intensity,
        ];
        if strengths.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("augmentation strengths must be finite and >= 0".into()));
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::Config(format!("rotation_max_deg {} outside [0, 180]", self.rotation_max_deg)));
        }
        if self.enabled.ghosting && self.ghost_axes.is_empty() {
            return Err(Error::Config("ghosting enabled with no ghost_axes".into()));
        }
        Ok(())
    }
}

/// Every random quantity one augmentation call needs.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: Option<f64>,
    pub flip_h: bool,
    pub flip_w: bool,
    pub transpose: bool,
    /// Offset in units of the image standard deviation.
    pub shift: Option<f64>,
    pub bias_coeffs: Option<Vec<f64>>,
    /// Displacements `(dh, dw)` over the H×W plane.
    pub elastic: Option<(Array2<f64>, Array2<f64>)>,
    pub ghost: Option<(PlaneAxis, usize)>,
}

impl AugmentDraw {
    /// A draw that changes nothing.
    pub fn identity() -> Self {
        Self {
            angle_deg: None,
            flip_h: false,
            flip_w: false,
            transpose: false,
            shift: None,
            bias_coeffs: None,
            elastic: None,
            ghost: None,
        }
    }

    /// Draws in a fixed order so that disabling one transform does not
    /// perturb the values of the others.
    pub fn draw(cfg: &AugmentationConfig, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let e = &cfg.enabled;
        let angle = rng.random_range(-1.0..=1.0) * cfg.rotation_max_deg;
        let flips = (rng.random_bool(0.5), rng.random_bool(0.5));
        let transpose = rng.random_bool(0.5);
        let shift = rng.random_range(-1.0..=1.0) * cfg.channel_shift_max;
        let n_mono = monomials(cfg.bias_field_order).len();
        let coeffs: Vec<f64> = (0..n_mono)
            .map(|_| rng.random_range(-1.0..=1.0) * cfg.bias_field_strength)
            .collect();
        let gi = rng.random_range(0..cfg.ghost_axes.len().max(1));
        let ghost_axis = cfg.ghost_axes.get(gi).copied().unwrap_or(PlaneAxis::H);
        let ghost_k = rng.random_range(2..=4usize);
        let elastic = e.elastic.then(|| elastic_field(shape, cfg.elastic_alpha, cfg.elastic_sigma, rng));
        Self {
            angle_deg: e.rotation.then_some(angle),
            flip_h: e.flip && flips.0,
            flip_w: e.flip && flips.1,
            transpose: e.transpose && transpose,
            shift: e.channel_shift.then_some(shift),
            bias_coeffs: e.bias_field.then_some(coeffs),
            elastic,
            ghost: e.ghosting.then_some((ghost_axis, ghost_k)),
        }
    }

    /// Applies the drawn transforms: rotation, elastic, flips, transposition,
    /// then offset, bias field and ghosting on the image.
    pub fn apply(&self, cfg: &AugmentationConfig, image: &Array3<f32>, mask: &Array3<u8>) -> Result<(Array3<f32>, Array3<u8>)> {
        if dims(image) != dims(mask) {
            return Err(Error::Shape(format!("image {:?} vs mask {:?}", dims(image), dims(mask))));
        }
        let mut img = image.clone();
        let mut msk = mask.clone();
        if let Some(a) = self.angle_deg {
            let [h, w, _] = dims(&img);
            let (c, s) = (a.to_radians().cos(), a.to_radians().sin());
            let (ch, cw) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            // output (y, x) samples the input at R(−θ)·(p − c) + c
            let map = |y: usize, x: usize| {
                let (dy, dx) = (y as f64 - ch, x as f64 - cw);
                (c * dy + s * dx + ch, -s * dy + c * dx + cw)
            };
            (img, msk) = resample_plane(&img, &msk, map);
        }
        if let Some((dh, dw)) = &self.elastic {
            let map = |y: usize, x: usize| (y as f64 + dh[[y, x]], x as f64 + dw[[y, x]]);
            (img, msk) = resample_plane(&img, &msk, map);
        }
        if self.flip_h {
            img.invert_axis(Axis(0));
            msk.invert_axis(Axis(0));
        }
        if self.flip_w {
            img.invert_axis(Axis(1));
            msk.invert_axis(Axis(1));
        }
        let [h, w, _] = dims(&img);
        // Transposition would change the grid shape when H ≠ W.
        if self.transpose && h == w {
            img = img.permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
            msk = msk.permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
        }
        if let Some(s) = self.shift {
            let n = img.len() as f64;
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
            let std = (img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            let off = (s * std) as f32;
            img.mapv_inplace(|v| v + off);
        }
        if let Some(coeffs) = &self.bias_coeffs {
            let field = bias_field(dims(&img), coeffs, cfg.bias_field_order, cfg.bias_field_strength);
            img *= &field;
        }
        if let Some((axis, k)) = self.ghost {
            ghost(&mut img, axis, k, cfg.ghost_intensity);
        }
        Ok((img, msk))
    }
}

/// Draws from `rng` and applies in one call.
pub fn augment(
    image: &Array3<f32>,
    mask: &Array3<u8>,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, Array3<u8>)> {
    let draw = AugmentDraw::draw(cfg, dims(image), rng);
    draw.apply(cfg, image, mask)
}

/// Exponents `(i, j, k)` with `1 ≤ i + j + k ≤ order`, in a fixed order.
pub fn monomials(order: usize) -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    for total in 1..=order as i32 {
        for i in (0..=total).rev() {
            for j in (0..=total - i).rev() {
                out.push([i, j, total - i - j]);
            }
        }
    }
    out
}

fn unit_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    } else {
        0.0
    }
}

/// `exp(p)` for a zero-mean polynomial `p` over coordinates in [−1, 1]. `p` is
/// scaled down when needed so that `|p| ≤ ln(1 + strength)`, which keeps the
/// field inside `[1/(1+s), 1+s] ⊂ [1−s, 1+s]`.
pub fn bias_field(shape: [usize; 3], coeffs: &[f64], order: usize, strength: f64) -> Array3<f32> {
    let monos = monomials(order);
    assert_eq!(monos.len(), coeffs.len(), "one coefficient per monomial");
    let mut p = Array3::from_shape_fn(shape, |(h, w, d)| {
        let (u, v, z) = (unit_coord(h, shape[0]), unit_coord(w, shape[1]), unit_coord(d, shape[2]));
        monos
            .iter()
            .zip(coeffs)
            .map(|(e, c)| c * u.powi(e[0]) * v.powi(e[1]) * z.powi(e[2]))
            .sum::<f64>()
    });
    let mean = p.mean().unwrap_or(0.0);
    p.mapv_inplace(|x| x - mean);
    let peak = p.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let limit = strength.ln_1p();
    let scale = if peak > limit && peak > 0.0 { limit / peak } else { 1.0 };
    p.mapv(|x| (x * scale).exp() as f32)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn smooth_2d(a: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut cur = a.clone();
    for axis in 0..2 {
        let src = cur.clone();
        let n = src.shape()[axis] as isize;
        for ((y, x), v) in cur.indexed_iter_mut() {
            let at = [y as isize, x as isize];
            *v = k
                .iter()
                .enumerate()
                .map(|(t, &kv)| {
                    // clamp to edge
                    let mut j = at;
                    j[axis] = (at[axis] + t as isize - r).clamp(0, n - 1);
                    kv * src[[j[0] as usize, j[1] as usize]]
                })
                .sum();
        }
    }
    cur
}

/// Smoothed white-noise displacements over the H×W plane, each component
/// rescaled so its peak magnitude equals `alpha`.
pub fn elastic_field(shape: [usize; 3], alpha: f64, sigma: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let mut comp = || {
        let noise = Array2::from_shape_simple_fn((shape[0], shape[1]), || rng.random_range(-1.0..=1.0));
        let s = smooth_2d(&noise, sigma);
        let peak = s.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        if peak > 0.0 {
            s.mapv(|x| x * alpha / peak)
        } else {
            s
        }
    };
    let dh = comp();
    let dw = comp();
    (dh, dw)
}

/// Resamples every z-slice through the same in-plane map from output `(y, x)`
/// to input coordinates: bilinear for the image, nearest for the mask, zero
/// outside the grid.
fn resample_plane(img: &Array3<f32>, msk: &Array3<u8>, map: impl Fn(usize, usize) -> (f64, f64)) -> (Array3<f32>, Array3<u8>) {
    let [h, w, d] = dims(img);
    let mut out_i = Array3::<f32>::zeros((h, w, d));
    let mut out_m = Array3::<u8>::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y, x);
            let (ny, nx) = ((sy + 0.5).floor(), (sx + 0.5).floor());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                for z in 0..d {
                    out_m[[y, x, z]] = msk[[ny as usize, nx as usize, z]];
                }
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for (ty, tx, wt) in taps {
                if wt == 0.0 || ty < 0.0 || tx < 0.0 || ty as usize >= h || tx as usize >= w {
                    continue;
                }
                for z in 0..d {
                    out_i[[y, x, z]] += (wt * img[[ty as usize, tx as usize, z]] as f64) as f32;
                }
            }
        }
    }
    (out_i, out_m)
}

/// Attenuates every `k`-th k-space line (and its conjugate partner) along
/// `axis` by `1 − intensity`, slice by slice; the DC line is left alone.
fn ghost(img: &mut Array3<f32>, axis: PlaneAxis, k: usize, intensity: f64) {
    let [h, w, d] = dims(img);
    let mut planner = FftPlanner::<f64>::new();
    let (fh, fw) = (planner.plan_fft_forward(h), planner.plan_fft_forward(w));
    let (ih, iw) = (planner.plan_fft_inverse(h), planner.plan_fft_inverse(w));
    let (n, idx): (usize, fn(usize, usize) -> usize) = match axis {
        PlaneAxis::H => (h, |y, _| y),
        PlaneAxis::W => (w, |_, x| x),
    };
    let hit = |i: usize| i != 0 && (i.is_multiple_of(k) || (n - i).is_multiple_of(k));
    let gain = 1.0 - intensity;
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = Complex::new(img[[y, x, z]] as f64, 0.0);
            }
        }
        let fft2 = |buf: &mut [Complex<f64>], col: &mut [Complex<f64>], rows: &dyn rustfft::Fft<f64>, cols: &dyn rustfft::Fft<f64>| {
            for row in buf.chunks_exact_mut(w) {
                rows.process(row);
            }
            for x in 0..w {
                for y in 0..h {
                    col[y] = buf[y * w + x];
                }
                cols.process(col);
                for y in 0..h {
                    buf[y * w + x] = col[y];
                }
            }
        };
        fft2(&mut buf, &mut col, fw.as_ref(), fh.as_ref());
        for y in 0..h {
            for x in 0..w {
                if hit(idx(y, x)) {
                    buf[y * w + x] *= gain;
                }
            }
        }
        fft2(&mut buf, &mut col, iw.as_ref(), ih.as_ref());
        let norm = (h * w) as f64;
        for y in 0..h {
            for x in 0..w {
                img[[y, x, z]] = (buf[y * w + x].re / norm) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn only(f: impl Fn(&mut EnabledTransforms)) -> AugmentationConfig {
        let mut e = EnabledTransforms::none();
        f(&mut e);
        AugmentationConfig::only(e)
    }

    fn ramp(shape: [usize; 3]) -> Array3<f32> {
        Array3::from_shape_fn(shape, |(h, w, d)| (h * 100 + w * 10 + d) as f32)
    }

    #[test]
    fn monomial_count() {
        // (order+3 choose 3) − 1
        assert_eq!(monomials(1).len(), 3);
        assert_eq!(monomials(3).len(), 19);
    }

    #[test]
    fn no_op_is_bit_exact() {
        let img = ramp([8, 8, 2]);
        let msk = Array3::from_shape_fn((8, 8, 2), |(h, _, _)| (h % 3) as u8);
        let cfg = AugmentationConfig::disabled();
        let (i2, m2) = augment(&img, &msk, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, msk);
    }

    #[test]
    fn zero_angle_rotation_is_identity() {
        let img = ramp([6, 6, 2]);
        let msk = Array3::from_shape_fn((6, 6, 2), |(h, w, _)| ((h + w) % 3) as u8);
        let draw = AugmentDraw {
            angle_deg: Some(0.0),
            ..AugmentDraw::identity()
        };
        let (i2, m2) = draw.apply(&AugmentationConfig::default(), &img, &msk).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, msk);
    }

    #[test]
    fn bias_field_bounds() {
        let cfg = only(|e| e.bias_field = true);
        let img = Array3::from_elem((16, 16, 4), 1.0f32);
        let msk = Array3::zeros((16, 16, 4));
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, _) = augment(&img, &msk, &cfg, &mut rng).unwrap();
            assert!(out.iter().all(|&v| (0.7..=1.3).contains(&v)));
        }
    }

    #[test]
    fn ghosting_keeps_the_mean() {
        let cfg = only(|e| e.ghosting = true);
        let img = ramp([8, 8, 2]);
        let (out, _) = augment(&img, &Array3::zeros((8, 8, 2)), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, b) = (img.sum() as f64, out.sum() as f64);
        assert!((a - b).abs() < 1e-2 * a.abs());
        assert_ne!(out, img);
    }

    #[test]
    fn elastic_peak_matches_alpha() {
        let (dh, dw) = elastic_field([32, 32, 1], 8.0, 4.0, &mut ChaCha8Rng::seed_from_u64(0));
        for f in [dh, dw] {
            let peak = f.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            assert!((peak - 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = AugmentationConfig::default();
        cfg.rotation_max_deg = 200.0;
        assert!(cfg.validate().is_err());
        cfg.rotation_max_deg = 10.0;
        cfg.ghost_intensity = -0.1;
        assert!(cfg.validate().is_err());
    }
}
