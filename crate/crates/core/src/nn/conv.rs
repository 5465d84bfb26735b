//! Stride-1 "same" 3D convolution via tiled im2col + GEMM.
//!
//! Weights are laid out `[tap][c_in][c_out]` with taps ordered `(kh, kw, kd)`
//! row-major, so the weight buffer is directly the `K × c_out` GEMM operand.
//! Even kernel extents pad one more voxel before than after (14 → 7 + 6).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, matmul_nt, matmul_tn, Real, Tensor5};

/// Elements of im2col scratch per tile.
const TILE_BUDGET: usize = 1 << 20;
/// Below this `c_in · c_out`, im2col is memory-bound and direct tap loops win
/// (attention, stem and the shallow levels).
const DIRECT_MAX_CHANNELS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], dilation: [usize; 3]) -> Self {
        assert!(kernel.iter().all(|&k| k >= 1));
        assert!(dilation.iter().all(|&r| r >= 1));
        Self { kernel, dilation }
    }

    pub fn dense(kernel: [usize; 3]) -> Self {
        Self::new(kernel, [1, 1, 1])
    }

    pub fn pointwise() -> Self {
        Self::dense([1, 1, 1])
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Zero padding on the leading side of each axis.
    pub fn pad_before(&self) -> [usize; 3] {
        std::array::from_fn(|a| (self.dilation[a] * (self.kernel[a] - 1)).div_ceil(2))
    }

    /// Zero padding on the trailing side of each axis.
    pub fn pad_after(&self) -> [usize; 3] {
        let before = self.pad_before();
        std::array::from_fn(|a| self.dilation[a] * (self.kernel[a] - 1) - before[a])
    }

    fn tap_offsets(&self) -> Vec<[isize; 3]> {
        let pad = self.pad_before();
        let [kh, kw, kd] = self.kernel;
        let mut offs = Vec::with_capacity(self.taps());
        for a in 0..kh {
            for b in 0..kw {
                for e in 0..kd {
                    offs.push([
                        (a * self.dilation[0]) as isize - pad[0] as isize,
                        (b * self.dilation[1]) as isize - pad[1] as isize,
                        (e * self.dilation[2]) as isize - pad[2] as isize,
                    ]);
                }
            }
        }
        offs
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1
    }
}

struct Im2col {
    offsets: Vec<[isize; 3]>,
    spatial: [usize; 3],
    cin: usize,
}

impl Im2col {
    fn k(&self) -> usize {
        self.offsets.len() * self.cin
    }

    fn tile_rows(&self) -> usize {
        let v: usize = self.spatial.iter().product();
        (TILE_BUDGET / self.k()).max(64).min(v).max(1)
    }

    fn fill<T: Real>(&self, sample: &[T], v0: usize, v1: usize, col: &mut [T]) {
        let [h, w, d] = self.spatial;
        let (cin, k) = (self.cin, self.k());
        for (r, v) in (v0..v1).enumerate() {
            let (vh, vw, vd) = ((v / d) / w, (v / d) % w, v % d);
            let row = &mut col[r * k..(r + 1) * k];
            for (t, off) in self.offsets.iter().enumerate() {
                let dst = &mut row[t * cin..(t + 1) * cin];
                let (sh, sw, sd) = (vh as isize + off[0], vw as isize + off[1], vd as isize + off[2]);
                if sh < 0 || sw < 0 || sd < 0 || sh >= h as isize || sw >= w as isize || sd >= d as isize {
                    dst.fill(T::zero());
                } else {
                    let src = ((sh as usize * w + sw as usize) * d + sd as usize) * cin;
                    dst.copy_from_slice(&sample[src..src + cin]);
                }
            }
        }
    }

    fn scatter_add<T: Real>(&self, col: &[T], v0: usize, v1: usize, sample: &mut [T]) {
        let [h, w, d] = self.spatial;
        let (cin, k) = (self.cin, self.k());
        for (r, v) in (v0..v1).enumerate() {
            let (vh, vw, vd) = ((v / d) / w, (v / d) % w, v % d);
            let row = &col[r * k..(r + 1) * k];
            for (t, off) in self.offsets.iter().enumerate() {
                let (sh, sw, sd) = (vh as isize + off[0], vw as isize + off[1], vd as isize + off[2]);
                if sh < 0 || sw < 0 || sd < 0 || sh >= h as isize || sw >= w as isize || sd >= d as isize {
                    continue;
                }
                let dst = ((sh as usize * w + sw as usize) * d + sd as usize) * cin;
                for (o, &g) in sample[dst..dst + cin].iter_mut().zip(&row[t * cin..(t + 1) * cin]) {
                    *o += g;
                }
            }
        }
    }
}

/// Output index range `[lo, hi)` along one axis for which `i + off` stays
/// inside `0..n`.
fn valid_span(off: isize, n: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Calls `f(out_voxel, src_voxel, len)` for each contiguous run of in-bounds
/// voxel pairs of one tap. With no depth offset a whole row segment is one run.
fn tap_runs(off: [isize; 3], [h, w, d]: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let (h0, h1) = valid_span(off[0], h);
    let (w0, w1) = valid_span(off[1], w);
    let (d0, d1) = valid_span(off[2], d);
    if w0 == w1 || d0 == d1 {
        return;
    }
    for oh in h0..h1 {
        let sh = (oh as isize + off[0]) as usize;
        if off[2] == 0 {
            let sw0 = (w0 as isize + off[1]) as usize;
            f((oh * w + w0) * d, (sh * w + sw0) * d, (w1 - w0) * d);
            continue;
        }
        for ow in w0..w1 {
            let sw = (ow as isize + off[1]) as usize;
            let (ob, sb) = ((oh * w + ow) * d, (sh * w + sw) * d);
            f(ob + d0, (sb as isize + d0 as isize + off[2]) as usize, d1 - d0);
        }
    }
}

/// Eight independent partial sums so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

/// Channels-last `[v, c]` to planar `[c, v]`.
fn planar<T: Real>(xs: &[T], c: usize) -> Vec<T> {
    let v = xs.len() / c;
    let mut out = vec![T::zero(); xs.len()];
    for (i, px) in xs.chunks_exact(c).enumerate() {
        for (ci, &x) in px.iter().enumerate() {
            out[ci * v + i] = x;
        }
    }
    out
}

fn interleave_add<T: Real>(planes: &[T], c: usize, out: &mut [T]) {
    let v = out.len() / c;
    for (i, px) in out.chunks_exact_mut(c).enumerate() {
        for (ci, o) in px.iter_mut().enumerate() {
            *o += planes[ci * v + i];
        }
    }
}

fn direct_forward<T: Real>(xs: &[T], w: &[T], offsets: &[[isize; 3]], spatial: [usize; 3], cin: usize, cout: usize, ys: &mut [T]) {
    let v = spatial.iter().product::<usize>();
    let xp = planar(xs, cin);
    let mut yp = vec![T::zero(); v * cout];
    for (t, &off) in offsets.iter().enumerate() {
        let wt = &w[t * cin * cout..(t + 1) * cin * cout];
        tap_runs(off, spatial, |o, s, len| {
            for ci in 0..cin {
                let x = &xp[ci * v + s..ci * v + s + len];
                for co in 0..cout {
                    let wv = wt[ci * cout + co];
                    for (y, &xv) in yp[co * v + o..co * v + o + len].iter_mut().zip(x) {
                        *y += wv * xv;
                    }
                }
            }
        });
    }
    interleave_add(&yp, cout, ys);
}

#[allow(clippy::too_many_arguments)]
fn direct_backward<T: Real>(
    xs: &[T],
    w: &[T],
    offsets: &[[isize; 3]],
    spatial: [usize; 3],
    cin: usize,
    cout: usize,
    dys: &[T],
    dw: &mut [T],
    dxs: Option<&mut [T]>,
) {
    let v = spatial.iter().product::<usize>();
    let xp = planar(xs, cin);
    let gp = planar(dys, cout);
    let want_dx = dxs.is_some();
    let mut dxp = vec![T::zero(); if want_dx { v * cin } else { 0 }];
    for (t, &off) in offsets.iter().enumerate() {
        let wt = &w[t * cin * cout..(t + 1) * cin * cout];
        let dwt = &mut dw[t * cin * cout..(t + 1) * cin * cout];
        tap_runs(off, spatial, |o, s, len| {
            for ci in 0..cin {
                let x = &xp[ci * v + s..ci * v + s + len];
                for co in 0..cout {
                    let g = &gp[co * v + o..co * v + o + len];
                    dwt[ci * cout + co] += dot(x, g);
                    if want_dx {
                        let wv = wt[ci * cout + co];
                        for (d, &gv) in dxp[ci * v + s..ci * v + s + len].iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        });
    }
    if let Some(dx) = dxs {
        interleave_add(&dxp, cin, dx);
    }
}

/// Same-shape convolution; `w` has `taps · c_in · c_out` elements.
pub fn conv3d<T: Real>(x: &Tensor5<T>, w: &[T], bias: Option<&[T]>, geom: &ConvGeometry, cout: usize) -> Tensor5<T> {
    let [n, h, wd, d, cin] = x.shape();
    assert_eq!(w.len(), geom.taps() * cin * cout, "weight size");
    let v = h * wd * d;
    let mut out = Tensor5::zeros([n, h, wd, d, cout]);

    if geom.is_pointwise() {
        matmul(n * v, cin, cout, x.data(), w, T::zero(), out.data_mut());
    } else if cin * cout <= DIRECT_MAX_CHANNELS {
        let offsets = geom.tap_offsets();
        out.data_mut()
            .par_chunks_mut(v * cout)
            .enumerate()
            .for_each(|(ni, ys)| direct_forward(x.sample(ni), w, &offsets, [h, wd, d], cin, cout, ys));
    } else {
        let cols = Im2col {
            offsets: geom.tap_offsets(),
            spatial: [h, wd, d],
            cin,
        };
        let k = cols.k();
        let rows = cols.tile_rows();
        let tiles_per_sample = v.div_ceil(rows);
        out.data_mut()
            .par_chunks_mut(v * cout)
            .enumerate()
            .flat_map(|(ni, o)| o.par_chunks_mut(rows * cout).enumerate().map(move |(ti, t)| (ni, ti, t)))
            .for_each_init(
                || vec![T::zero(); rows * k],
                |col, (ni, ti, o)| {
                    debug_assert!(ti < tiles_per_sample);
                    let v0 = ti * rows;
                    let v1 = (v0 + rows).min(v);
                    let col = &mut col[..(v1 - v0) * k];
                    cols.fill(x.sample(ni), v0, v1, col);
                    matmul(v1 - v0, k, cout, col, w, T::zero(), o);
                },
            );
    }

    if let Some(b) = bias {
        for row in out.data_mut().chunks_exact_mut(cout) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `dw`/`db` and returns the input
/// gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &Tensor5<T>,
    w: &[T],
    geom: &ConvGeometry,
    cout: usize,
    dy: &Tensor5<T>,
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor5<T>> {
    let [n, h, wd, d, cin] = x.shape();
    assert_eq!(dy.shape(), [n, h, wd, d, cout]);
    let v = h * wd * d;
    let k = geom.taps() * cin;

    if let Some(db) = db {
        for row in dy.data().chunks_exact(cout) {
            for (g, &r) in db.iter_mut().zip(row) {
                *g += r;
            }
        }
    }

    if geom.is_pointwise() {
        matmul_tn(cin, n * v, cout, x.data(), dy.data(), T::one(), dw);
        return need_dx.then(|| {
            let mut dx = Tensor5::zeros(x.shape());
            matmul_nt(n * v, cout, cin, dy.data(), w, T::zero(), dx.data_mut());
            dx
        });
    }

    let cols = Im2col {
        offsets: geom.tap_offsets(),
        spatial: [h, wd, d],
        cin,
    };
    let rows = cols.tile_rows();
    let direct = cin * cout <= DIRECT_MAX_CHANNELS;

    // One partial weight gradient per sample, reduced in sample order so the
    // result does not depend on the thread count.
    let partials: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut dwp = vec![T::zero(); k * cout];
            let mut dxs = need_dx.then(|| vec![T::zero(); v * cin]);
            if direct {
                let (xs, dys) = (x.sample(ni), dy.sample(ni));
                direct_backward(xs, w, &cols.offsets, [h, wd, d], cin, cout, dys, &mut dwp, dxs.as_deref_mut());
                return (dwp, dxs);
            }
            let mut col = vec![T::zero(); rows * k];
            let mut dcol = if need_dx { vec![T::zero(); rows * k] } else { Vec::new() };
            let dys = dy.sample(ni);
            let mut v0 = 0;
            while v0 < v {
                let v1 = (v0 + rows).min(v);
                let r = v1 - v0;
                let col = &mut col[..r * k];
                cols.fill(x.sample(ni), v0, v1, col);
                let dyt = &dys[v0 * cout..v1 * cout];
                matmul_tn(k, r, cout, col, dyt, T::one(), &mut dwp);
                if let Some(dxs) = dxs.as_mut() {
                    let dcol = &mut dcol[..r * k];
                    matmul_nt(r, cout, k, dyt, w, T::zero(), dcol);
                    cols.scatter_add(dcol, v0, v1, dxs);
                }
                v0 = v1;
            }
            (dwp, dxs)
        })
        .collect();

    let mut dx = need_dx.then(|| Vec::with_capacity(n * v * cin));
    for (dwp, dxs) in partials {
        for (g, p) in dw.iter_mut().zip(&dwp) {
            *g += *p;
        }
        if let (Some(dx), Some(dxs)) = (dx.as_mut(), dxs) {
            dx.extend_from_slice(&dxs);
        }
    }
    dx.map(|data| Tensor5::from_vec(x.shape(), data).expect("shape preserved"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn conv_reference(x: &Tensor5<f64>, w: &[f64], b: &[f64], geom: &ConvGeometry, cout: usize) -> Tensor5<f64> {
        let [n, h, wd, d, cin] = x.shape();
        let pad = geom.pad_before();
        let [kh, kw, kd] = geom.kernel;
        let mut out = Tensor5::zeros([n, h, wd, d, cout]);
        for ni in 0..n {
            for i in 0..h {
                for j in 0..wd {
                    for l in 0..d {
                        for co in 0..cout {
                            let mut acc = b[co];
                            for a in 0..kh {
                                for bb in 0..kw {
                                    for e in 0..kd {
                                        let si = i as isize + (a * geom.dilation[0]) as isize - pad[0] as isize;
                                        let sj = j as isize + (bb * geom.dilation[1]) as isize - pad[1] as isize;
                                        let sl = l as isize + (e * geom.dilation[2]) as isize - pad[2] as isize;
                                        if si < 0 || sj < 0 || sl < 0 || si >= h as isize || sj >= wd as isize || sl >= d as isize {
                                            continue;
                                        }
                                        for ci in 0..cin {
                                            let t = (a * kw + bb) * kd + e;
                                            acc += w[(t * cin + ci) * cout + co]
                                                * x.get([ni, si as usize, sj as usize, sl as usize, ci]);
                                        }
                                    }
                                }
                            }
                            *out.get_mut([ni, i, j, l, co]) = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(i: usize, salt: f64) -> f64 {
        ((i as f64 + 1.0) * 12.9898 + salt).sin() * 0.5
    }

    #[test]
    fn matches_reference_for_mixed_geometries() {
        for (kernel, dil) in [
            ([3, 3, 1], [1, 1, 1]),
            ([3, 3, 3], [2, 2, 1]),
            ([14, 14, 1], [1, 1, 1]),
            ([1, 1, 1], [1, 1, 1]),
            ([2, 3, 2], [1, 2, 1]),
        ] {
            let geom = ConvGeometry::new(kernel, dil);
            // 3→2 takes the direct path, 16→17 the im2col path
            for (cin, cout) in [(3, 2), (16, 17)] {
                let x = Tensor5::from_fn([2, 9, 7, 4, cin], |[n, h, w, d, c]| pseudo(n * 1000 + h * 100 + w * 10 + d + c * 7, 0.3));
                let w: Vec<f64> = (0..geom.taps() * cin * cout).map(|i| pseudo(i, 1.7)).collect();
                let b: Vec<f64> = (0..cout).map(|i| 0.25 - 0.5 * i as f64).collect();
                let got = conv3d(&x, &w, Some(&b), &geom, cout);
                let want = conv_reference(&x, &w, &b, &geom, cout);
                for (g, e) in got.data().iter().zip(want.data()) {
                    assert!((g - e).abs() < 1e-12, "{kernel:?} {dil:?} {cin}->{cout}: {g} vs {e}");
                }
            }
        }
    }

    #[test]
    fn even_kernel_pads_seven_then_six() {
        let g = ConvGeometry::dense([14, 14, 1]);
        assert_eq!(g.pad_before(), [7, 7, 0]);
        assert_eq!(g.pad_after(), [6, 6, 0]);
        let g = ConvGeometry::new([3, 3, 3], [4, 4, 1]);
        assert_eq!(g.pad_before(), [4, 4, 1]);
        assert_eq!(g.pad_after(), [4, 4, 1]);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> is bilinear: d/dx and d/dw recovered via finite differences
        let geom = ConvGeometry::new([3, 3, 3], [2, 1, 1]);
        for (cin, cout) in [(2, 3), (16, 17)] {
            let x = Tensor5::from_fn([2, 5, 4, 3, cin], |[n, h, w, d, c]| pseudo(n * 999 + h * 77 + w * 13 + d * 5 + c, 0.1));
            let w: Vec<f64> = (0..geom.taps() * cin * cout).map(|i| pseudo(i, 2.2)).collect();
            let dy = Tensor5::from_fn([2, 5, 4, 3, cout], |[n, h, w, d, c]| pseudo(n * 31 + h * 17 + w * 11 + d * 3 + c, 4.4));
            let objective = |x: &Tensor5<f64>, w: &[f64]| -> f64 {
                conv3d(x, w, None, &geom, cout).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
            };
            let mut dw = vec![0.0; w.len()];
            let dx = conv3d_backward(&x, &w, &geom, cout, &dy, &mut dw, None, true).unwrap();
            // linear in both arguments, so a unit perturbation is exact
            for i in [0, 7, 33, dw.len() - 1] {
                let mut wp = w.clone();
                wp[i] += 1.0;
                let fd = objective(&x, &wp) - objective(&x, &w);
                assert!((fd - dw[i]).abs() < 1e-9);
            }
            for i in [0, 5, 61, x.data().len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[i] += 1.0;
                let fd = objective(&xp, &w) - objective(&x, &w);
                assert!((fd - dx.data()[i]).abs() < 1e-9);
            }
        }
    }
}
