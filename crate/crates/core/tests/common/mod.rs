//! Independent reference implementations used as test oracles. Written as
//! plain index loops over flat buffers, sharing no code with the library.

#![allow(dead_code)]

use std::collections::VecDeque;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3], density: f64) -> Array3<u8> {
    Array3::from_shape_fn(shape, |_| u8::from(rng.random_bool(density)))
}

/// Random blobs: a few random boxes, so components have real extent.
pub fn random_blobs(rng: &mut ChaCha8Rng, shape: [usize; 3], n: usize) -> Array3<u8> {
    let mut m = Array3::<u8>::zeros(shape);
    for _ in 0..n {
        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..shape[a]));
        let ext: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=3));
        for i in lo[0]..(lo[0] + ext[0]).min(shape[0]) {
            for j in lo[1]..(lo[1] + ext[1]).min(shape[1]) {
                for k in lo[2]..(lo[2] + ext[2]).min(shape[2]) {
                    m[[i, j, k]] = 1;
                }
            }
        }
    }
    m
}

fn flat(a: &Array3<u8>) -> (Vec<bool>, [usize; 3]) {
    let s = a.shape();
    let shape = [s[0], s[1], s[2]];
    let mut v = vec![false; a.len()];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                v[(i * shape[1] + j) * shape[2] + k] = a[[i, j, k]] != 0;
            }
        }
    }
    (v, shape)
}

pub fn oracle_dice(p: &Array3<u8>, g: &Array3<u8>) -> f64 {
    let (p, _) = flat(p);
    let (g, _) = flat(g);
    let mut inter = 0usize;
    let mut total = 0usize;
    for i in 0..p.len() {
        if p[i] && g[i] {
            inter += 1;
        }
        if p[i] {
            total += 1;
        }
        if g[i] {
            total += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn oracle_avd(p: &Array3<u8>, g: &Array3<u8>) -> Option<f64> {
    let vp = p.iter().filter(|&&v| v != 0).count() as f64;
    let vg = g.iter().filter(|&&v| v != 0).count() as f64;
    (vg > 0.0).then(|| (vp - vg).abs() / vg)
}

fn adjacent(d: [i64; 3], conn: u8) -> bool {
    let l1: i64 = d.iter().map(|x| x.abs()).sum();
    let linf = d.iter().map(|x| x.abs()).max().unwrap();
    match conn {
        6 => l1 == 1,
        18 => linf == 1 && l1 <= 2,
        26 => linf == 1,
        _ => panic!("connectivity {conn}"),
    }
}

/// Breadth-first labelling; returns one voxel list per component.
pub fn oracle_components(a: &Array3<u8>, conn: u8) -> Vec<Vec<usize>> {
    let (fg, [h, w, d]) = flat(a);
    let mut seen = vec![false; fg.len()];
    let mut comps = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        let mut comp = Vec::new();
        while let Some(v) = q.pop_front() {
            comp.push(v);
            let (i, j, k) = ((v / d / w) as i64, ((v / d) % w) as i64, (v % d) as i64);
            for di in -1..=1 {
                for dj in -1..=1 {
                    for dk in -1..=1 {
                        if !adjacent([di, dj, dk], conn) {
                            continue;
                        }
                        let (a, b, c) = (i + di, j + dj, k + dk);
                        if a < 0 || b < 0 || c < 0 || a >= h as i64 || b >= w as i64 || c >= d as i64 {
                            continue;
                        }
                        let u = ((a as usize) * w + b as usize) * d + c as usize;
                        if fg[u] && !seen[u] {
                            seen[u] = true;
                            q.push_back(u);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// `(f1, n_truth, n_detected, n_false)` with the declared empty conventions.
pub fn oracle_f1(p: &Array3<u8>, g: &Array3<u8>, conn: u8) -> (f64, usize, usize, usize) {
    let (pf, _) = flat(p);
    let (gf, _) = flat(g);
    let gc = oracle_components(g, conn);
    let pc = oracle_components(p, conn);
    let detected = gc.iter().filter(|c| c.iter().any(|&v| pf[v])).count();
    let false_pos = pc.iter().filter(|c| !c.iter().any(|&v| gf[v])).count();
    let f1 = if detected + false_pos > 0 {
        detected as f64 / (detected + false_pos) as f64
    } else if gc.is_empty() {
        1.0
    } else {
        0.0
    };
    (f1, gc.len(), detected, false_pos)
}

/// Attention map of `F ⊙ σ(conv([avg; max]))` by direct summation.
/// `f` is `[h][w][d][c]` flattened for one sample; the kernel is `kh × kw × kd`
/// with `(k − 1)·½` rounded up as leading zero padding.
pub fn oracle_attention(f: &[f64], [h, w, d, c]: [usize; 4], weight: &[f64], bias: f64, [kh, kw, kd]: [usize; 3]) -> Vec<f64> {
    let mut avg = vec![0.0; h * w * d];
    let mut max = vec![0.0; h * w * d];
    for v in 0..h * w * d {
        let row = &f[v * c..(v + 1) * c];
        avg[v] = row.iter().sum::<f64>() / c as f64;
        max[v] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let lead = [kh / 2, kw / 2, kd / 2];
    let mut m = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                let mut acc = bias;
                for a in 0..kh {
                    for b in 0..kw {
                        for e in 0..kd {
                            let (sy, sx, sz) = (y as i64 + a as i64 - lead[0] as i64, x as i64 + b as i64 - lead[1] as i64, z as i64 + e as i64 - lead[2] as i64);
                            if sy < 0 || sx < 0 || sz < 0 || sy >= h as i64 || sx >= w as i64 || sz >= d as i64 {
                                continue;
                            }
                            let s = ((sy as usize) * w + sx as usize) * d + sz as usize;
                            let t = (a * kw + b) * kd + e;
                            acc += weight[t * 2] * avg[s] + weight[t * 2 + 1] * max[s];
                        }
                    }
                }
                m[(y * w + x) * d + z] = 1.0 / (1.0 + (-acc).exp());
            }
        }
    }
    m
}
