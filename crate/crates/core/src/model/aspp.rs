//! 3D atrous spatial pyramid pooling: parallel conv-GN-ReLU branches (one
//! pointwise, one dilated 3×3×3 per rate), optionally an image-level pooling
//! branch, concatenated on channels and fused back by a pointwise conv.

use super::layers::{record, ConvLayer, LayerInfo, LayerKind, NormLayer, Stage, StageCache};
use super::params::{Gradients, ParamBuilder, Parameters};
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_in_place, ConvGeometry};
use crate::tensor::{Real, Tensor5};

#[derive(Clone, Debug)]
pub struct AsppLayer {
    pub path: String,
    pub rates: Vec<[usize; 3]>,
    /// Pointwise branch first, then one dilated branch per rate.
    pub branches: Vec<Stage>,
    pub pooling: Option<ConvLayer>,
    pub fuse: ConvLayer,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct AsppCache<T> {
    input: Tensor5<T>,
    branches: Vec<StageCache<T>>,
    pooled: Option<(Tensor5<T>, Tensor5<T>)>,
    concat: Tensor5<T>,
}

impl AsppLayer {
    pub(crate) fn build<T: Real>(
        b: &mut ParamBuilder<T>,
        path: &str,
        channels: usize,
        rates: &[[usize; 3]],
        groups: usize,
        pooling_branch: bool,
    ) -> Self {
        let mut branches = Vec::with_capacity(rates.len() + 1);
        let geoms = std::iter::once(ConvGeometry::pointwise()).chain(rates.iter().map(|&r| ConvGeometry::new([3, 3, 3], r)));
        for (i, geom) in geoms.enumerate() {
            let conv = ConvLayer::build(b, format!("{path}.branch{i}.conv"), geom, channels, channels);
            let norm = NormLayer::group(b, format!("{path}.branch{i}.norm"), channels, groups);
            branches.push(Stage { conv, norm });
        }
        let pooling = pooling_branch
            .then(|| ConvLayer::build(b, format!("{path}.pool.conv"), ConvGeometry::pointwise(), channels, channels));
        let n_in = branches.len() + usize::from(pooling.is_some());
        let fuse = ConvLayer::build(b, format!("{path}.fuse"), ConvGeometry::pointwise(), n_in * channels, channels);
        Self {
            path: path.to_string(),
            rates: rates.to_vec(),
            branches,
            pooling,
            fuse,
            channels,
        }
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        let mut v = vec![LayerInfo {
            path: self.path.clone(),
            kind: LayerKind::Aspp {
                rates: self.rates.clone(),
                pooling_branch: self.pooling.is_some(),
            },
        }];
        for b in &self.branches {
            v.extend(b.infos());
        }
        if let Some(p) = &self.pooling {
            v.push(LayerInfo {
                path: format!("{}.pool", self.path),
                kind: LayerKind::GlobalPool,
            });
            v.push(p.info());
        }
        v.push(self.fuse.info());
        v
    }

    /// Rejects dilations whose off-centre taps can only ever read padding.
    pub fn check_extent(&self, spatial: [usize; 3]) -> Result<()> {
        for r in &self.rates {
            for a in 0..3 {
                if spatial[a] > 1 && r[a] >= spatial[a] {
                    return Err(Error::Shape(format!(
                        "{}: dilation {r:?} exceeds feature extent {spatial:?} on axis {a}",
                        self.path
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        p: &Parameters<T>,
        x: &Tensor5<T>,
        train: bool,
        trace: &mut Option<&mut Vec<String>>,
    ) -> Result<(Tensor5<T>, Option<AsppCache<T>>)> {
        self.check_extent(x.spatial())?;
        record(trace, &self.path);
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        let mut caches = Vec::new();
        for b in &self.branches {
            let (y, c) = b.forward(p, x, train, trace);
            outs.push(y);
            caches.extend(c);
        }
        let mut pooled = None;
        if let Some(conv) = &self.pooling {
            record(trace, &format!("{}.pool", self.path));
            record(trace, &conv.path);
            let g = global_mean(x);
            let mut z = conv.forward(p, &g);
            relu_in_place(&mut z);
            outs.push(broadcast(&z, x.spatial()));
            if train {
                pooled = Some((g, z));
            }
        }
        let concat = concat_all(&outs);
        record(trace, &self.fuse.path);
        let y = self.fuse.forward(p, &concat);
        debug_assert!(y.all_finite(), "non-finite output in {}", self.path);
        let cache = train.then(|| AsppCache {
            input: x.clone(),
            branches: caches,
            pooled,
            concat,
        });
        Ok((y, cache))
    }

    pub fn backward<T: Real>(&self, p: &Parameters<T>, g: &mut Gradients<T>, cache: &AsppCache<T>, dy: &Tensor5<T>) -> Tensor5<T> {
        let dcat = self.fuse.backward(p, g, &cache.concat, dy, true).expect("dx requested");
        let parts = split_all(&dcat, self.channels);
        let mut dx = Tensor5::zeros(cache.input.shape());
        for ((b, c), d) in self.branches.iter().zip(&cache.branches).zip(parts.iter()) {
            let part = b.backward(p, g, &cache.input, c, d.clone(), true).expect("dx requested");
            crate::nn::add_into(&mut dx, &part);
        }
        if let (Some(conv), Some((gm, z))) = (&self.pooling, &cache.pooled) {
            let dz = relu_backward(z, reduce_spatial(parts.last().expect("pool part")));
            let dg = conv.backward(p, g, gm, &dz, true).expect("dx requested");
            let inv = T::one() / T::from_usize(cache.input.voxels()).expect("fits");
            let c = self.channels;
            let v = cache.input.voxels();
            for (ni, chunk) in dx.data_mut().chunks_exact_mut(v * c).enumerate() {
                let src = dg.sample(ni);
                for row in chunk.chunks_exact_mut(c) {
                    for (o, &s) in row.iter_mut().zip(src) {
                        *o += s * inv;
                    }
                }
            }
        }
        dx
    }
}

/// Functional entry point: runs an ASPP block over a bottleneck feature map.
pub fn aspp_3d<T: Real>(x: &Tensor5<T>, layer: &AsppLayer, params: &Parameters<T>) -> Result<Tensor5<T>> {
    Ok(layer.forward(params, x, false, &mut None)?.0)
}

fn global_mean<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let [n, _, _, _, c] = x.shape();
    let v = x.voxels();
    let mut g = Tensor5::zeros([n, 1, 1, 1, c]);
    for ni in 0..n {
        let mut acc = vec![0.0f64; c];
        for row in x.sample(ni).chunks_exact(c) {
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += r.as_f64();
            }
        }
        for (ch, a) in acc.into_iter().enumerate() {
            *g.get_mut([ni, 0, 0, 0, ch]) = T::from_f64_lossy(a / v as f64);
        }
    }
    g
}

fn broadcast<T: Real>(z: &Tensor5<T>, [h, w, d]: [usize; 3]) -> Tensor5<T> {
    let [n, _, _, _, c] = z.shape();
    let mut out = Tensor5::zeros([n, h, w, d, c]);
    let v = h * w * d;
    for (ni, chunk) in out.data_mut().chunks_exact_mut(v * c).enumerate() {
        let src = z.sample(ni);
        for row in chunk.chunks_exact_mut(c) {
            row.copy_from_slice(src);
        }
    }
    out
}

fn reduce_spatial<T: Real>(d: &Tensor5<T>) -> Tensor5<T> {
    let [n, _, _, _, c] = d.shape();
    let mut out = Tensor5::zeros([n, 1, 1, 1, c]);
    for ni in 0..n {
        for row in d.sample(ni).chunks_exact(c) {
            for (ch, &r) in row.iter().enumerate() {
                *out.get_mut([ni, 0, 0, 0, ch]) += r;
            }
        }
    }
    out
}

fn concat_all<T: Real>(parts: &[Tensor5<T>]) -> Tensor5<T> {
    let s = parts[0].shape();
    let c_total: usize = parts.iter().map(|p| p.channels()).sum();
    let rows = parts[0].data().len() / s[4];
    let mut data = Vec::with_capacity(rows * c_total);
    for r in 0..rows {
        for p in parts {
            let c = p.channels();
            data.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
    }
    Tensor5::from_vec([s[0], s[1], s[2], s[3], c_total], data).expect("consistent shapes")
}

fn split_all<T: Real>(x: &Tensor5<T>, c: usize) -> Vec<Tensor5<T>> {
    let s = x.shape();
    let k = s[4] / c;
    let rows = x.data().len() / s[4];
    let mut parts: Vec<Vec<T>> = (0..k).map(|_| Vec::with_capacity(rows * c)).collect();
    for row in x.data().chunks_exact(s[4]) {
        for (i, p) in parts.iter_mut().enumerate() {
            p.extend_from_slice(&row[i * c..(i + 1) * c]);
        }
    }
    parts
        .into_iter()
        .map(|d| Tensor5::from_vec([s[0], s[1], s[2], s[3], c], d).expect("consistent shapes"))
        .collect()
}
