//! 3D spatial attention gate.
//!
//! `F_sa = F ⊙ σ(conv_k([mean_c(F); max_c(F)]))`: the channel-wise average and
//! maximum form a two-channel descriptor, one convolution maps it to a single
//! logit per voxel, and the sigmoid of that logit rescales every channel.

use super::layers::{record, ConvLayer, LayerInfo, LayerKind};
use super::params::{Gradients, ParamBuilder, Parameters};
use crate::nn::{conv3d, conv3d_backward, sigmoid, ConvGeometry};
use crate::tensor::{Real, Tensor5};

#[derive(Clone, Debug)]
pub struct SpatialAttention<T> {
    /// `F ⊙ M`, same shape as the input.
    pub output: Tensor5<T>,
    /// The attention map `M`, one channel, strictly inside (0, 1).
    pub attention: Tensor5<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    input: Tensor5<T>,
    pooled: Tensor5<T>,
    argmax: Vec<u32>,
    attention: Tensor5<T>,
}

/// Channel-axis average and max pooling, concatenated as `[avg, max]`.
pub fn channel_descriptor<T: Real>(f: &Tensor5<T>) -> (Tensor5<T>, Vec<u32>) {
    let [n, h, w, d, c] = f.shape();
    let inv = T::one() / T::from_usize(c).expect("channel count fits");
    let mut pooled = Tensor5::zeros([n, h, w, d, 2]);
    let mut argmax = Vec::with_capacity(n * h * w * d);
    for (row, out) in f.data().chunks_exact(c).zip(pooled.data_mut().chunks_exact_mut(2)) {
        let mut sum = T::zero();
        let mut best = row[0];
        let mut arg = 0u32;
        for (i, &v) in row.iter().enumerate() {
            sum += v;
            if v > best {
                best = v;
                arg = i as u32;
            }
        }
        out[0] = sum * inv;
        out[1] = best;
        argmax.push(arg);
    }
    (pooled, argmax)
}

fn forward_impl<T: Real>(
    f: &Tensor5<T>,
    weight: &[T],
    bias: T,
    kernel: [usize; 3],
    keep: bool,
) -> (SpatialAttention<T>, Option<AttentionCache<T>>) {
    let (pooled, argmax) = channel_descriptor(f);
    let geom = ConvGeometry::dense(kernel);
    let mut attention = conv3d(&pooled, weight, Some(&[bias]), &geom, 1);
    for v in attention.data_mut() {
        *v = sigmoid(*v);
    }
    let c = f.channels();
    let mut output = f.clone();
    for (row, &m) in output.data_mut().chunks_exact_mut(c).zip(attention.data()) {
        for v in row {
            *v *= m;
        }
    }
    let cache = keep.then(|| AttentionCache {
        input: f.clone(),
        pooled,
        argmax,
        attention: attention.clone(),
    });
    (SpatialAttention { output, attention }, cache)
}

/// Applies the attention gate with convolution `weight` (`[kh, kw, kd, 2, 1]`).
pub fn spatial_attention_3d<T: Real>(f: &Tensor5<T>, weight: &[T], bias: T, kernel: [usize; 3]) -> SpatialAttention<T> {
    forward_impl(f, weight, bias, kernel, false).0
}

pub fn spatial_attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    weight: &[T],
    kernel: [usize; 3],
    dout: &Tensor5<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor5<T> {
    let c = cache.input.channels();
    let mut df = dout.clone();
    // direct path and dL/dM
    let mut dlogit = Tensor5::zeros(cache.attention.shape());
    for (((drow, frow), &m), dz) in df
        .data_mut()
        .chunks_exact_mut(c)
        .zip(cache.input.data().chunks_exact(c))
        .zip(cache.attention.data())
        .zip(dlogit.data_mut())
    {
        let mut dm = T::zero();
        for (g, &fv) in drow.iter_mut().zip(frow) {
            dm += *g * fv;
            *g *= m;
        }
        *dz = dm * m * (T::one() - m);
    }
    let geom = ConvGeometry::dense(kernel);
    let dpooled = conv3d_backward(&cache.pooled, weight, &geom, 1, &dlogit, dweight, Some(dbias), true)
        .expect("input gradient requested");
    let inv = T::one() / T::from_usize(c).expect("channel count fits");
    for ((drow, dp), &arg) in df.data_mut().chunks_exact_mut(c).zip(dpooled.data().chunks_exact(2)).zip(&cache.argmax) {
        let avg = dp[0] * inv;
        for g in drow.iter_mut() {
            *g += avg;
        }
        drow[arg as usize] += dp[1];
    }
    df
}

/// Attention gate on one skip connection.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub path: String,
    pub conv: ConvLayer,
}

impl AttentionLayer {
    pub(crate) fn build<T: Real>(b: &mut ParamBuilder<T>, path: String, kernel: [usize; 3]) -> Self {
        let conv = ConvLayer::build(b, format!("{path}.conv"), ConvGeometry::dense(kernel), 2, 1);
        Self { path, conv }
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        vec![
            LayerInfo {
                path: self.path.clone(),
                kind: LayerKind::SpatialAttention { kernel: self.conv.geom.kernel },
            },
            self.conv.info(),
        ]
    }

    pub fn forward<T: Real>(
        &self,
        p: &Parameters<T>,
        f: &Tensor5<T>,
        train: bool,
        trace: &mut Option<&mut Vec<String>>,
    ) -> (Tensor5<T>, Option<AttentionCache<T>>) {
        record(trace, &self.path);
        record(trace, &self.conv.path);
        let (sa, cache) = forward_impl(f, p.get(self.conv.weight), p.get(self.conv.bias)[0], self.conv.geom.kernel, train);
        debug_assert!(sa.output.all_finite(), "non-finite output in {}", self.path);
        (sa.output, cache)
    }

    pub fn backward<T: Real>(&self, p: &Parameters<T>, g: &mut Gradients<T>, cache: &AttentionCache<T>, dy: &Tensor5<T>) -> Tensor5<T> {
        let (dw, db) = g.pair_mut(self.conv.weight, self.conv.bias);
        spatial_attention_backward(cache, p.get(self.conv.weight), self.conv.geom.kernel, dy, dw, db)
    }
}
