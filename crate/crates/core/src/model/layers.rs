//! Parameterized layers: each resolves its weights by id in [`Parameters`] and
//! exposes a forward pass plus a backward pass over its own cache.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamBuilder, ParamKind, Parameters};
use crate::nn::norm::{self, NormCache};
use crate::nn::{conv3d, conv3d_backward, relu_backward, relu_in_place, ConvGeometry};
use crate::tensor::{Real, Tensor5};

/// One entry of a model's layer listing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub path: String,
    pub kind: LayerKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv { kernel: [usize; 3], dilation: [usize; 3], c_in: usize, c_out: usize },
    GroupNorm { groups: usize, channels: usize },
    BatchNorm { channels: usize },
    MaxPool { kernel: [usize; 3] },
    ConvTranspose { kernel: [usize; 3], c_in: usize, c_out: usize },
    SpatialAttention { kernel: [usize; 3] },
    Aspp { rates: Vec<[usize; 3]>, pooling_branch: bool },
    GlobalPool,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub path: String,
    pub weight: usize,
    pub bias: usize,
    pub geom: ConvGeometry,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    pub(crate) fn build<T: Real>(b: &mut ParamBuilder<T>, path: String, geom: ConvGeometry, c_in: usize, c_out: usize) -> Self {
        let fan_in = geom.taps() * c_in;
        let weight = b.weight(format!("{path}.weight"), vec![geom.kernel[0], geom.kernel[1], geom.kernel[2], c_in, c_out], fan_in);
        let bias = b.constant(format!("{path}.bias"), c_out, ParamKind::Bias, 0.0);
        Self { path, weight, bias, geom, c_in, c_out }
    }

    pub fn info(&self) -> LayerInfo {
        LayerInfo {
            path: self.path.clone(),
            kind: LayerKind::Conv {
                kernel: self.geom.kernel,
                dilation: self.geom.dilation,
                c_in: self.c_in,
                c_out: self.c_out,
            },
        }
    }

    pub fn forward<T: Real>(&self, p: &Parameters<T>, x: &Tensor5<T>) -> Tensor5<T> {
        debug_assert_eq!(x.channels(), self.c_in, "{}", self.path);
        conv3d(x, p.get(self.weight), Some(p.get(self.bias)), &self.geom, self.c_out)
    }

    pub fn backward<T: Real>(
        &self,
        p: &Parameters<T>,
        g: &mut Gradients<T>,
        x: &Tensor5<T>,
        dy: &Tensor5<T>,
        need_dx: bool,
    ) -> Option<Tensor5<T>> {
        let mut db = std::mem::take(&mut g.0[self.bias]);
        let dx = conv3d_backward(x, p.get(self.weight), &self.geom, self.c_out, dy, g.get_mut(self.weight), Some(&mut db), need_dx);
        g.0[self.bias] = db;
        dx
    }
}

#[derive(Clone, Debug)]
pub enum NormLayer {
    Group { path: String, gamma: usize, beta: usize, groups: usize, channels: usize },
    Batch { path: String, gamma: usize, beta: usize, mean: usize, var: usize, channels: usize },
}

impl NormLayer {
    pub(crate) fn group<T: Real>(b: &mut ParamBuilder<T>, path: String, channels: usize, groups: usize) -> Self {
        let gamma = b.constant(format!("{path}.gamma"), channels, ParamKind::Gamma, 1.0);
        let beta = b.constant(format!("{path}.beta"), channels, ParamKind::Beta, 0.0);
        NormLayer::Group { path, gamma, beta, groups, channels }
    }

    pub(crate) fn batch<T: Real>(b: &mut ParamBuilder<T>, path: String, channels: usize) -> Self {
        let gamma = b.constant(format!("{path}.gamma"), channels, ParamKind::Gamma, 1.0);
        let beta = b.constant(format!("{path}.beta"), channels, ParamKind::Beta, 0.0);
        let mean = b.constant(format!("{path}.running_mean"), channels, ParamKind::RunningMean, 0.0);
        let var = b.constant(format!("{path}.running_var"), channels, ParamKind::RunningVar, 1.0);
        NormLayer::Batch { path, gamma, beta, mean, var, channels }
    }

    pub fn info(&self) -> LayerInfo {
        match self {
            NormLayer::Group { path, groups, channels, .. } => LayerInfo {
                path: path.clone(),
                kind: LayerKind::GroupNorm { groups: *groups, channels: *channels },
            },
            NormLayer::Batch { path, channels, .. } => LayerInfo {
                path: path.clone(),
                kind: LayerKind::BatchNorm { channels: *channels },
            },
        }
    }

    pub fn path(&self) -> &str {
        match self {
            NormLayer::Group { path, .. } | NormLayer::Batch { path, .. } => path,
        }
    }

    fn affine(&self) -> (usize, usize) {
        match *self {
            NormLayer::Group { gamma, beta, .. } | NormLayer::Batch { gamma, beta, .. } => (gamma, beta),
        }
    }

    /// Training mode returns the batch statistics for the backward pass.
    pub fn forward<T: Real>(&self, p: &Parameters<T>, x: &Tensor5<T>, train: bool) -> (Tensor5<T>, Option<NormCache>) {
        let (gamma, beta) = self.affine();
        match *self {
            NormLayer::Group { groups, .. } => {
                let (y, c) = norm::group_norm(x, groups, p.get(gamma), p.get(beta));
                (y, train.then_some(c))
            }
            NormLayer::Batch { mean, var, .. } => {
                if train {
                    let (y, c) = norm::batch_norm_train(x, p.get(gamma), p.get(beta));
                    (y, Some(c))
                } else {
                    (norm::batch_norm_eval(x, p.get(gamma), p.get(beta), p.get(mean), p.get(var)), None)
                }
            }
        }
    }

    pub fn backward<T: Real>(
        &self,
        p: &Parameters<T>,
        g: &mut Gradients<T>,
        x: &Tensor5<T>,
        cache: &NormCache,
        dy: &Tensor5<T>,
    ) -> Tensor5<T> {
        let (gamma, beta) = self.affine();
        let (dg, db) = g.pair_mut(gamma, beta);
        match *self {
            NormLayer::Group { groups, .. } => norm::group_norm_backward(x, dy, cache, groups, p.get(gamma), dg, db),
            NormLayer::Batch { .. } => norm::batch_norm_backward(x, dy, cache, p.get(gamma), dg, db),
        }
    }

    pub fn update_running<T: Real>(&self, p: &mut Parameters<T>, cache: &NormCache) {
        if let NormLayer::Batch { mean, var, .. } = *self {
            let mut rm = p.get(mean).to_vec();
            let mut rv = p.get(var).to_vec();
            norm::update_running(cache, &mut rm, &mut rv);
            p.get_mut(mean).copy_from_slice(&rm);
            p.get_mut(var).copy_from_slice(&rv);
        }
    }
}

/// conv → norm → ReLU.
#[derive(Clone, Debug)]
pub struct Stage {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

#[derive(Clone, Debug)]
pub struct StageCache<T> {
    pub conv_out: Tensor5<T>,
    pub norm: NormCache,
    pub out: Tensor5<T>,
}

impl Stage {
    pub fn forward<T: Real>(
        &self,
        p: &Parameters<T>,
        x: &Tensor5<T>,
        train: bool,
        trace: &mut Option<&mut Vec<String>>,
    ) -> (Tensor5<T>, Option<StageCache<T>>) {
        record(trace, &self.conv.path);
        let conv_out = self.conv.forward(p, x);
        debug_assert!(conv_out.all_finite(), "non-finite output in {}", self.conv.path);
        record(trace, self.norm.path());
        let (mut y, norm_cache) = self.norm.forward(p, &conv_out, train);
        relu_in_place(&mut y);
        debug_assert!(y.all_finite(), "non-finite output in {}", self.norm.path());
        let cache = norm_cache.map(|norm| StageCache {
            conv_out,
            norm,
            out: y.clone(),
        });
        (y, cache)
    }

    pub fn backward<T: Real>(
        &self,
        p: &Parameters<T>,
        g: &mut Gradients<T>,
        x: &Tensor5<T>,
        cache: &StageCache<T>,
        dy: Tensor5<T>,
        need_dx: bool,
    ) -> Option<Tensor5<T>> {
        let d = relu_backward(&cache.out, dy);
        let d = self.norm.backward(p, g, &cache.conv_out, &cache.norm, &d);
        self.conv.backward(p, g, x, &d, need_dx)
    }

    pub fn infos(&self) -> [LayerInfo; 2] {
        [self.conv.info(), self.norm.info()]
    }
}

/// Two conv-norm-ReLU stages.
#[derive(Clone, Debug)]
pub struct Block {
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    pub input: Tensor5<T>,
    pub stages: Vec<StageCache<T>>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build<T: Real>(
        b: &mut ParamBuilder<T>,
        path: &str,
        kernel: [usize; 3],
        c_in: usize,
        c_out: usize,
        norm: super::config::NormKind,
        groups: usize,
    ) -> Self {
        let stages = (1..=2)
            .map(|i| {
                let cin = if i == 1 { c_in } else { c_out };
                let conv = ConvLayer::build(b, format!("{path}.conv{i}"), ConvGeometry::dense(kernel), cin, c_out);
                let norm = match norm {
                    super::config::NormKind::Group => NormLayer::group(b, format!("{path}.norm{i}"), c_out, groups),
                    super::config::NormKind::Batch => NormLayer::batch(b, format!("{path}.norm{i}"), c_out),
                };
                Stage { conv, norm }
            })
            .collect();
        Self { stages }
    }

    pub fn forward<T: Real>(
        &self,
        p: &Parameters<T>,
        x: &Tensor5<T>,
        train: bool,
        trace: &mut Option<&mut Vec<String>>,
    ) -> (Tensor5<T>, Option<BlockCache<T>>) {
        let mut caches = Vec::new();
        let mut cur: Option<Tensor5<T>> = None;
        for stage in &self.stages {
            let input = cur.as_ref().unwrap_or(x);
            let (y, c) = stage.forward(p, input, train, trace);
            if let Some(c) = c {
                caches.push(c);
            }
            cur = Some(y);
        }
        let y = cur.expect("block has stages");
        let cache = train.then(|| BlockCache {
            input: x.clone(),
            stages: caches,
        });
        (y, cache)
    }

    pub fn backward<T: Real>(
        &self,
        p: &Parameters<T>,
        g: &mut Gradients<T>,
        cache: &BlockCache<T>,
        dy: Tensor5<T>,
        need_dx: bool,
    ) -> Option<Tensor5<T>> {
        let mut d = dy;
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let x = if i == 0 { &cache.input } else { &cache.stages[i - 1].out };
            let want = i > 0 || need_dx;
            {
                let dx = stage.backward(p, g, x, &cache.stages[i], d, want)?;
                d = dx
            }
        }
        Some(d)
    }

    pub fn update_running<T: Real>(&self, p: &mut Parameters<T>, cache: &BlockCache<T>) {
        for (s, c) in self.stages.iter().zip(&cache.stages) {
            s.norm.update_running(p, &c.norm);
        }
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        self.stages.iter().flat_map(|s| s.infos()).collect()
    }
}

pub(crate) fn record(trace: &mut Option<&mut Vec<String>>, path: &str) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(path.to_string());
    }
}
