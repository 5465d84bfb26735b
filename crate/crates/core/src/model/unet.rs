//! Encoder/decoder assembly, forward pass and hand-written backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::aspp::{AsppCache, AsppLayer};
use super::attention::{AttentionCache, AttentionLayer};
use super::config::ModelConfig;
use super::layers::{record, Block, BlockCache, ConvLayer, LayerInfo, LayerKind};
use super::params::{Gradients, ParamBuilder, ParamKind, Parameters};
use crate::error::{Error, Result};
use crate::nn::resample::{conv_transpose, conv_transpose_backward, max_pool, max_pool_backward};
use crate::nn::ConvGeometry;
use crate::tensor::{concat_channels, split_channels, Real, Tensor5};

#[derive(Clone, Debug)]
pub struct UpLayer {
    pub path: String,
    pub weight: usize,
    pub bias: usize,
    pub kernel: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

/// Layer structure derived from a [`ModelConfig`]; holds parameter ids only.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub encoders: Vec<Block>,
    pub bottleneck: Block,
    pub aspp: Option<AsppLayer>,
    /// Indexed by the level the upsampler produces.
    pub ups: Vec<UpLayer>,
    pub attention: Vec<Option<AttentionLayer>>,
    pub decoders: Vec<Block>,
    pub head: ConvLayer,
    pub pool_kernel: [usize; 3],
}

impl Architecture {
    fn build<T: Real>(cfg: &ModelConfig, b: &mut ParamBuilder<T>) -> Self {
        let skips = cfg.levels - 1;
        let mut encoders = Vec::with_capacity(skips);
        let mut c_in = 1;
        for l in 0..skips {
            encoders.push(Block::build(b, &format!("enc{l}"), cfg.encoder_kernel, c_in, cfg.channels(l), cfg.norm, cfg.gn_groups));
            c_in = cfg.channels(l);
        }
        let cb = cfg.bottleneck_channels();
        let bottleneck = Block::build(b, "bottleneck", cfg.bottleneck_kernel, c_in, cb, cfg.norm, cfg.gn_groups);
        let aspp = cfg
            .use_aspp
            .then(|| AsppLayer::build(b, "aspp", cb, &cfg.aspp_rates, cfg.gn_groups, cfg.aspp_pooling_branch));

        // decoder parameters are allocated from the deepest level outwards
        let mut ups: Vec<Option<UpLayer>> = (0..skips).map(|_| None).collect();
        let mut attention: Vec<Option<AttentionLayer>> = (0..skips).map(|_| None).collect();
        let mut decoders: Vec<Option<Block>> = (0..skips).map(|_| None).collect();
        for l in (0..skips).rev() {
            let (ci, co) = (cfg.channels(l + 1), cfg.channels(l));
            let taps: usize = cfg.resample_kernel.iter().product();
            let path = format!("up{l}");
            let k = cfg.resample_kernel;
            let weight = b.weight(format!("{path}.weight"), vec![ci, k[0], k[1], k[2], co], ci);
            let bias = b.constant(format!("{path}.bias"), co, ParamKind::Bias, 0.0);
            debug_assert_eq!(b.params.get(weight).len(), ci * taps * co);
            ups[l] = Some(UpLayer { path, weight, bias, kernel: k, c_in: ci, c_out: co });
            if cfg.use_sam {
                attention[l] = Some(AttentionLayer::build(b, format!("sam{l}"), cfg.sam_kernel));
            }
            decoders[l] = Some(Block::build(b, &format!("dec{l}"), cfg.encoder_kernel, 2 * co, co, cfg.norm, cfg.gn_groups));
        }
        let head = ConvLayer::build(b, "head".into(), ConvGeometry::pointwise(), cfg.channels(0), cfg.out_classes);
        Self {
            encoders,
            bottleneck,
            aspp,
            ups: ups.into_iter().map(|u| u.expect("built")).collect(),
            attention,
            decoders: decoders.into_iter().map(|d| d.expect("built")).collect(),
            head,
            pool_kernel: cfg.resample_kernel,
        }
    }

    /// Every layer in execution order.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut v = Vec::new();
        for (l, e) in self.encoders.iter().enumerate() {
            v.extend(e.infos());
            v.push(LayerInfo {
                path: format!("pool{l}"),
                kind: LayerKind::MaxPool { kernel: self.pool_kernel },
            });
        }
        v.extend(self.bottleneck.infos());
        if let Some(a) = &self.aspp {
            v.extend(a.infos());
        }
        for l in (0..self.decoders.len()).rev() {
            let u = &self.ups[l];
            v.push(LayerInfo {
                path: u.path.clone(),
                kind: LayerKind::ConvTranspose { kernel: u.kernel, c_in: u.c_in, c_out: u.c_out },
            });
            if let Some(a) = &self.attention[l] {
                v.extend(a.infos());
            }
            v.extend(self.decoders[l].infos());
        }
        v.push(self.head.info());
        v
    }
}

struct DecoderCache<T> {
    up_input: Tensor5<T>,
    attention: Option<AttentionCache<T>>,
    block: BlockCache<T>,
}

/// Activations retained by [`Model::forward_train`] for the backward pass.
pub struct ForwardCache<T> {
    encoders: Vec<(BlockCache<T>, Vec<u8>, [usize; 5])>,
    bottleneck: BlockCache<T>,
    aspp: Option<AsppCache<T>>,
    /// Indexed by level.
    decoders: Vec<Option<DecoderCache<T>>>,
    head_input: Tensor5<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub arch: Architecture,
    pub params: Parameters<T>,
}

/// Builds the default single-precision model.
pub fn build_model(cfg: &ModelConfig) -> Result<Model<f32>> {
    Model::build(cfg)
}

impl<T: Real> Model<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = ParamBuilder::new(&mut rng);
        let arch = Architecture::build(cfg, &mut b);
        Ok(Self {
            cfg: cfg.clone(),
            arch,
            params: b.params,
        })
    }

    /// Rebuilds the structure for `cfg` around existing parameters, checking
    /// that paths and shapes line up.
    pub fn with_parameters(cfg: &ModelConfig, params: Parameters<T>) -> Result<Self> {
        let template = Self::build(cfg)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config declares {} parameter arrays, checkpoint holds {}",
                template.params.len(),
                params.len()
            )));
        }
        for (a, b) in template.params.entries().iter().zip(params.entries()) {
            if a.path != b.path || a.shape != b.shape || a.kind != b.kind {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.path, a.shape, b.path, b.shape
                )));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            arch: template.arch,
            params,
        })
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        self.arch.layers()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_input(&self, x: &Tensor5<T>) -> Result<()> {
        if x.channels() != 1 {
            return Err(Error::Shape(format!("network input must have 1 channel, got {}", x.channels())));
        }
        self.cfg.check_spatial(x.spatial())
    }

    /// Inference forward pass: logits `(N, H, W, D, 2)`.
    pub fn forward(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        Ok(self.run(x, false, &mut None)?.0)
    }

    /// Forward pass that also returns the paths of the layers it executed.
    pub fn forward_traced(&self, x: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<String>)> {
        let mut trace = Vec::new();
        let y = self.run(x, false, &mut Some(&mut trace))?.0;
        Ok((y, trace))
    }

    pub fn forward_train(&self, x: &Tensor5<T>) -> Result<(Tensor5<T>, ForwardCache<T>)> {
        let (y, c) = self.run(x, true, &mut None)?;
        Ok((y, c.expect("training pass keeps caches")))
    }

    fn run(
        &self,
        x: &Tensor5<T>,
        train: bool,
        trace: &mut Option<&mut Vec<String>>,
    ) -> Result<(Tensor5<T>, Option<ForwardCache<T>>)> {
        self.check_input(x)?;
        let p = &self.params;
        let a = &self.arch;
        let skips = a.encoders.len();

        let mut skip_feats = Vec::with_capacity(skips);
        let mut enc_caches = Vec::new();
        let mut cur = x.clone();
        for (l, enc) in a.encoders.iter().enumerate() {
            let (e, c) = enc.forward(p, &cur, train, trace);
            record(trace, &format!("pool{l}"));
            let (pooled, arg) = max_pool(&e, a.pool_kernel)?;
            if let Some(c) = c {
                enc_caches.push((c, arg, e.shape()));
            }
            skip_feats.push(e);
            cur = pooled;
        }

        let (mut bott, bott_cache) = a.bottleneck.forward(p, &cur, train, trace);
        let mut aspp_cache = None;
        if let Some(aspp) = &a.aspp {
            let (y, c) = aspp.forward(p, &bott, train, trace)?;
            bott = y;
            aspp_cache = c;
        }

        let mut dec_caches: Vec<Option<DecoderCache<T>>> = (0..skips).map(|_| None).collect();
        let mut cur = bott;
        for l in (0..skips).rev() {
            let up = &a.ups[l];
            record(trace, &up.path);
            let u = conv_transpose(&cur, p.get(up.weight), p.get(up.bias), up.kernel, up.c_out);
            let skip = skip_feats.pop().expect("one skip per level");
            let (s, att_cache) = match &a.attention[l] {
                Some(att) => att.forward(p, &skip, train, trace),
                None => (skip, None),
            };
            let cat = concat_channels(&s, &u)?;
            let (d, bc) = a.decoders[l].forward(p, &cat, train, trace);
            if let Some(block) = bc {
                dec_caches[l] = Some(DecoderCache {
                    up_input: cur,
                    attention: att_cache,
                    block,
                });
            }
            cur = d;
        }

        record(trace, &a.head.path);
        let logits = a.head.forward(p, &cur);
        debug_assert!(logits.all_finite(), "non-finite logits");
        let cache = train.then(|| ForwardCache {
            encoders: enc_caches,
            bottleneck: bott_cache.expect("train"),
            aspp: aspp_cache,
            decoders: dec_caches,
            head_input: cur,
        });
        Ok((logits, cache))
    }

    /// Gradients of a scalar loss given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor5<T>) -> Gradients<T> {
        let p = &self.params;
        let a = &self.arch;
        let mut g = p.zeros_like();
        let skips = a.encoders.len();

        let mut d = a.head.backward(p, &mut g, &cache.head_input, dlogits, true).expect("dx");
        let mut d_skip: Vec<Option<Tensor5<T>>> = (0..skips).map(|_| None).collect();
        for (l, slot) in d_skip.iter_mut().enumerate() {
            let dc = cache.decoders[l].as_ref().expect("decoder cache");
            let dcat = a.decoders[l].backward(p, &mut g, &dc.block, d, true).expect("dx");
            let c_skip = a.ups[l].c_out;
            let (ds, du) = split_channels(&dcat, c_skip);
            *slot = Some(match (&a.attention[l], &dc.attention) {
                (Some(att), Some(ac)) => att.backward(p, &mut g, ac, &ds),
                _ => ds,
            });
            let up = &a.ups[l];
            let (dw, db) = g.pair_mut(up.weight, up.bias);
            d = conv_transpose_backward(&dc.up_input, p.get(up.weight), up.kernel, up.c_out, &du, dw, db, true).expect("dx");
        }

        if let (Some(aspp), Some(ac)) = (&a.aspp, &cache.aspp) {
            d = aspp.backward(p, &mut g, ac, &d);
        }
        let mut d_opt = a.bottleneck.backward(p, &mut g, &cache.bottleneck, d, true);

        for l in (0..skips).rev() {
            let (bc, arg, shape) = &cache.encoders[l];
            let mut de = max_pool_backward(*shape, a.pool_kernel, arg, &d_opt.take().expect("dx"));
            crate::nn::add_into(&mut de, d_skip[l].as_ref().expect("skip gradient"));
            d_opt = a.encoders[l].backward(p, &mut g, bc, de, l > 0);
        }
        g
    }

    /// Folds batch-norm statistics from a training pass into running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let a = &self.arch;
        let p = &mut self.params;
        for (enc, (bc, _, _)) in a.encoders.iter().zip(&cache.encoders) {
            enc.update_running(p, bc);
        }
        a.bottleneck.update_running(p, &cache.bottleneck);
        for (dec, dc) in a.decoders.iter().zip(&cache.decoders) {
            if let Some(dc) = dc {
                dec.update_running(p, &dc.block);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}
