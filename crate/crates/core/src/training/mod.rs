//! Minibatch training with Adam on the combined CE + Dice loss.

mod adam;
mod loss;

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use loss::{combined_loss, combined_loss_grad, LossValue, DICE_SMOOTH};

use crate::augmentation::{AugmentDraw, AugmentationConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{Model, ModelConfig};
use crate::preprocessing::{normalize_intensity, slice_z, to_canonical_on, training_target_with, PipelineConfig};
use crate::tensor::Tensor5;
use crate::volume_io::{dims, Case};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// `(w_ce, w_dice)`.
    pub loss_weights: [f64; 2],
    pub seed: u64,
    /// Write `ckpt_{step}.bin` every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 4,
            steps: 100,
            loss_weights: [0.5, 0.5],
            seed: 0,
            checkpoint_every: 0,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let w = self.loss_weights;
        if w.iter().any(|&x| !(x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config(format!("loss weights {w:?} must be >= 0 and not both zero")));
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

pub const TRACE_HEADER: &str = "step,total,ce,dice";

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Floats use the shortest exact representation, so equal traces give
    /// byte-identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.ce, r.dice));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRACE_HEADER) {
            return Err(Error::Config(format!("trace CSV must start with `{TRACE_HEADER}`")));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("trace CSV line {}: `{line}`", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            records.push(LossRecord {
                step: f[0].trim().parse().map_err(|_| bad())?,
                total: num(f[1])?,
                ce: num(f[2])?,
                dice: num(f[3])?,
            });
        }
        Ok(Self { records })
    }

    fn mean(rs: &[LossRecord]) -> f64 {
        rs.iter().map(|r| r.total).sum::<f64>() / rs.len().max(1) as f64
    }

    pub fn first_mean(&self, k: usize) -> f64 {
        Self::mean(&self.records[..k.min(self.len())])
    }

    pub fn last_mean(&self, k: usize) -> f64 {
        Self::mean(&self.records[self.len().saturating_sub(k)..])
    }
}

pub struct Trained {
    pub model: Model<f32>,
    pub trace: LossTrace,
    pub checkpoints: Vec<PathBuf>,
}

/// One z-slab of a case with its raw labels (0/1/2).
#[derive(Clone, Debug)]
pub struct TrainChunk {
    pub case_id: String,
    pub image: Array3<f32>,
    pub labels: Array3<u8>,
}

/// Every z-chunk of every case, in case order; empty chunks are kept.
pub fn chunk_pool(dataset: &[Case], pipeline: &PipelineConfig) -> Result<Vec<TrainChunk>> {
    pipeline.grid.validate()?;
    let mut pool = Vec::new();
    for case in dataset {
        let truth = case
            .truth
            .as_ref()
            .ok_or_else(|| Error::Config(format!("case {} has no truth mask", case.id)))?;
        let image = if pipeline.normalize {
            normalize_intensity(&case.image)
        } else {
            case.image.clone()
        };
        let (image, mask, _) = to_canonical_on(&pipeline.grid, &image, Some(truth))?;
        let images = slice_z(&image.data, &pipeline.grid)?;
        let labels = slice_z(&mask.expect("mask given").data, &pipeline.grid)?;
        for (image, labels) in images.into_iter().zip(labels) {
            pool.push(TrainChunk {
                case_id: case.id.clone(),
                image,
                labels,
            });
        }
    }
    Ok(pool)
}

/// Stacks `(image, target, ignore)` triples into a network batch.
pub fn assemble_batch(items: &[(Array3<f32>, Array3<u8>, Array3<u8>)]) -> Result<(Tensor5<f32>, Vec<u8>, Vec<u8>)> {
    let [h, w, d] = dims(&items[0].0);
    let mut x = Vec::with_capacity(items.len() * h * w * d);
    let mut t = Vec::with_capacity(x.capacity());
    let mut ig = Vec::with_capacity(x.capacity());
    for (img, tg, ign) in items {
        if dims(img) != [h, w, d] {
            return Err(Error::Shape("batch items differ in shape".into()));
        }
        x.extend(img.iter());
        t.extend(tg.iter());
        ig.extend(ign.iter());
    }
    Ok((Tensor5::from_vec([items.len(), h, w, d, 1], x)?, t, ig))
}

/// Runs `train_cfg.steps` Adam updates over shuffled minibatches drawn from
/// [`chunk_pool`]. Batch order comes from `train_cfg.seed`; each sample's
/// augmentation stream is keyed by its running sample index, so results do
/// not depend on thread scheduling.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    pipeline: &PipelineConfig,
    dataset: &[Case],
    checkpoint_dir: Option<&Path>,
) -> Result<Trained> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    model_cfg.check_spatial(pipeline.grid.chunk_shape())?;
    let mut model = Model::<f32>::build(model_cfg)?;
    let pool = chunk_pool(dataset, pipeline)?;
    let mut adam = Adam::new(AdamConfig::with_lr(train_cfg.lr), &model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = LossTrace::default();
    let mut checkpoints = Vec::new();
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let aug = &train_cfg.augmentation;
    let mut sample_counter = 0u64;

    for step in 1..=train_cfg.steps {
        let mut picks = Vec::with_capacity(train_cfg.batch_size);
        while picks.len() < train_cfg.batch_size {
            if order.is_empty() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            picks.push((order.pop().expect("refilled"), sample_counter));
            sample_counter += 1;
        }
        let items: Vec<_> = picks
            .par_iter()
            .map(|&(i, sample)| {
                let chunk = &pool[i];
                let mut rng = ChaCha8Rng::seed_from_u64(aug.seed);
                rng.set_stream(sample);
                let draw = AugmentDraw::draw(aug, dims(&chunk.image), &mut rng);
                let (img, lab) = draw.apply(aug, &chunk.image, &chunk.labels)?;
                let lab = crate::volume_io::LabelMask { data: lab, spacing: [1.0; 3] };
                let (t, ig) = training_target_with(&lab, pipeline.ignore_label2);
                Ok((img, t, ig))
            })
            .collect::<Result<_>>()?;
        let (x, target, ignore) = assemble_batch(&items)?;
        let (logits, cache) = model.forward_train(&x)?;
        match combined_loss_grad(&logits, &target, &ignore, train_cfg.loss_weights) {
            Ok((value, dlogits)) => {
                if !value.total.is_finite() {
                    return Err(Error::Diverged { step, loss: value.total });
                }
                let grads = model.backward(&cache, &dlogits);
                if grads.0.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { step, loss: value.total });
                }
                adam.step(&mut model.params, &grads);
                model.update_running_stats(&cache);
                trace.records.push(LossRecord {
                    step,
                    total: value.total,
                    ce: value.ce,
                    dice: value.dice,
                });
                log::debug!("step {step}: loss {:.5} (ce {:.5}, dice {:.5})", value.total, value.ce, value.dice);
            }
            Err(Error::AllIgnored) => log::warn!("step {step}: every voxel in the batch is ignored; skipped"),
            Err(e) => return Err(e),
        }
        if let Some(dir) = checkpoint_dir {
            let periodic = train_cfg.checkpoint_every > 0 && step % train_cfg.checkpoint_every == 0;
            if periodic || step == train_cfg.steps {
                let path = dir.join(format!("ckpt_{step}.bin"));
                save_checkpoint(&path, &model, pipeline, step)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(Trained {
        model,
        trace,
        checkpoints,
    })
}
