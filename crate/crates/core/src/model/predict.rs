use ndarray::Array3;

use super::unet::Model;
use crate::error::Result;
use crate::preprocessing::{from_canonical, prepare_case, unslice_z, GeometryRecord, PipelineConfig};
use crate::tensor::{Real, Tensor5};
use crate::volume_io::{Case, LabelMask};

/// Wraps a single-channel `(H, W, D)` chunk as a `(1, H, W, D, 1)` tensor.
pub fn chunk_tensor<T: Real>(chunk: &Array3<f32>) -> Tensor5<T> {
    let s = chunk.shape();
    let data = chunk.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Tensor5::from_vec([1, s[0], s[1], s[2], 1], data).expect("chunk shape")
}

/// Per-voxel argmax over classes; ties resolve to the lower class index.
pub fn argmax_labels<T: Real>(logits: &Tensor5<T>, sample: usize) -> Array3<u8> {
    let [_, h, w, d, c] = logits.shape();
    let data = logits.sample(sample);
    let labels = data
        .chunks_exact(c)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if v[k] > v[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Array3::from_shape_vec((h, w, d), labels).expect("logit shape")
}

/// to_canonical → slice_z → forward → argmax → unslice_z → from_canonical.
pub fn predict_case(model: &Model<f32>, pipeline: &PipelineConfig, case: &Case) -> Result<(LabelMask, GeometryRecord)> {
    let prepared = prepare_case(
        &Case {
            truth: None,
            ..case.clone()
        },
        pipeline,
    )?;
    let mut chunks = Vec::with_capacity(prepared.image_chunks.len());
    for chunk in &prepared.image_chunks {
        let logits = model.forward(&chunk_tensor::<f32>(chunk))?;
        chunks.push(argmax_labels(&logits, 0));
    }
    let canonical = unslice_z(&chunks, &pipeline.grid)?;
    let pred = LabelMask {
        data: canonical,
        spacing: case.image.spacing,
    };
    let restored = from_canonical(&pred, &prepared.geometry)?;
    Ok((restored, prepared.geometry))
}

/// Class-1 softmax probability of one sample, shape `(H, W, D)`.
pub fn foreground_probability<T: Real>(logits: &Tensor5<T>, sample: usize) -> Array3<f32> {
    let [_, h, w, d, c] = logits.shape();
    let probs = logits
        .sample(sample)
        .chunks_exact(c)
        .map(|v| {
            let m = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: f64 = v.iter().map(|&x| (x - m).as_f64().exp()).sum();
            ((v[1] - m).as_f64().exp() / z) as f32
        })
        .collect();
    Array3::from_shape_vec((h, w, d), probs).expect("logit shape")
}
