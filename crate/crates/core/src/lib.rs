//! Anisotropic 3D U-Net with spatial attention on the skips and atrous
//! spatial pyramid pooling in the bottleneck, for white matter hyperintensity
//! segmentation, together with its data pipeline, trainer and metrics.

pub mod augmentation;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod preprocessing;
pub mod tensor;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};
pub use tensor::Tensor5;
